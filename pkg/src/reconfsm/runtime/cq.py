"""Command Queue: binds client requests to configurations and retries lost ones.

A request is wrapped in a command with a fresh id and proposed against the
newest configuration this replica reported ready. When that configuration is
known to be superseded before the command reached the trunk (or the attempt
times out) the request is re-proposed under a new command id. Replies are
sent once per request key, whichever attempt lands first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from ..core import LEARN, NEW_CONF, READY, Command, ConfigId, OutputEvent
from ..rrsm import Replica


@dataclass
class CqEntry:
    key: str
    payload: bytes
    submitted_at: float
    attempts: int = 0
    command_id: Optional[str] = None
    target: Optional[ConfigId] = None
    attempted_at: float = 0.0
    ids: list = field(default_factory=list)
    stalled_since: Optional[float] = None


REDIRECT = "redirect:"

# reply(key, ok, info): info is the learned command id, or an error string
ReplyFn = Callable[[str, bool, str], None]


class CommandQueue:
    def __init__(self, replica: Replica, *, timeout: float = 1000.0, max_attempts: int = 10,
                 reply: Optional[ReplyFn] = None, clock: Callable[[], float] = None):
        self.replica = replica
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.reply = reply
        self.clock = clock or replica.clock
        self.pending: dict[str, CqEntry] = {}
        self.by_command: dict[str, str] = {}
        self.answered: set[str] = set()
        self.ready: list[ConfigId] = []
        if replica.id in replica.c0.members:
            self.ready.append(replica.c0.id)
        self.metrics = {"attempts": 0, "retries": 0, "duplicates_suppressed": 0, "failures": 0,
                        "redirects": 0}
        self._counter = 0
        replica.subscribers.append(self._on_output)

    def submit(self, key: str, payload: bytes = b"") -> None:
        entry = CqEntry(key, payload, self.clock())
        self.pending[key] = entry
        self._attempt(entry)

    def newest_ready(self) -> Optional[ConfigId]:
        for cid in reversed(self.ready):
            if not self._dead(cid):
                return cid
        return None

    def tick(self, now: float) -> None:
        for entry in list(self.pending.values()):
            if entry.target is None:
                if now - entry.stalled_since > self.timeout:
                    self._redirect(entry)
                else:
                    self._attempt(entry)
            elif now - entry.attempted_at > self.timeout:
                self._attempt(entry)

    def _redirect(self, entry: CqEntry) -> None:
        """No configuration here accepts proposals any more: send the client elsewhere."""
        del self.pending[entry.key]
        self.metrics["redirects"] += 1
        if self.reply:
            members = ",".join(self.replica.cur_conf.members)
            self.reply(entry.key, False, f"{REDIRECT}{members}")

    def _attempt(self, entry: CqEntry) -> None:
        if entry.attempts >= self.max_attempts:
            del self.pending[entry.key]
            self.metrics["failures"] += 1
            if self.reply:
                self.reply(entry.key, False, f"gave up after {entry.attempts} attempts")
            return
        target = self.newest_ready()
        if target is None:
            if entry.stalled_since is None:
                entry.stalled_since = self.clock()
            entry.target = None
            return
        entry.stalled_since = None
        entry.attempted_at = self.clock()
        if entry.attempts:
            self.metrics["retries"] += 1
        entry.attempts += 1
        self._counter += 1
        cmd_id = f"{self.replica.id}.{self._counter}"
        entry.command_id = cmd_id
        entry.target = target
        entry.ids.append(cmd_id)
        self.by_command[cmd_id] = entry.key
        self.metrics["attempts"] += 1
        self.replica.propose(target, Command(cmd_id, entry.payload))

    def _dead(self, cid: ConfigId) -> bool:
        """True once nothing proposed under ``cid`` can still reach the trunk here."""
        r = self.replica
        while True:
            if cid in r.trunk_configs:
                return cid != r.cur_conf.id
            parent = r.parent_of.get(cid)
            if parent is None:
                return False
            if parent in r.trunk_configs:
                return parent != r.cur_conf.id
            cid = parent

    def _on_output(self, event: OutputEvent) -> None:
        kind = event.kind
        if kind == LEARN:
            key = self.by_command.pop(event.value.id, None)
            if key is None:
                return
            entry = self.pending.pop(key, None)
            if entry is None:
                self.metrics["duplicates_suppressed"] += 1
                return
            self.answered.add(key)
            if self.reply:
                self.reply(key, True, event.value.id)
        elif kind == READY:
            self.ready.append(event.value.id)
            self.replica.defer(self._reconsider)
        elif kind == NEW_CONF:
            if event.value.id not in self.ready and self.replica.id in event.value.members:
                self.ready.append(event.value.id)
            self.replica.defer(self._reconsider)

    def _reconsider(self) -> None:
        for entry in list(self.pending.values()):
            if entry.target is None or self._dead(entry.target):
                self._attempt(entry)
