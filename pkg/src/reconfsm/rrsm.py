"""Reconfigurable state machine built from one fixed-membership machine per configuration.

Each proposed configuration gets its own back-end instance ("branch"). The
successor of a configuration is the first configuration its own machine
orders; the trunk is the chain of those branch prefixes and is the global
total order. Members of a new configuration join its machine as soon as the
JOIN notice arrives, so commands can be ordered there speculatively while the
parent is still choosing its successor.

:class:`Replica` is a host-agnostic, single-threaded state machine: feed it
client calls, messages and ticks; drain ``outbox`` and watch ``outputs``.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .core import (
    LEARN, NEW_CONF, READY, Command, ConfigId, Configuration, ConsistencyError, Entry,
    NodeId, OutputEvent,
)
from .nrsm import BackendFactory, NrsmBackend, initial_leader

log = logging.getLogger(__name__)

ACTIVE, IDLE = "active", "idle"


@dataclass(frozen=True, slots=True)
class JoinMsg:
    parent: Configuration
    new: Configuration


@dataclass(frozen=True, slots=True)
class StateMsg:
    """Gossiped trunk. ``entries`` holds ``trunk[base:]`` of a trunk of ``length``."""
    length: int
    entries: Sequence[Entry]
    view: tuple[NodeId, ...]
    base: int = 0


ReductionMsg = (JoinMsg, StateMsg)

# hook(direction, kind, config_id, value) for every external input and output
TraceHook = Callable[[str, str, Optional[ConfigId], object], None]


class Replica:
    def __init__(self, node_id: NodeId, c0: Configuration, backend_factory: BackendFactory,
                 *, speculation: bool = True, gossip_period: float = 10.0,
                 clock: Callable[[], float] = lambda: 0.0, hook: Optional[TraceHook] = None):
        self.id = node_id
        self.c0 = c0
        self.factory = backend_factory
        self.speculation = speculation
        self.gossip_period = gossip_period
        self.clock = clock
        self.hook = hook
        self.status = IDLE
        self.view: set[NodeId] = set()
        self.configs: dict[ConfigId, Configuration] = {c0.id: c0}
        self.parent_of: dict[ConfigId, ConfigId] = {}
        self.branches: dict[ConfigId, list[Entry]] = {}
        self.superseded: set[ConfigId] = set()  # branches already holding a configuration
        self.trunk: list[Entry] = []
        self.trunk_configs: dict[ConfigId, int] = {c0.id: -1}  # id -> trunk index
        self._trunk_cmds: set[str] = set()
        self.next = 0
        self.cur_conf: Configuration = c0
        self.machines: dict[ConfigId, NrsmBackend] = {}
        self._ticking: dict[ConfigId, NrsmBackend] = {}  # machines not yet superseded
        self.outputs: list[OutputEvent] = []
        self.subscribers: list[Callable[[OutputEvent], None]] = []
        self.outbox: list[tuple[NodeId, object]] = []
        self.metrics = {"dropped_proposals": 0, "dropped_recons": 0, "held_messages": 0}
        self._held: dict[ConfigId, list] = {}
        self._local: deque = deque()
        self._touched: dict[ConfigId, NrsmBackend] = {}
        self._deferred: deque = deque()
        self._pumping = False
        self._seq = 0
        self._next_gossip = 0.0
        if node_id in c0.members:
            self.join_conf(c0)
            self.view = set(c0.members)
        self._pump()

    # -- environment inputs ---------------------------------------------

    def propose(self, conf_id: ConfigId, cmd: Command) -> bool:
        """Order ``cmd`` under ``conf_id``. Returns False when the guard drops it."""
        if self.hook:
            self.hook("in", "propose", conf_id, cmd)
        if not self._open(conf_id):
            self.metrics["dropped_proposals"] += 1
            if self.hook:
                self.hook("note", "dropped", conf_id, cmd)
            return False
        machine = self.machines[conf_id]
        machine.propose(cmd)
        self._touched[conf_id] = machine
        self._pump()
        return True

    def recon(self, conf_id: ConfigId, new: Configuration) -> bool:
        if self.hook:
            self.hook("in", "recon", conf_id, new)
        if not self._open(conf_id):
            self.metrics["dropped_recons"] += 1
            if self.hook:
                self.hook("note", "dropped", conf_id, new)
            return False
        parent = self.configs[conf_id]
        self.configs.setdefault(new.id, new)
        self.parent_of.setdefault(new.id, conf_id)
        notice = JoinMsg(parent, new)
        for q in new.members:
            self._send(q, notice)
        machine = self.machines[conf_id]
        machine.propose(new)
        self._touched[conf_id] = machine
        self.view.update(new.members)
        self._pump()
        return True

    def _open(self, conf_id: ConfigId) -> bool:
        return conf_id in self.branches and conf_id not in self.superseded

    # -- network and timers ----------------------------------------------

    def on_message(self, src: NodeId, msg) -> None:
        self._dispatch(src, msg)
        self._pump()

    def tick(self, now: float) -> None:
        # a superseded branch can add nothing more to the trunk, so its timers stay off
        for machine in self._ticking.values():
            machine.tick(now)
            if machine.outbox:
                self._touched[machine.cid] = machine
        if self.status == ACTIVE and now >= self._next_gossip:
            self._next_gossip = now + self.gossip_period
            self.state_transfer_tick()
        self._pump()

    def state_transfer_tick(self) -> None:
        if self.status != ACTIVE:
            return
        trunk = tuple(self.trunk)
        view = tuple(sorted(self.view))
        msg = StateMsg(len(trunk), trunk, view)
        for q in view:
            if q != self.id:
                self.outbox.append((q, msg))

    def _dispatch(self, src: NodeId, msg) -> None:
        kind = type(msg)
        if kind is StateMsg:
            self.on_state_msg(src, msg)
        elif kind is JoinMsg:
            self.on_join_msg(src, msg)
        else:
            machine = self.machines.get(msg.config)
            if machine is None:
                self._held.setdefault(msg.config, []).append((src, msg))
                self.metrics["held_messages"] += 1
                return
            machine.on_message(src, msg)
            self._touched[msg.config] = machine

    def on_join_msg(self, src: NodeId, msg: JoinMsg) -> None:
        parent, new = msg.parent, msg.new
        if src not in parent.members:
            return
        self.configs.setdefault(parent.id, parent)
        self.configs.setdefault(new.id, new)
        self.parent_of.setdefault(new.id, parent.id)
        if self.speculation and new.id not in self.branches and self.id in new.members:
            self.join_conf(new)
            self._emit(READY, new)
            self.view.update(parent.members)
            self.view.update(new.members)
        elif not self.speculation:
            self.view.update(parent.members)
            self.view.update(new.members)

    def on_state_msg(self, src: NodeId, msg: StateMsg) -> None:
        local = len(self.trunk)
        if msg.length > local:
            base = msg.base
            if base > local:
                raise ConsistencyError(f"{self.id}: state from {src} starts at {base} > {local}")
            if local:
                overlap = msg.entries[: local - base]
                if list(overlap) != self.trunk[base:local]:
                    raise ConsistencyError(
                        f"{self.id}: trunk from {src} diverges\n"
                        f"  local:  {self.trunk!r}\n  remote: {list(msg.entries)!r}")
            for i in range(local, msg.length):
                self.learn_next(msg.entries[i - base])
            self._advance()
        self.view.update(msg.view)
        self.view.add(src)

    # -- branch to trunk ---------------------------------------------------

    def on_nrsm_learn(self, conf_id: ConfigId, x: Entry) -> None:
        branch = self.branches[conf_id]
        branch.append(x)
        if type(x) is Configuration:
            self.superseded.add(conf_id)
            self._ticking.pop(conf_id, None)
            self.configs.setdefault(x.id, x)
            self.parent_of.setdefault(x.id, conf_id)
        if conf_id == self.cur_conf.id:
            self._advance()

    def _advance(self) -> None:
        branch = self.branches.get(self.cur_conf.id)
        while branch is not None and self.next < len(branch):
            self.learn_next(branch[self.next])
            branch = self.branches.get(self.cur_conf.id)

    def learn_next(self, x: Entry) -> None:
        if type(x) is Configuration:
            if x.id in self.trunk_configs:
                raise ConsistencyError(f"{self.id}: configuration {x.id} twice in trunk")
            self.trunk.append(x)
            self.trunk_configs[x.id] = len(self.trunk) - 1
            self.configs.setdefault(x.id, x)
            self.parent_of.setdefault(x.id, self.cur_conf.id)
            if x.id not in self.branches and self.id in x.members:
                self.join_conf(x)
                self._emit(READY, x)
            self.view.update(x.members)
            self._emit(NEW_CONF, x)
            self.next = 0
            self.cur_conf = x
        else:
            if x.id in self._trunk_cmds:
                raise ConsistencyError(f"{self.id}: command {x.id} twice in trunk")
            self.trunk.append(x)
            self._trunk_cmds.add(x.id)
            self._emit(LEARN, x)
            self.next += 1

    def join_conf(self, c: Configuration) -> None:
        if c.id in self.branches:
            raise ConsistencyError(f"{self.id}: joined {c.id} twice")
        self.status = ACTIVE
        self.branches[c.id] = []
        machine = self.factory(c, self.id, initial_leader(c), self.clock)
        machine.join()
        self.machines[c.id] = machine
        if c.id not in self.superseded:
            self._ticking[c.id] = machine
        self._touched[c.id] = machine
        for src, msg in self._held.pop(c.id, ()):
            machine.on_message(src, msg)

    # -- plumbing ------------------------------------------------------------

    def _emit(self, kind: str, value) -> None:
        event = OutputEvent(kind, value, self.id, self._seq)
        self._seq += 1
        self.outputs.append(event)
        if self.hook:
            self.hook("out", kind, None, value)
        for fn in self.subscribers:
            fn(event)

    def _send(self, to: NodeId, msg) -> None:
        if to == self.id:
            self._local.append(msg)
        else:
            self.outbox.append((to, msg))

    def defer(self, fn: Callable[[], None]) -> None:
        """Run ``fn`` once the current step settles (output subscribers must not re-enter)."""
        self._deferred.append(fn)
        self._pump()

    def _pump(self) -> None:
        """Run loopback messages, machine learns and deferred calls until nothing moves."""
        if self._pumping:
            return
        self._pumping = True
        local, touched, deferred = self._local, self._touched, self._deferred
        try:
            while local or touched or deferred:
                while local:
                    self._dispatch(self.id, local.popleft())
                while touched:
                    cid, machine = touched.popitem()
                    if machine.outbox:
                        out, machine.outbox = machine.outbox, []
                        for to, msg in out:
                            if to == self.id:
                                local.append(msg)
                            else:
                                self.outbox.append((to, msg))
                    for event in machine.poll():
                        self.on_nrsm_learn(cid, event.value)
                if deferred and not local and not touched:
                    deferred.popleft()()
        finally:
            self._pumping = False

    # -- introspection -------------------------------------------------------

    def has_pending(self) -> bool:
        """Whether any machine still open for proposals holds an undecided local proposal."""
        return any(m.has_pending() for cid, m in self.machines.items() if cid not in self.superseded)

    def successor_of(self, conf_id: ConfigId) -> Optional[ConfigId]:
        branch = self.branches.get(conf_id)
        if branch is None:
            return None
        for x in branch:
            if type(x) is Configuration:
                return x.id
        return None

    def status_report(self) -> dict:
        return {
            "node": self.id,
            "status": self.status,
            "trunk_length": len(self.trunk),
            "cur_conf": self.cur_conf.id,
            "members": list(self.cur_conf.members),
            "view": sorted(self.view),
            "machines": len(self.machines),
        }


def decommission_safe(config: Configuration, successor: Configuration,
                      observed: Iterable[OutputEvent]) -> tuple[bool, bool]:
    """Whether members of ``config`` may stop gossiping.

    Returns ``(minority_may_leave, all_may_leave)``: a minority can go once a
    majority of ``config`` delivered the successor's new-conf; everyone can go
    once a majority of ``successor`` did.
    """
    delivered = {e.emitter for e in observed if e.kind == NEW_CONF and e.value.id == successor.id}
    old = sum(1 for m in config.members if m in delivered)
    new = sum(1 for m in successor.members if m in delivered)
    return old >= config.majority, new >= successor.majority
