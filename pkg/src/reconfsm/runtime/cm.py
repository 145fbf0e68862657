"""Configuration Manager: replaces suspected members of the current configuration.

Every member runs one. Health comes from the last time anything was heard
from a node (gossip, pings, protocol traffic). When a member of the installed
configuration has been silent past the suspicion timeout, the CM proposes a
configuration with that member swapped for a healthy standby. At most one
recon per parent configuration is outstanding from a given CM; concurrent
proposals from other CMs are arbitrated by the parent's machine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from ..core import NEW_CONF, Configuration, OutputEvent
from ..rrsm import Replica


@dataclass
class CmPolicy:
    suspicion_timeout: float = 2000.0
    target_size: int = 3
    min_healthy: int = 1
    pool: tuple = ()  # every node the CM may draw members from


class ConfigurationManager:
    def __init__(self, replica: Replica, policy: CmPolicy, *, clock: Optional[Callable[[], float]] = None):
        self.replica = replica
        self.policy = policy
        self.clock = clock or replica.clock
        self.last_heard: dict[str, float] = {}
        self.attempted: set = set()  # parents this CM already proposed a successor for
        self.metrics = {"recons": 0, "dropped": 0}
        self._counter = 0
        start = self.clock()
        for node in policy.pool:
            self.last_heard[node] = start
        replica.subscribers.append(self._on_output)

    def heard(self, node: str, now: Optional[float] = None) -> None:
        self.last_heard[node] = self.clock() if now is None else now

    def healthy(self, now: float) -> set:
        limit = self.policy.suspicion_timeout
        healthy = {n for n, t in self.last_heard.items() if now - t <= limit}
        healthy.add(self.replica.id)
        return healthy

    def fresh_id(self) -> str:
        self._counter += 1
        return f"{self.replica.id}:{self._counter}"

    def plan(self, now: float) -> Optional[Configuration]:
        """The configuration this CM would propose now, or None."""
        current = self.replica.cur_conf
        healthy = self.healthy(now)
        keep = [m for m in current.members if m in healthy]
        if len(keep) == len(current.members) and len(keep) >= self.policy.target_size:
            return None
        standby = [n for n in self.policy.pool if n in healthy and n not in current.members]
        members = keep + standby[: max(0, self.policy.target_size - len(keep))]
        if len(members) < self.policy.min_healthy or tuple(members) == current.members:
            return None
        return Configuration(self.fresh_id(), tuple(members))

    def tick(self, now: float) -> Optional[Configuration]:
        r = self.replica
        current = r.cur_conf
        if r.id not in current.members or current.id in self.attempted or not r._open(current.id):
            return None
        new = self.plan(now)
        if new is None:
            return None
        self.attempted.add(current.id)
        if r.recon(current.id, new):
            self.metrics["recons"] += 1
            return new
        self.metrics["dropped"] += 1
        return None

    def _on_output(self, event: OutputEvent) -> None:
        if event.kind == NEW_CONF:
            # a new installed configuration resets suspicion of its members
            now = self.clock()
            for m in event.value.members:
                self.last_heard[m] = max(self.last_heard.get(m, now), now)
