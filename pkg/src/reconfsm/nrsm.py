"""Fixed-membership total-order engines consumed by the reduction as black boxes.

Every back-end exposes the same surface: ``join``, ``propose``, ``poll`` for the
local process, ``on_message``/``outbox`` for whatever transport hosts it, and
``tick`` for timer-driven work. Delivery is pull-based so the hosting loop stays
single-threaded and replayable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .core import Command, Configuration, ConfigId, Entry, NodeId, WellFormednessError


@dataclass(frozen=True, slots=True)
class NrsmLearnEvent:
    config: ConfigId
    value: Entry
    slot: int


def entry_key(entry: Entry) -> tuple[bool, str]:
    # commands and configurations live in separate id spaces
    return (type(entry) is Command, entry.id)


def initial_leader(config: Configuration) -> NodeId:
    return config.members[0]


Clock = Callable[[], float]
BackendFactory = Callable[[Configuration, NodeId, NodeId, Clock], "NrsmBackend"]


class NrsmBackend:
    """Common bookkeeping for one process's instance of a fixed-membership machine.

    Subclasses decide slots; this base owns well-formedness checks, in-order
    delivery with duplicate suppression, and the learn queue drained by ``poll``.
    ``None`` in a decided slot is a filler that consumes the slot silently.
    """

    #: members that must have joined before the machine makes progress
    operational_quorum: int

    def __init__(self, config: Configuration, owner: NodeId, leader: NodeId, clock: Clock):
        if owner not in config.members:
            raise WellFormednessError(f"{owner} is not a member of {config.id}")
        self.config = config
        self.cid = config.id
        self.owner = owner
        self.leader = leader
        self.clock = clock
        self.peers = tuple(m for m in config.members if m != owner)
        self.joined = False
        self.outbox: list[tuple[NodeId, object]] = []
        self.decided: dict[int, Optional[Entry]] = {}
        self.deliver_next = 0
        self._delivered: set = set()
        self._learns: list[NrsmLearnEvent] = []
        self._learned_count = 0
        self.own_pending: dict = {}
        self.metrics: dict[str, int] = {}

    def join(self) -> None:
        if self.joined:
            raise WellFormednessError(f"{self.owner} joined {self.cid} twice")
        self.joined = True

    def propose(self, value: Entry) -> None:
        if not self.joined:
            raise WellFormednessError(f"{self.owner} proposed to {self.cid} before joining")
        key = entry_key(value)
        if key in self._delivered:
            return
        self.own_pending[key] = value
        self._submit(value)

    def poll(self) -> list[NrsmLearnEvent]:
        if not self._learns:
            return []
        batch, self._learns = self._learns, []
        return batch

    def has_pending(self) -> bool:
        return bool(self.own_pending)

    def on_message(self, src: NodeId, msg) -> None:
        raise NotImplementedError

    def tick(self, now: float) -> None:
        pass

    def _submit(self, value: Entry) -> None:
        raise NotImplementedError

    def _count(self, name: str, n: int = 1) -> None:
        self.metrics[name] = self.metrics.get(name, 0) + n

    def _send(self, to: NodeId, msg) -> None:
        self.outbox.append((to, msg))

    def _broadcast(self, msg, include_self: bool = True) -> None:
        if include_self:
            self.outbox.append((self.owner, msg))
        for p in self.peers:
            self.outbox.append((p, msg))

    def _record_decision(self, slot: int, value: Optional[Entry]) -> bool:
        if slot in self.decided:
            return False
        self.decided[slot] = value
        if value is not None:
            self.own_pending.pop(entry_key(value), None)
        return True

    def _deliver(self) -> None:
        decided = self.decided
        while self.deliver_next in decided:
            value = decided[self.deliver_next]
            self.deliver_next += 1
            if value is None:
                continue
            key = entry_key(value)
            if key in self._delivered:
                continue
            self._delivered.add(key)
            self._learns.append(NrsmLearnEvent(self.cid, value, self._learned_count))
            self._learned_count += 1


@dataclass(frozen=True, slots=True)
class SeqForward:
    config: ConfigId
    entry: Entry


@dataclass(frozen=True, slots=True)
class SeqOrder:
    config: ConfigId
    slot: int
    entry: Entry


class SequencerMachine(NrsmBackend):
    """Reference back-end: the first member stamps slots in arrival order.

    Safe by construction, live only while the sequencer is up. Used as the
    differential oracle for the Paxos back-end.
    """

    operational_quorum = 1

    def __init__(self, config, owner, leader, clock):
        super().__init__(config, owner, leader, clock)
        self.sequencer = config.members[0]
        self._next_slot = 0
        self._seen: set = set()

    def _submit(self, value):
        self._send(self.sequencer, SeqForward(self.cid, value))

    def on_message(self, src, msg):
        if type(msg) is SeqForward:
            if self.owner != self.sequencer:
                return
            key = entry_key(msg.entry)
            if key in self._seen:
                return
            self._seen.add(key)
            order = SeqOrder(self.cid, self._next_slot, msg.entry)
            self._next_slot += 1
            self._count("order_broadcasts")
            self._broadcast(order)
        elif type(msg) is SeqOrder:
            self._record_decision(msg.slot, msg.entry)
            self._deliver()


def sequencer_oracle(config: Configuration, owner: NodeId, leader: NodeId = None,
                     clock: Clock = lambda: 0.0) -> SequencerMachine:
    return SequencerMachine(config, owner, leader or config.members[0], clock)
