"""Multi-instance Paxos behind the NR-RSM back-end surface.

The configured leader (first member) owns ballot ``(0, leader)``, the smallest
ballot anyone ever uses, so it starts directly in phase 2: one Accept broadcast
and a majority of Accepted per command. Any other node that takes over pays a
full phase 1 starting from its lowest undecided slot and fills holes with
no-op fillers (``None``) so delivery can continue in slot order.

Failure detection is a local timeout evaluated in :meth:`PaxosMachine.tick`;
followers only suspect the leader while they have proposals of their own
waiting, and the timeout is staggered by member rank to avoid duelling
candidates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

from .core import ConfigId, ConsistencyError, Configuration, Entry, NodeId
from .nrsm import NrsmBackend, entry_key, initial_leader

__all__ = [
    "Ballot", "Forward", "Prepare", "Promise", "Accept", "Accepted", "Decided", "Nack",
    "PaxosMachine", "initial_leader", "paxos_factory",
]

FOLLOWER, CANDIDATE, LEADER = "follower", "candidate", "leader"


class Ballot(NamedTuple):
    round: int
    proposer: NodeId


Value = Optional[Entry]  # None is a no-op filler


@dataclass(frozen=True, slots=True)
class Forward:
    config: ConfigId
    entry: Entry


@dataclass(frozen=True, slots=True)
class Prepare:
    config: ConfigId
    ballot: Ballot
    from_slot: int


@dataclass(frozen=True, slots=True)
class Promise:
    config: ConfigId
    ballot: Ballot
    accepted: tuple  # ((slot, Ballot, value), ...)
    decided: tuple  # ((slot, value), ...)
    first_undecided: int


@dataclass(frozen=True, slots=True)
class Accept:
    config: ConfigId
    ballot: Ballot
    items: tuple  # ((slot, value), ...)


@dataclass(frozen=True, slots=True)
class Accepted:
    config: ConfigId
    ballot: Ballot
    slots: tuple


@dataclass(frozen=True, slots=True)
class Decided:
    config: ConfigId
    items: tuple  # ((slot, value), ...)


@dataclass(frozen=True, slots=True)
class Nack:
    config: ConfigId
    ballot: Ballot


class PaxosMachine(NrsmBackend):
    def __init__(self, config: Configuration, owner: NodeId, leader: NodeId, clock,
                 *, timeout: float = 100.0, batching: bool = False):
        super().__init__(config, owner, leader, clock)
        self.operational_quorum = config.majority
        self.majority = config.majority
        self.rank = config.members.index(owner)
        self.timeout = timeout
        self.batching = batching
        # acceptor
        self.promised: Optional[Ballot] = None
        self.accepted: dict[int, tuple[Ballot, Value]] = {}
        # proposer / leader
        self.max_round = 0
        self.leader_ballot = Ballot(0, leader)
        if owner == leader:
            self.role = LEADER
            self.ballot: Optional[Ballot] = self.leader_ballot
        else:
            self.role = FOLLOWER
            self.ballot = None
        self.next_slot = 0
        self.proposals: dict[int, Value] = {}
        self.acks: dict[int, set] = {}
        self._assigned: set = set()
        self.queue: list[Entry] = []
        self.promises: dict[NodeId, Promise] = {}
        self.prepare_from = 0
        self.candidate_since = 0.0
        self.last_heard = 0.0
        self._accept_buf: list[tuple[int, Value]] = []

    # -- local interface -------------------------------------------------

    def join(self):
        super().join()
        self.last_heard = self.clock()

    def _submit(self, value):
        if self.role == LEADER:
            self._lead(value)
            self._flush()
        elif self.role == CANDIDATE:
            self.queue.append(value)
        else:
            if len(self.own_pending) == 1:
                self.last_heard = self.clock()
            self._send(self.leader, Forward(self.cid, value))

    def tick(self, now):
        if not self.joined:
            return
        patience = self.timeout * (1 + self.rank)
        if self.role == FOLLOWER:
            if self.own_pending and now - self.last_heard > patience:
                self.takeover(now)
        elif self.role == CANDIDATE:
            if now - self.candidate_since > patience:
                self.takeover(now)

    def takeover(self, now: Optional[float] = None) -> None:
        """Start phase 1 with a ballot above every round seen so far."""
        now = self.clock() if now is None else now
        carry = self._drain_leadership()
        self.max_round += 1
        self.ballot = Ballot(self.max_round, self.owner)
        self.role = CANDIDATE
        self.candidate_since = now
        self.promises = {}
        self.prepare_from = self.deliver_next
        self.queue = carry + [v for k, v in self.own_pending.items()]
        self._count("prepare_broadcasts")
        self._broadcast(Prepare(self.cid, self.ballot, self.prepare_from))

    # -- message handling ------------------------------------------------

    def on_message(self, src, msg):
        kind = type(msg)
        if kind is Accept:
            self._on_accept(src, msg)
        elif kind is Accepted:
            self._on_accepted(src, msg)
        elif kind is Decided:
            self._on_decided(src, msg)
        elif kind is Forward:
            self._on_forward(src, msg)
        elif kind is Prepare:
            self._on_prepare(src, msg)
        elif kind is Promise:
            self._on_promise(src, msg)
        elif kind is Nack:
            self._heard(msg.ballot)
        self._flush()

    def _on_forward(self, src, msg):
        if self.role == LEADER:
            self._lead(msg.entry)
        elif self.role == CANDIDATE:
            self.queue.append(msg.entry)
        else:
            self._send(self.leader, msg)

    def _on_prepare(self, src, msg):
        ballot = msg.ballot
        if self.promised is not None and ballot < self.promised:
            self._send(src, Nack(self.cid, self.promised))
            return
        self.promised = ballot
        self._heard(ballot)
        lo = msg.from_slot
        accepted = tuple((s, b, v) for s, (b, v) in sorted(self.accepted.items())
                         if s >= lo and s not in self.decided)
        decided = tuple((s, v) for s, v in sorted(self.decided.items()) if s >= lo)
        self._send(src, Promise(self.cid, ballot, accepted, decided, self.deliver_next))

    def _on_promise(self, src, msg):
        if msg.ballot != self.ballot:
            return
        if self.role == LEADER:
            self._catch_up(src, msg.first_undecided)
            return
        if self.role != CANDIDATE:
            return
        self.promises[src] = msg
        if len(self.promises) >= self.majority:
            self._become_leader()

    def _on_accept(self, src, msg):
        ballot = msg.ballot
        if self.promised is not None and ballot < self.promised:
            self._send(src, Nack(self.cid, self.promised))
            return
        self.promised = ballot
        self._heard(ballot)
        decided = self.decided
        for slot, value in msg.items:
            if slot not in decided:
                self.accepted[slot] = (ballot, value)
        self._count("accepted_sent")
        self._send(src, Accepted(self.cid, ballot, tuple(s for s, _ in msg.items)))

    def _on_accepted(self, src, msg):
        if self.role != LEADER or msg.ballot != self.ballot:
            return
        done = []
        for slot in msg.slots:
            acks = self.acks.get(slot)
            if acks is None:
                continue
            acks.add(src)
            if len(acks) == self.majority:
                self._count("accepted_tally", len(acks))
                self._count("decisions")
                value = self.proposals.pop(slot)
                del self.acks[slot]
                done.append((slot, value))
        if done:
            items = tuple(done)
            for slot, value in items:
                self._record_decision(slot, value)
            self._broadcast(Decided(self.cid, items), include_self=False)
            self._deliver()

    def _on_decided(self, src, msg):
        if src == self.leader:
            self.last_heard = self.clock()
        for slot, value in msg.items:
            self._record_decision(slot, value)
        self._deliver()

    # -- leadership ------------------------------------------------------

    def _heard(self, ballot: Ballot) -> None:
        if ballot.round > self.max_round:
            self.max_round = ballot.round
        if ballot.proposer == self.owner:
            return
        if self.role == FOLLOWER:
            if ballot < self.leader_ballot:
                return
            if ballot == self.leader_ballot:
                self.last_heard = self.clock()
                return
        elif ballot <= self.ballot:
            return
        carry = self._drain_leadership()
        self.role = FOLLOWER
        self.ballot = None
        self.leader_ballot = ballot
        self.leader = ballot.proposer
        self.last_heard = self.clock()
        seen = set()
        for value in list(self.own_pending.values()) + carry:
            key = entry_key(value)
            if key in seen or key in self._delivered:
                continue
            seen.add(key)
            self._send(self.leader, Forward(self.cid, value))

    def _drain_leadership(self) -> list[Entry]:
        carry = list(self.queue)
        if self.role == LEADER:
            carry.extend(v for v in self.proposals.values() if v is not None)
        self.queue = []
        self.proposals.clear()
        self.acks.clear()
        self._accept_buf.clear()
        self._assigned.clear()
        return carry

    def _become_leader(self):
        self.role = LEADER
        self.leader = self.owner
        self.leader_ballot = self.ballot
        best: dict[int, tuple[Ballot, Value]] = {}
        top = self.prepare_from - 1
        for promise in self.promises.values():
            for slot, value in promise.decided:
                self._record_decision(slot, value)
                top = max(top, slot)
            for slot, ballot, value in promise.accepted:
                top = max(top, slot)
                if slot not in best or ballot > best[slot][0]:
                    best[slot] = (ballot, value)
        for slot in self.decided:
            top = max(top, slot)
        self._assigned = {entry_key(v) for v in self.decided.values() if v is not None}
        for slot in range(self.prepare_from, top + 1):
            if slot in self.decided:
                continue
            value = best[slot][1] if slot in best else None
            self._assign(slot, value)
        self.next_slot = top + 1
        self._deliver()
        for src, promise in sorted(self.promises.items()):
            self._catch_up(src, promise.first_undecided)
        queued, self.queue = self.queue, []
        for value in queued:
            self._lead(value)
        for value in list(self.own_pending.values()):
            self._lead(value)

    def _catch_up(self, dst: NodeId, first_undecided: int) -> None:
        if dst == self.owner:
            return
        items = tuple((s, v) for s, v in sorted(self.decided.items()) if s >= first_undecided)
        if items:
            self._count("catchup_messages")
            self._send(dst, Decided(self.cid, items))

    def _lead(self, value: Entry) -> None:
        key = entry_key(value)
        if key in self._assigned or key in self._delivered:
            return
        slot = self.next_slot
        self.next_slot += 1
        self._assign(slot, value)

    def _assign(self, slot: int, value: Value) -> None:
        if value is not None:
            self._assigned.add(entry_key(value))
        self.proposals[slot] = value
        self.acks[slot] = set()
        self._accept_buf.append((slot, value))

    def _flush(self) -> None:
        buf = self._accept_buf
        if not buf or self.role != LEADER:
            buf.clear()
            return
        if self.batching or len(buf) == 1:
            self._count("accept_broadcasts")
            self._broadcast(Accept(self.cid, self.ballot, tuple(buf)))
        else:
            for item in buf:
                self._count("accept_broadcasts")
                self._broadcast(Accept(self.cid, self.ballot, (item,)))
        buf.clear()

    def _record_decision(self, slot, value):
        prior = self.decided.get(slot, value)
        if prior != value:
            raise ConsistencyError(
                f"{self.cid}@{self.owner}: slot {slot} decided as {prior!r} and {value!r}")
        return super()._record_decision(slot, value)


def paxos_factory(timeout: float = 100.0, batching: bool = False):
    def make(config, owner, leader, clock):
        return PaxosMachine(config, owner, leader, clock, timeout=timeout, batching=batching)
    return make
