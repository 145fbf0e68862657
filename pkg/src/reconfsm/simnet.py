"""Seeded discrete-event network hosting a set of replicas.

Channels are reliable and FIFO per ordered pair (delivery times are clamped to
the previous delivery on the same link); processes fail by crashing. Timers,
client operations and crashes are all events in one queue ordered by
``(time, insertion order)``, so a seed and a plan replay bit-identically.

Times are in milliseconds of virtual time.
"""
from __future__ import annotations

import heapq
import random
import shlex
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import paxos
from .core import Command, ConsistencyError, Configuration, NodeId, NEW_CONF, LEARN
from .nrsm import sequencer_oracle
from .rrsm import ACTIVE, Replica, StateMsg
from .runtime.cq import REDIRECT, CommandQueue
from .trace import FAULT, NET, Record, Trace

DELIVER, TICK, OP, GOSSIP = 0, 1, 2, 3


# -- delay models --------------------------------------------------------------

def delay_model(kind: str, *params: float, rng: Optional[random.Random] = None) -> Callable[[], float]:
    """``fixed(d)`` or ``uniform(lo, hi)`` sampler drawing from ``rng``."""
    if kind == "fixed":
        (d,) = params
        return lambda: d
    if kind == "uniform":
        lo, hi = params
        if lo > hi:
            raise ValueError(f"uniform delay needs lo <= hi, got {lo} > {hi}")
        if lo == hi:
            return lambda: lo
        rng = rng or random.Random(0)
        return lambda: rng.uniform(lo, hi)
    raise ValueError(f"unknown delay model {kind!r}")


# -- plans ---------------------------------------------------------------------

@dataclass(frozen=True)
class Submit:
    at: float
    node: str  # "*" lets the driver pick a live node with a ready configuration
    key: str
    payload: bytes = b""


@dataclass(frozen=True)
class Recon:
    at: float
    node: str  # "*" lets the driver pick a live member of its current configuration
    config: Configuration


@dataclass(frozen=True)
class Crash:
    at: float
    node: str


Op = Union[Submit, Recon, Crash]


@dataclass
class FaultPlan:
    nodes: tuple
    c0: Configuration
    seed: int = 0
    delay: tuple = ("uniform", 1.0, 10.0)
    ops: list = field(default_factory=list)

    def crashes(self) -> set:
        return {op.node for op in self.ops if isinstance(op, Crash)}

    def dumps(self) -> str:
        lines = [
            "nodes " + " ".join(self.nodes),
            "c0 " + " ".join((self.c0.id,) + self.c0.members),
            f"seed {self.seed}",
            "delay " + " ".join(str(x) for x in self.delay),
        ]
        for op in self.ops:
            if isinstance(op, Submit):
                payload = op.payload.decode() if op.payload else ""
                lines.append(f"at {op.at!r} submit {op.node} {op.key} {shlex.quote(payload)}".rstrip())
            elif isinstance(op, Recon):
                lines.append(f"at {op.at!r} recon {op.node} {op.config.id} " + " ".join(op.config.members))
            else:
                lines.append(f"at {op.at!r} crash {op.node}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FaultPlan":
        nodes, c0, seed, delay, ops = None, None, 0, ("uniform", 1.0, 10.0), []
        for lineno, raw in enumerate(text.splitlines(), 1):
            words = shlex.split(raw, comments=True)
            if not words:
                continue
            head, rest = words[0], words[1:]
            try:
                if head == "nodes":
                    nodes = tuple(rest)
                elif head == "c0":
                    c0 = Configuration(rest[0], tuple(rest[1:]))
                elif head == "seed":
                    seed = int(rest[0])
                elif head == "delay":
                    delay = (rest[0], *(float(x) for x in rest[1:]))
                elif head == "at":
                    at, verb, args = float(rest[0]), rest[1], rest[2:]
                    if verb == "submit":
                        payload = args[2].encode() if len(args) > 2 else b""
                        ops.append(Submit(at, args[0], args[1], payload))
                    elif verb == "recon":
                        ops.append(Recon(at, args[0], Configuration(args[1], tuple(args[2:]))))
                    elif verb == "crash":
                        ops.append(Crash(at, args[0]))
                    else:
                        raise ValueError(f"unknown operation {verb!r}")
                else:
                    raise ValueError(f"unknown directive {head!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"plan line {lineno}: {exc}") from None
        if nodes is None or c0 is None:
            raise ValueError("plan needs 'nodes' and 'c0' lines")
        return cls(nodes, c0, seed, delay, ops)

    @classmethod
    def load(cls, path) -> "FaultPlan":
        with open(path) as fh:
            return cls.loads(fh.read())


def random_plan(seed: int, *, commands: int = 1000, min_nodes: int = 3, max_nodes: int = 5,
                recon_every: tuple = (25, 100), max_crashes: int = 3, race_prob: float = 0.25,
                interval: float = 1.0, delay: tuple = ("uniform", 1.0, 10.0)) -> FaultPlan:
    """A sweep plan: steady client load, periodic (sometimes racing) recons, scripted crashes.

    Crash victims are fixed up front and every configuration, including the
    initial one, keeps a majority of never-crashing members.
    """
    rng = random.Random(seed)
    n = rng.randint(min_nodes, max_nodes)
    nodes = tuple(f"n{i}" for i in range(1, n + 1))
    size = 3
    f = rng.randint(0, min(max_crashes, n - 2))
    faulty = set(rng.sample(nodes, f))
    correct = [x for x in nodes if x not in faulty]

    def pick_members() -> tuple:
        n_good = size if len(correct) >= size and (not faulty or rng.random() < 0.5) else 2
        good = rng.sample(correct, n_good)
        others = [x for x in nodes if x not in good]
        chosen = good + rng.sample(others, size - n_good)
        rng.shuffle(chosen)
        return tuple(chosen)

    c0 = Configuration("C0", pick_members())
    ops: list = []
    t = 5.0
    next_recon = rng.randint(*recon_every)
    k = 0
    for i in range(commands):
        t += rng.expovariate(1.0 / interval)
        ops.append(Submit(round(t, 6), "*", f"k{i}", f"v{i}".encode()))
        if i + 1 == next_recon:
            racers = 2 if rng.random() < race_prob else 1
            for _ in range(racers):
                k += 1
                ops.append(Recon(round(t, 6), "*", Configuration(f"C{k}", pick_members())))
            next_recon += rng.randint(*recon_every)
    end = t
    for victim in sorted(faulty):
        ops.append(Crash(round(rng.uniform(5.0, end), 6), victim))
    ops.sort(key=lambda op: op.at)
    return FaultPlan(nodes, c0, seed, delay, ops)


# -- simulation ---------------------------------------------------------------

@dataclass
class SimResult:
    trace: Trace
    quiescent: bool
    end_time: float
    events: int
    messages: dict
    replicas: dict
    violations: list


class Simulation:
    def __init__(self, plan: FaultPlan, *, backend: str = "paxos", speculation: bool = True,
                 gossip_period: float = 10.0, tick_period: Optional[float] = None,
                 paxos_timeout: float = 100.0, cq_timeout: float = 1000.0, batching: bool = False,
                 record_messages: bool = False, codec_roundtrip: bool = False):
        self.plan = plan
        self.rng = random.Random(plan.seed)
        self.delay = delay_model(plan.delay[0], *plan.delay[1:], rng=random.Random(plan.seed * 7919 + 1))
        self.now = 0.0
        self.tick_period = tick_period or gossip_period
        self.record_messages = record_messages
        self.codec_roundtrip = codec_roundtrip
        self.trace = Trace(plan.c0, plan.nodes, speculation=speculation)
        self.crashed: set = set()
        self.messages: dict[str, int] = {}
        self.violations: list[str] = []
        self._queue: list = []
        self._seq = 0
        self._nonperiodic = 0
        self._link_last: dict = {}
        self._node_seq: dict = {n: 0 for n in plan.nodes}
        self._msg_ids = 0
        self._global_trunk: list = []
        self._checked: dict = {n: 0 for n in plan.nodes}
        self._waiters: list = []
        self._payloads: dict = {}
        self.replies: dict = {}  # key -> (time, node, ok, info)
        self.reply_listeners: list = []

        if backend == "paxos":
            factory = paxos.paxos_factory(timeout=paxos_timeout, batching=batching)
        elif backend == "sequencer":
            factory = sequencer_oracle
        else:
            factory = backend
        clock = lambda: self.now
        self.replicas: dict[NodeId, Replica] = {}
        self.queues: dict[NodeId, CommandQueue] = {}
        for node in plan.nodes:
            hook = self._hook_for(node)
            replica = Replica(node, plan.c0, factory, speculation=speculation,
                              gossip_period=gossip_period, clock=clock, hook=hook)
            self.replicas[node] = replica
            self.queues[node] = CommandQueue(replica, timeout=cq_timeout, reply=self._reply_for(node))
        for node in plan.nodes:
            self._push(self.rng.uniform(0, self.tick_period), TICK, node, None, None)
        for op in plan.ops:
            self._push(op.at, OP, op, None, None)

    # -- event queue -----------------------------------------------------------

    def _push(self, at, kind, a, b, c):
        self._seq += 1
        if kind != TICK and kind != GOSSIP:
            self._nonperiodic += 1
        heapq.heappush(self._queue, (at, self._seq, kind, a, b, c))

    def _hook_for(self, node):
        records = self.trace.records
        seqs = self._node_seq

        def hook(direction, kind, config, value):
            seq = seqs[node]
            seqs[node] = seq + 1
            records.append(Record(self.now, node, seq, direction, kind, config, value))
        return hook

    def _reply_for(self, node):
        def reply(key, ok, info):
            if not ok and info.startswith(REDIRECT):
                # the client retries at a node that can still serve it
                payload = self._payloads[key]
                self._push(self.now + 1.0, OP, Submit(self.now + 1.0, "*", key, payload), None, None)
                return
            self.replies[key] = (self.now, node, ok, info)
            for fn in self.reply_listeners:
                fn(key, node, ok, info)
        return reply

    def send(self, src: NodeId, dst: NodeId, msg) -> None:
        name = type(msg).__name__
        self.messages[name] = self.messages.get(name, 0) + 1
        if dst in self.crashed:
            return
        if self.codec_roundtrip:
            from .runtime import wire
            msg = wire.roundtrip(msg)
        at = self.now + self.delay()
        link = (src, dst)
        last = self._link_last.get(link)
        if last is not None and at < last:
            at = last
        self._link_last[link] = at
        if self.record_messages:
            self._msg_ids += 1
            mid = self._msg_ids
            self._net(src, "send", {"id": mid, "to": dst, "type": name})
            msg = (mid, msg)
        # gossip is periodic traffic: it never holds off quiescence
        self._push(at, GOSSIP if type(msg) is StateMsg else DELIVER, src, dst, msg)

    def _net(self, node, kind, info):
        seq = self._node_seq[node]
        self._node_seq[node] = seq + 1
        self.trace.records.append(Record(self.now, node, seq, NET, kind, None, info))

    def _flush(self, node):
        replica = self.replicas[node]
        if replica.outbox:
            out, replica.outbox = replica.outbox, []
            for to, msg in out:
                self.send(node, to, msg)

    # -- driver -----------------------------------------------------------------

    def crash(self, node: NodeId) -> None:
        if node in self.crashed:
            return
        self.crashed.add(node)
        seq = self._node_seq[node]
        self._node_seq[node] = seq + 1
        self.trace.records.append(Record(self.now, node, seq, FAULT, "crash"))

    def _apply(self, op) -> None:
        if isinstance(op, Submit):
            node = op.node
            if node == "*":
                live = [n for n in self.plan.nodes
                        if n not in self.crashed and self.queues[n].newest_ready() is not None]
                if not live:
                    return
                node = self.rng.choice(live)
            if node in self.crashed:
                return
            self._payloads[op.key] = op.payload
            self.queues[node].submit(op.key, op.payload)
            self._flush(node)
        elif isinstance(op, Recon):
            node = op.node
            if node == "*":
                eligible = [n for n in self.plan.nodes if n not in self.crashed
                            and n in self.replicas[n].cur_conf.members
                            and self.replicas[n]._open(self.replicas[n].cur_conf.id)]
                if not eligible:
                    return
                best = max(len(self.replicas[n].trunk) for n in eligible)
                eligible = [n for n in eligible if len(self.replicas[n].trunk) == best]
                node = self.rng.choice(eligible)
            if node in self.crashed:
                return
            replica = self.replicas[node]
            replica.recon(replica.cur_conf.id, op.config)
            self._flush(node)
        elif isinstance(op, Crash):
            self.crash(op.node)
        elif callable(op):
            op(self)

    def call_at(self, at: float, fn: Callable[["Simulation"], None]) -> None:
        """Schedule an arbitrary driver action (used by serial clients and benchmarks)."""
        self._push(at, OP, fn, None, None)

    def wait(self, predicate: Callable[[], bool]) -> None:
        """Keep the run alive (non-quiescent) until ``predicate`` holds."""
        self._waiters.append(predicate)

    # -- invariants ---------------------------------------------------------------

    def _check_trunk(self, node):
        trunk = self.replicas[node].trunk
        start = self._checked[node]
        if start == len(trunk):
            return
        g = self._global_trunk
        for i in range(start, len(trunk)):
            x = trunk[i]
            if i < len(g):
                if g[i] is not x and g[i] != x:
                    raise ConsistencyError(
                        f"trunk divergence at index {i}: {node} has {x!r}, others have {g[i]!r}")
            else:
                g.append(x)
        self._checked[node] = len(trunk)

    def quiescent(self) -> bool:
        members = set(self.plan.c0.members)
        for x in self._global_trunk:
            if type(x) is Configuration:
                members.update(x.members)
        active = [r for n, r in self.replicas.items()
                  if n not in self.crashed and (r.status == ACTIVE or n in members)]
        if not active:
            return True
        length = len(active[0].trunk)
        for r in active:
            if len(r.trunk) != length or r.has_pending() or self.queues[r.id].pending:
                return False
        self._waiters = [w for w in self._waiters if not w()]
        return not self._waiters

    def check_pruning(self) -> list[str]:
        """Members of a configuration that picked a successor all picked the same one."""
        chosen: dict = {}
        problems = []
        for node in sorted(self.replicas):
            replica = self.replicas[node]
            for cid in replica.branches:
                succ = replica.successor_of(cid)
                if succ is None:
                    continue
                prior = chosen.setdefault(cid, (node, succ))
                if prior[1] != succ:
                    problems.append(f"{cid}: {prior[0]} picked {prior[1]}, {node} picked {succ}")
        return problems

    # -- main loop ------------------------------------------------------------------

    def run(self, time_bound: float = 120_000.0) -> SimResult:
        queue = self._queue
        replicas = self.replicas
        crashed = self.crashed
        events = 0
        quiescent = False
        while queue:
            at, _, kind, a, b, c = heapq.heappop(queue)
            if at > time_bound:
                break
            self.now = at
            events += 1
            if kind == DELIVER or kind == GOSSIP:
                if kind == DELIVER:
                    self._nonperiodic -= 1
                if b in crashed:
                    continue
                if self.record_messages:
                    mid, c = c
                    self._net(b, "deliver", {"id": mid, "from": a, "type": type(c).__name__})
                replicas[b].on_message(a, c)
                self._flush(b)
                self._check_trunk(b)
            elif kind == TICK:
                if a in crashed:
                    continue
                replicas[a].tick(at)
                self.queues[a].tick(at)
                self._flush(a)
                self._check_trunk(a)
                self._push(at + self.tick_period, TICK, a, None, None)
            else:
                self._nonperiodic -= 1
                self._apply(a)
                for node in self.plan.nodes:
                    if node not in crashed:
                        self._flush(node)
                        self._check_trunk(node)
            if self._nonperiodic == 0 and self.quiescent():
                quiescent = True
                break
        self.trace.quiescent = quiescent
        self.trace.correct = frozenset(n for n in self.plan.nodes if n not in crashed)
        self.violations.extend(self.check_pruning())
        return SimResult(self.trace, quiescent, self.now, events, dict(self.messages),
                         self.replicas, self.violations)


def run_plan(plan: FaultPlan, **kwargs) -> SimResult:
    time_bound = kwargs.pop("time_bound", 120_000.0)
    return Simulation(plan, **kwargs).run(time_bound=time_bound)
