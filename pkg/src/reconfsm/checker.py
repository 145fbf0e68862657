"""Trace checker for the reconfigurable state machine's external contract.

Every check is a pure function from a :class:`~reconfsm.trace.Trace` to a
:class:`Report`. Inputs are ``in`` records (``propose``/``recon``), outputs
are ``out`` records (``learn``/``new_conf``/``ready``). ``note`` records mark
inputs the replica dropped at its guard; ``fault`` records mark crashes.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import LEARN, NEW_CONF, READY, Configuration, is_prefix
from .trace import FAULT, IN, NOTE, OUT, Trace

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class Violation:
    prop: str
    node: Optional[str]
    detail: str

    def to_json(self) -> dict:
        return {"property": self.prop, "node": self.node, "detail": self.detail}


@dataclass
class Report:
    name: str
    violations: list = field(default_factory=list)
    inconclusive: bool = False
    stats: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.violations:
            return FAIL
        return INCONCLUSIVE if self.inconclusive else PASS

    @property
    def ok(self) -> bool:
        return not self.violations

    def flag(self, prop: str, node, detail: str) -> None:
        self.violations.append(Violation(prop, node, detail))

    def properties(self) -> set:
        return {v.prop for v in self.violations}

    def to_json(self) -> dict:
        return {"check": self.name, "status": self.status, "stats": self.stats,
                "violations": [v.to_json() for v in self.violations]}


def _config_table(trace: Trace) -> dict:
    """Every configuration mentioned anywhere in the trace, by id."""
    table = {trace.c0.id: trace.c0}
    for r in trace.records:
        if type(r.value) is Configuration:
            table.setdefault(r.value.id, r.value)
    return table


def _sequences(trace: Trace) -> dict:
    """Per-node learn/new-conf output sequence as ``(kind, id)`` pairs."""
    seqs = defaultdict(list)
    for r in trace.records:
        if r.dir == OUT and r.kind in (LEARN, NEW_CONF):
            seqs[r.node].append((r.kind, r.value.id))
    return seqs


def _dropped(trace: Trace) -> set:
    return {(r.node, r.config, r.value.id) for r in trace.records if r.dir == NOTE and r.kind == "dropped"}


def check_well_formedness(trace: Trace) -> Report:
    """Environment obligations: unique command ids, unique recon targets, ready before use."""
    rep = Report("well-formedness")
    proposed_cmds: dict = {}
    recon_targets: dict = {}
    ready = defaultdict(set)
    last_seq: dict = {}
    for r in trace.records:
        prev = last_seq.get(r.node, -1)
        if r.seq != prev + 1:
            rep.flag("sequence-gap", r.node, f"seq {r.seq} after {prev}")
        last_seq[r.node] = r.seq
        if r.dir == OUT and r.kind == READY:
            ready[r.node].add(r.value.id)
            continue
        if r.dir != IN:
            continue
        if r.kind == "propose":
            cid = r.value.id
            if cid in proposed_cmds:
                rep.flag("duplicate-propose", r.node,
                         f"command {cid} already proposed by {proposed_cmds[cid]}")
            else:
                proposed_cmds[cid] = r.node
        elif r.kind == "recon":
            target = r.value.id
            if target in recon_targets:
                rep.flag("duplicate-recon", r.node,
                         f"configuration {target} already proposed by {recon_targets[target]}")
            else:
                recon_targets[target] = r.node
        else:
            continue
        if r.config != trace.c0.id and r.config not in ready[r.node]:
            rep.flag("missing-ready", r.node, f"{r.kind} against {r.config} before ready({r.config})")
    rep.stats = {"proposals": len(proposed_cmds), "recons": len(recon_targets)}
    return rep


def check_safety(trace: Trace) -> Report:
    """Integrity, No Duplication and Linearizability of replica outputs."""
    rep = Report("safety")
    configs = _config_table(trace)
    proposed = set()        # (config, command id) proposed by a member of config
    reconned = set()        # (parent, child) proposed by a member of parent
    recon_any = set()       # child ids proposed by a member of their parent
    current = {}
    seen = defaultdict(set)
    for r in trace.records:
        if r.dir == IN:
            parent = configs.get(r.config)
            member = parent is not None and r.node in parent.members
            if not member:
                continue
            if r.kind == "propose":
                proposed.add((r.config, r.value.id))
            elif r.kind == "recon":
                reconned.add((r.config, r.value.id))
                recon_any.add(r.value.id)
            continue
        if r.dir != OUT:
            continue
        node, ident = r.node, r.value.id
        ctx = current.get(node, trace.c0.id)
        key = (r.kind, ident)
        if key in seen[node]:
            rep.flag("no-duplication", node, f"second {r.kind}({ident})")
        seen[node].add(key)
        if r.kind == LEARN:
            if (ctx, ident) not in proposed:
                rep.flag("integrity", node, f"learn({ident}) under {ctx} without a matching propose")
        elif r.kind == NEW_CONF:
            if (ctx, ident) not in reconned:
                rep.flag("integrity", node, f"new_conf({ident}) under {ctx} without a matching recon")
            current[node] = ident
        elif r.kind == READY:
            if ident not in recon_any:
                rep.flag("integrity", node, f"ready({ident}) without any recon proposing it")

    seqs = _sequences(trace)
    longest = max(seqs.values(), key=len, default=[])
    for node in sorted(seqs):
        seq = seqs[node]
        if not is_prefix(seq, longest):
            at = next(i for i, (a, b) in enumerate(zip(seq, longest)) if a != b)
            rep.flag("linearizability", node,
                     f"output {at} is {seq[at]} but another node has {longest[at]}")
    rep.stats = {"nodes": len(seqs), "longest": len(longest)}
    return rep


def trunk_chain(trace: Trace) -> list:
    """Configuration ids along the longest output sequence, starting with the initial one."""
    seqs = _sequences(trace)
    longest = max(seqs.values(), key=len, default=[])
    return [trace.c0.id] + [ident for kind, ident in longest if kind == NEW_CONF]


def check_liveness_at_quiescence(trace: Trace, correct: Optional[Iterable[str]] = None) -> Report:
    """Eventual delivery once faults and recons stop; inconclusive on non-quiescent traces."""
    rep = Report("liveness")
    if not trace.quiescent:
        rep.inconclusive = True
        return rep
    correct = frozenset(correct) if correct is not None else trace.correct_nodes()
    configs = _config_table(trace)
    chain = trunk_chain(trace)
    final = configs[chain[-1]]
    dropped = _dropped(trace)
    learned = defaultdict(set)
    newconf = defaultdict(set)
    ready = defaultdict(set)
    for r in trace.records:
        if r.dir == OUT:
            {LEARN: learned, NEW_CONF: newconf, READY: ready}[r.kind][r.node].add(r.value.id)

    final_correct = [q for q in final.members if q in correct]
    for r in trace.records:
        if r.dir != IN or r.node not in correct:
            continue
        if r.kind == "propose" and r.config == final.id and r.node in final.members:
            for q in final_correct:
                if r.value.id not in learned[q]:
                    rep.flag("final-learn", q, f"command {r.value.id} proposed to {final.id} by {r.node} never learned")
        elif r.kind == "recon":
            if r.config == final.id and r.node in final.members and (r.node, r.config, r.value.id) not in dropped:
                rep.flag("final-recon", r.node, f"recon({final.id}, {r.value.id}) produced no new configuration")
            if (r.node, r.config, r.value.id) in dropped:
                continue
            if not trace.speculation and r.value.id not in chain:
                continue
            for q in r.value.members:
                if q in correct and r.value.id not in ready[q]:
                    rep.flag("ready-liveness", q, f"no ready({r.value.id}) after recon by {r.node}")

    for parent_id, child_id in zip(chain, chain[1:]):
        parent, child = configs[parent_id], configs[child_id]
        for q in sorted(set(parent.members) | set(child.members)):
            if q in correct and child_id not in newconf[q]:
                rep.flag("new-conf-liveness", q, f"no new_conf({child_id}) after {parent_id}")
    rep.stats = {"trunk_configs": len(chain), "final": final.id}
    return rep


def check_pruning(trace: Trace) -> Report:
    """Every member that moves past a configuration picks the same successor."""
    rep = Report("pruning")
    successor = {}
    children = defaultdict(set)
    dropped = _dropped(trace)
    for r in trace.records:
        if r.dir == IN and r.kind == "recon" and (r.node, r.config, r.value.id) not in dropped:
            children[r.config].add(r.value.id)
    current = defaultdict(lambda: trace.c0.id)
    for r in trace.records:
        if r.dir != OUT or r.kind != NEW_CONF:
            continue
        parent = current[r.node]
        chosen = successor.setdefault(parent, (r.value.id, r.node))
        if chosen[0] != r.value.id:
            rep.flag("pruning", r.node, f"successor of {parent} is {r.value.id} here but {chosen[0]} at {chosen[1]}")
        current[r.node] = r.value.id
    rep.stats = {"racing_parents": sum(1 for c in children.values() if len(c) >= 2),
                 "decided_parents": len(successor)}
    return rep


def check_all(trace: Trace, correct: Optional[Iterable[str]] = None) -> dict:
    return {
        "well-formedness": check_well_formedness(trace),
        "safety": check_safety(trace),
        "pruning": check_pruning(trace),
        "liveness": check_liveness_at_quiescence(trace, correct),
    }


def crashed_nodes(trace: Trace) -> set:
    return {r.node for r in trace.records if r.dir == FAULT and r.kind == "crash"}
