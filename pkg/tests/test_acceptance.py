"""Acceptance suite: the nine end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting, so a full run prints a verdict for every criterion.
"""
import hashlib
import os
import statistics
import time

import pytest

from reconfsm.bench import LoadSpec, LocalCluster, run_latency_around_recon, run_recon_sweep
from reconfsm.checker import (
    check_all, check_safety, check_well_formedness,
)
from reconfsm.core import Command, Configuration, prefix_comparable
from reconfsm.simnet import Crash, FaultPlan, Simulation, Submit, random_plan, run_plan

from conftest import acceptance_line

SWEEP_SEEDS = range(500)
DETERMINISM_SEEDS = range(0, 500, 10)


@pytest.fixture(scope="module")
def sweep():
    """The 500-run safety sweep, shared by criteria 1, 2, 7 and 8."""
    runs = {}
    start = time.monotonic()
    for seed in SWEEP_SEEDS:
        plan = random_plan(seed)
        res = run_plan(plan, backend="paxos", speculation=True)
        reports = check_all(res.trace, res.trace.correct_nodes())
        runs[seed] = {
            "plan": plan,
            "quiescent": res.quiescent,
            "sim_violations": res.violations,
            "reports": reports,
            "digest": hashlib.sha256(res.trace.dumps().encode()).hexdigest(),
        }
    return runs, time.monotonic() - start


def test_criterion_1_safety_sweep(sweep):
    runs, elapsed = sweep
    passed = [s for s, r in runs.items()
              if r["reports"]["safety"].ok and r["reports"]["well-formedness"].ok and not r["sim_violations"]]
    sizes = {len(r["plan"].nodes) for r in runs.values()}
    crashes = {len(r["plan"].crashes()) for r in runs.values()}
    ok = len(passed) == len(runs) == 500 and elapsed <= 600
    acceptance_line(1, ok, f"safety {len(passed)}/{len(runs)} runs, nodes {sorted(sizes)}, "
                           f"crashes {sorted(crashes)}, {elapsed:.0f}s")
    assert ok, [s for s in runs if s not in passed][:10]


def test_criterion_2_liveness_at_quiescence(sweep):
    runs, _ = sweep
    quiet = [s for s, r in runs.items() if r["quiescent"]]
    live = [s for s in quiet if runs[s]["reports"]["liveness"].status == "pass"]
    ok = len(live) == len(quiet) and len(quiet) > 0
    acceptance_line(2, ok, f"liveness {len(live)}/{len(quiet)} quiescent runs ({len(quiet)}/{len(runs)} quiescent)")
    assert ok, {s: [v.detail for v in runs[s]["reports"]["liveness"].violations[:3]]
                for s in quiet if s not in live}


def serial_trunk(plan, backend):
    """Drive a plan's commands and recons one at a time, each waiting for the last to finish.

    Returns the trunk as payloads and configuration ids, which do not depend
    on which node happened to propose or on the command ids its queue chose.
    """
    sim = Simulation(FaultPlan(plan.nodes, plan.c0, plan.seed, plan.delay, []), backend=backend)
    ops = [op for op in plan.ops if not isinstance(op, Crash)]
    state = {"i": 0, "done": False, "latest": plan.c0}

    def proposer():
        latest = state["latest"]
        return sorted(latest.members)[0]

    def settled(s, cfg):
        return all(s.replicas[m].cur_conf.id == cfg.id for m in cfg.members)

    def step(s):
        if state["i"] == len(ops):
            state["done"] = True
            return
        op = ops[state["i"]]
        state["i"] += 1
        node = proposer()
        if isinstance(op, Submit):
            s.queues[node].submit(op.key, op.payload)
            s._flush(node)
        else:
            r = s.replicas[node]
            r.recon(r.cur_conf.id, op.config)
            s._flush(node)
            state["latest"] = op.config

            def poll(s2, cfg=op.config):
                if settled(s2, cfg):
                    step(s2)
                else:
                    s2.call_at(s2.now + 5.0, poll)
            s.call_at(s.now + 5.0, poll)

    sim.reply_listeners.append(lambda key, node, ok, info: sim.call_at(sim.now, step))
    sim.call_at(1.0, step)
    sim.wait(lambda: state["done"])
    res = sim.run(time_bound=10_000_000.0)
    assert res.quiescent and state["done"]
    trunks = [r.trunk for r in res.replicas.values()]
    longest = max(trunks, key=len)
    return [x.payload if isinstance(x, Command) else x.id for x in longest], trunks


def internally_consistent(replicas):
    trunks = [r.trunk for r in replicas.values()]
    return all(prefix_comparable(a, b) for a in trunks for b in trunks)


def test_criterion_3_differential_oracle():
    seeds = range(100)
    consistent = identical = 0
    mismatched = []
    for seed in seeds:
        plan = random_plan(seed, commands=200, recon_every=(15, 40), max_crashes=0)
        a = run_plan(plan, backend="paxos")
        b = run_plan(plan, backend="sequencer")
        if a.quiescent and b.quiescent and internally_consistent(a.replicas) and internally_consistent(b.replicas):
            consistent += 1
        pa, ta = serial_trunk(plan, "paxos")
        pb, tb = serial_trunk(plan, "sequencer")
        if pa == pb and all(prefix_comparable(x, y) for x in ta for y in ta):
            identical += 1
        else:
            mismatched.append(seed)
    ok = consistent == len(seeds) and identical == len(seeds)
    acceptance_line(3, ok, f"prefix-consistent {consistent}/{len(seeds)}, serial trunks identical {identical}/{len(seeds)}")
    assert ok, mismatched[:10]


@pytest.mark.parametrize("members", [3, 5])
def test_criterion_4_paxos_message_economy(members):
    nodes = tuple(f"n{i}" for i in range(1, members + 1))
    c0 = Configuration("C0", nodes)
    n = 300
    ops = [Submit(20.0 + 25.0 * i, nodes[i % members], f"k{i}", b"v%d" % i) for i in range(n)]
    res = run_plan(FaultPlan(nodes, c0, 9, ("uniform", 1.0, 10.0), ops))
    leader = res.replicas["n1"].machines["C0"].metrics
    accepts = res.messages.get("Accept", 0)
    prepares = res.messages.get("Prepare", 0)
    ok = (res.quiescent and leader["accept_broadcasts"] == n and accepts == n * (members - 1)
          and leader["accepted_tally"] == n * c0.majority and prepares == 0
          and len(res.replicas["n1"].trunk) == n)
    acceptance_line(4, ok, f"{members} nodes: {leader['accept_broadcasts']} Accept broadcasts "
                           f"({accepts} messages) and {leader['accepted_tally']} Accepted counted for {n} "
                           f"commands, {prepares} Prepare", key=f"4[{members}]")
    assert ok


def test_criterion_5_speculation_latency_shape():
    on = run_latency_around_recon(100.0, True)
    off = run_latency_around_recon(100.0, False)
    lat_on = dict(zip(on.offsets, on.latencies))
    lat_off = dict(zip(off.offsets, off.latencies))
    straddle = statistics.fmean(lat_on[o] for o in range(-10, 10))
    on_ratio = straddle / on.steady
    first_off = lat_off[0] / off.steady
    post = [lat_off[o] for o in range(0, max(off.offsets) + 1)]
    decays = all(b <= a + 1e-9 for a, b in zip(post, post[1:])) and post[-1] <= 1.05 * off.steady
    ok = on_ratio <= 1.25 and first_off >= 2.0 and decays
    acceptance_line(5, ok, f"speculation on: straddle {on_ratio:.3f}x steady; off: first post-recon "
                           f"{first_off:.3f}x steady, decays to {post[-1] / off.steady:.3f}x")
    assert ok


def test_criterion_6_reconfiguration_throughput(tmp_path):
    duration = float(os.environ.get("RECONFSM_ACCEPT_DURATION", "10"))
    warmup = float(os.environ.get("RECONFSM_ACCEPT_WARMUP", "5"))
    repeats = int(os.environ.get("RECONFSM_ACCEPT_REPEATS", "3"))
    load = LoadSpec(threads=10, duration=duration, warmup=warmup)
    counter = iter(range(10_000))
    results = run_recon_sweep(load, (0.0, 5.0, 20.0),
                              lambda: LocalCluster(3, 1, workdir=str(tmp_path / f"run{next(counter)}")),
                              repeats=repeats)
    by_rate = {r.extra["rate"]: r for r in results}
    d5, d20 = by_rate[5.0].degradation, by_rate[20.0].degradation
    violations = sum(r.extra["violations"] or 0 for r in results)
    ok = d5 <= 0.05 and d20 <= 0.30 and violations == 0
    acceptance_line(6, ok, f"baseline {by_rate[0.0].throughput:.0f} req/s; degradation {100 * d5:.1f}% at 5/s, "
                           f"{100 * d20:.1f}% at 20/s; {violations} trace violations; samples "
                           f"{[by_rate[r].extra['samples'] for r in (0.0, 5.0, 20.0)]}")
    assert ok


def test_criterion_7_pruning_determinism(sweep):
    runs, _ = sweep
    racing = sum(r["reports"]["pruning"].stats["racing_parents"] for r in runs.values())
    bad = [s for s, r in runs.items() if not r["reports"]["pruning"].ok]
    ok = not bad and racing > 0
    acceptance_line(7, ok, f"{racing} racing parents across {len(runs)} runs, {len(bad)} disagreements")
    assert ok, bad[:10]


def test_criterion_8_determinism(sweep):
    runs, _ = sweep
    differing = []
    for seed in DETERMINISM_SEEDS:
        again = run_plan(random_plan(seed), backend="paxos", speculation=True)
        if hashlib.sha256(again.trace.dumps().encode()).hexdigest() != runs[seed]["digest"]:
            differing.append(seed)
    ok = not differing
    acceptance_line(8, ok, f"{len(DETERMINISM_SEEDS) - len(differing)}/{len(DETERMINISM_SEEDS)} re-runs byte-identical")
    assert ok, differing


def _violating_traces():
    from test_checker import Builder, clean
    c1 = Configuration("C1", ("n2", "n3", "n4"))
    out = {}
    out["duplicate-propose"] = (clean().propose("n2", "C1", "b").trace, check_well_formedness)
    out["duplicate-recon"] = (clean().recon("n3", "C1", c1).trace, check_well_formedness)
    out["missing-ready"] = (Builder().propose("n4", "C1", "x").trace, check_well_formedness)
    out["integrity"] = (clean().learn("n1", "ghost").trace, check_safety)
    out["no-duplication"] = (clean().learn("n2", "a").trace, check_safety)
    b = Builder().propose("n1", "C0", "a").propose("n2", "C0", "b")
    b.learn("n1", "a").learn("n1", "b").learn("n2", "b").learn("n2", "a")
    out["linearizability"] = (b.trace, check_safety)
    return out


def test_criterion_9_checker_self_test():
    flagged = [prop for prop, (trace, check) in _violating_traces().items() if prop in check(trace).properties()]
    clean_runs = 0
    clean_pass = 0
    for seed in range(20):
        for backend, crashes in (("sequencer", 0), ("paxos", 3)):
            res = run_plan(random_plan(seed, commands=300, max_crashes=crashes), backend=backend)
            clean_runs += 1
            reports = check_all(res.trace, res.trace.correct_nodes())
            if res.quiescent and all(r.status == "pass" for r in reports.values()):
                clean_pass += 1
    ok = len(flagged) == 6 and clean_pass == clean_runs
    acceptance_line(9, ok, f"violating traces flagged {len(flagged)}/6, clean oracle traces pass {clean_pass}/{clean_runs}")
    assert ok
