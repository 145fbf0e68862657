import random
import statistics

import pytest

from reconfsm.checker import check_all, check_safety
from reconfsm.core import Configuration
from reconfsm.simnet import (
    Crash, FaultPlan, Recon, Simulation, Submit, delay_model, random_plan, run_plan,
)

C0 = Configuration("C0", ("n1", "n2", "n3"))


def plan_with(ops, nodes=("n1", "n2", "n3"), c0=C0, seed=1, delay=("uniform", 1.0, 10.0)):
    return FaultPlan(nodes, c0, seed, delay, sorted(ops, key=lambda op: op.at))


def test_uniform_delay_mean():
    sample = delay_model("uniform", 50, 150, rng=random.Random(3))
    xs = [sample() for _ in range(100_000)]
    assert abs(statistics.fmean(xs) - 100) < 1.0
    assert 50 <= min(xs) and max(xs) <= 150


def test_delay_model_edge_cases():
    assert delay_model("fixed", 7)() == 7
    assert delay_model("uniform", 4, 4)() == 4
    with pytest.raises(ValueError):
        delay_model("uniform", 5, 1)
    with pytest.raises(ValueError):
        delay_model("gamma", 1)


def test_plan_text_roundtrip():
    ops = [Submit(1.5, "n1", "k1", b"hello world"), Submit(2.0, "*", "k2"),
           Recon(3.0, "*", Configuration("C1", ("n2", "n3", "n4"))), Crash(4.25, "n1")]
    plan = plan_with(ops, nodes=("n1", "n2", "n3", "n4"))
    again = FaultPlan.loads(plan.dumps())
    assert again == plan
    assert again.crashes() == {"n1"}


def test_plan_parse_errors():
    with pytest.raises(ValueError, match="line 3"):
        FaultPlan.loads("nodes n1\nc0 C0 n1\nat 1 explode n1\n")
    with pytest.raises(ValueError):
        FaultPlan.loads("seed 3\n")


def test_empty_plan_is_quiescent():
    res = run_plan(plan_with([]))
    assert res.quiescent
    assert [r for r in res.trace.records if r.dir != "net"] == []


@pytest.mark.parametrize("backend", ["paxos", "sequencer"])
def test_every_submission_answered_and_learned(backend):
    ops = [Submit(5.0 + 3 * i, "*", f"k{i}", b"x") for i in range(50)]
    sim = Simulation(plan_with(ops), backend=backend)
    res = sim.run()
    assert res.quiescent and not res.violations
    assert set(sim.replies) == {f"k{i}" for i in range(50)}
    assert all(ok for _, _, ok, _ in sim.replies.values())
    for node in C0.members:
        assert len(res.replicas[node].trunk) == 50


def test_leader_crash_mid_proposal():
    ops = [Submit(10.0 + i, "n2", f"a{i}") for i in range(5)]
    ops += [Crash(12.5, "n1")]
    ops += [Submit(400.0 + i, "n3", f"b{i}") for i in range(5)]
    sim = Simulation(plan_with(ops))
    res = sim.run()
    assert res.quiescent
    reports = check_all(res.trace, res.trace.correct_nodes())
    assert all(r.ok for r in reports.values()), {k: r.violations for k, r in reports.items()}
    assert res.replicas["n3"].trunk == res.replicas["n2"].trunk
    assert set(sim.replies) == {f"a{i}" for i in range(5)} | {f"b{i}" for i in range(5)}
    learned = {x.id for x in res.replicas["n2"].trunk}
    assert all(ok and info in learned for _, _, ok, info in sim.replies.values())
    assert res.messages.get("Prepare", 0) > 0


def test_links_are_fifo_and_reliable():
    plan = random_plan(11, commands=150, recon_every=(20, 40), max_crashes=1)
    res = run_plan(plan, record_messages=True)
    assert res.quiescent
    sent, delivered = {}, {}
    for r in res.trace.records:
        if r.dir != "net":
            continue
        if r.kind == "send":
            sent.setdefault((r.node, r.value["to"]), []).append((r.value["id"], r.value["type"]))
        else:
            delivered.setdefault((r.value["from"], r.node), []).append((r.value["id"], r.value["type"]))
    crashed = plan.crashes()
    for link, ids in delivered.items():
        assert ids == sent[link][:len(ids)], f"reordered on {link}"
    for link, ids in sent.items():
        if link[1] in crashed or link[0] in crashed:
            continue
        # everything except periodic gossip is delivered before quiescence
        missing = [t for t in ids[len(delivered.get(link, [])):] if t[1] != "StateMsg"]
        assert not missing, f"lost on {link}: {missing}"


def test_same_seed_gives_identical_trace():
    plan = random_plan(7, commands=200)
    a = run_plan(plan).trace.dumps()
    b = run_plan(FaultPlan.loads(plan.dumps())).trace.dumps()
    assert a == b
    assert run_plan(random_plan(8, commands=200)).trace.dumps() != a


def test_codec_roundtrip_changes_nothing():
    plan = random_plan(5, commands=150)
    assert run_plan(plan).trace.dumps() == run_plan(plan, codec_roundtrip=True).trace.dumps()


@pytest.mark.parametrize("seed", range(20))
def test_random_plan_keeps_majority_correct(seed):
    plan = random_plan(seed, commands=300)
    faulty = plan.crashes()
    configs = [plan.c0] + [op.config for op in plan.ops if isinstance(op, Recon)]
    for c in configs:
        assert len(c.members) == 3
        assert sum(1 for m in c.members if m not in faulty) >= c.majority
    assert 3 <= len(plan.nodes) <= 5 and len(faulty) <= 3
    assert sum(isinstance(op, Submit) for op in plan.ops) == 300


def test_sweep_runs_pass_safety():
    for seed in range(5):
        res = run_plan(random_plan(seed, commands=300))
        assert res.quiescent
        assert check_safety(res.trace).ok


def test_call_at_and_wait_hold_run_open():
    sim = Simulation(plan_with([]))
    fired = []
    sim.call_at(50.0, lambda s: fired.append(s.now))
    flag = {"done": False}
    sim.call_at(500.0, lambda s: flag.update(done=True))
    sim.wait(lambda: flag["done"])
    res = sim.run()
    assert fired == [50.0] and res.quiescent and res.end_time >= 500.0


def test_time_bound_stops_run():
    ops = [Submit(10.0 * i, "*", f"k{i}") for i in range(1, 200)]
    res = run_plan(plan_with(ops), time_bound=100.0)
    assert not res.quiescent and res.end_time <= 100.0
