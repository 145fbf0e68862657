"""Command line: ``sim``, ``check``, ``node``, ``admin`` and ``bench``."""
from __future__ import annotations

import asyncio
import json
import logging
import sys
from pathlib import Path

import click

from .checker import check_all
from .codec import dumps


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _onoff(value: str) -> bool:
    return value == "on"


ONOFF = click.Choice(["on", "off"])


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Reconfigurable replicated state machine: simulator, checker, cluster node, benchmarks."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- sim -----------------------------------------------------------------------------


@main.group()
def sim():
    """Deterministic simulation."""


@sim.command("run")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False),
              help="Fault plan file; without it a random plan is generated from the seed.")
@click.option("--nodes", type=int, help="Node count for a generated plan (default: 3 to 5 from the seed).")
@click.option("--commands", type=int, default=1000, show_default=True, help="Commands in a generated plan.")
@click.option("--backend", type=click.Choice(["paxos", "sequencer"]), default="paxos", show_default=True)
@click.option("--speculation", type=ONOFF, default="on", show_default=True)
@click.option("--trace-out", type=click.Path(dir_okay=False), help="Write the trace here.")
@click.option("--plan-out", type=click.Path(dir_okay=False), help="Write the (generated) plan here.")
@click.option("--time-bound", type=float, default=120000.0, show_default=True, help="Virtual ms.")
def sim_run(seed, plan_path, nodes, commands, backend, speculation, trace_out, plan_out, time_bound):
    """Run one simulation and print a JSON summary with the checker verdicts."""
    from .simnet import FaultPlan, random_plan, run_plan

    if plan_path:
        plan = FaultPlan.load(plan_path)
        plan.seed = seed
    else:
        kw = {"min_nodes": nodes, "max_nodes": nodes} if nodes else {}
        plan = random_plan(seed, commands=commands, **kw)
    if plan_out:
        Path(plan_out).write_text(plan.dumps())
    result = run_plan(plan, backend=backend, speculation=_onoff(speculation), time_bound=time_bound)
    if trace_out:
        result.trace.dump(trace_out)
    reports = check_all(result.trace)
    summary = {
        "seed": seed, "nodes": list(plan.nodes), "quiescent": result.quiescent,
        "end_time": result.end_time, "events": result.events, "messages": result.messages,
        "simulator_violations": result.violations,
        "checks": {name: rep.to_json() for name, rep in reports.items()},
    }
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
    failed = result.violations or any(rep.violations for rep in reports.values())
    sys.exit(1 if failed else 0)


# -- check -------------------------------------------------------------------------------


@main.command()
@click.option("--trace", "trace_paths", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Trace file; repeat to merge per-node traces.")
@click.option("--correct", help="Comma-separated correct nodes (default: from the trace).")
def check(trace_paths, correct):
    """Check a trace; exit 0 when no property is violated."""
    from .trace import Trace

    traces = [Trace.load(p) for p in trace_paths]
    trace = traces[0] if len(traces) == 1 else Trace.merge(traces)
    correct_set = [c for c in correct.split(",") if c] if correct else None
    reports = check_all(trace, correct_set)
    ok = all(not rep.violations for rep in reports.values())
    click.echo(json.dumps({"ok": ok, "checks": {n: r.to_json() for n, r in reports.items()}},
                          indent=2, sort_keys=True))
    sys.exit(0 if ok else 1)


# -- node ------------------------------------------------------------------------------------


@main.group()
def node():
    """Cluster node process."""


@node.command("run")
@click.option("--id", "node_id", required=True)
@click.option("--listen", required=True, help="HOST:PORT to listen on.")
@click.option("--initial-config", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--backend", type=click.Choice(["paxos", "sequencer"]), default="paxos", show_default=True)
@click.option("--speculation", type=ONOFF, default="on", show_default=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), help="Write a checker-grade trace.")
@click.option("--cm", type=ONOFF, default="off", show_default=True, help="Run the configuration manager.")
@click.option("--batching", type=ONOFF, default="on", show_default=True)
def node_run(node_id, listen, initial_config, backend, speculation, trace_path, cm, batching):
    """Run one replica until it is shut down."""
    from .runtime.node import ClusterFile, ClusterFileError, Node, NodeOptions

    try:
        cluster = ClusterFile.load(initial_config)
        opts = NodeOptions(backend=backend, speculation=_onoff(speculation), trace_path=trace_path,
                           cm=_onoff(cm), batching=_onoff(batching))
        host, port = _addr(listen)
        server = Node(node_id, cluster, opts)
    except (ClusterFileError, OSError) as exc:
        raise click.ClickException(f"bad initial config: {exc}")

    async def run():
        await server.start(host, port)
        await server.stopped.wait()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass


# -- admin -----------------------------------------------------------------------------------


@main.group()
@click.option("--addr", required=True, help="HOST:PORT of the node to talk to.")
@click.pass_context
def admin(ctx, addr):
    """Talk to a running node."""
    ctx.obj = _addr(addr)


def _admin(addr, obj, wait_reply=False):
    from .runtime.node import admin_request
    try:
        replies = asyncio.run(admin_request(addr, obj, wait_reply=wait_reply))
    except (OSError, asyncio.TimeoutError) as exc:
        raise click.ClickException(f"cannot reach {addr[0]}:{addr[1]}: {exc}")
    for r in replies:
        click.echo(dumps(r))
    if not replies or not all(r.get("ok", False) for r in replies):
        sys.exit(1)


@admin.command("propose")
@click.argument("payload")
@click.option("--key", help="Client request key (default: generated).")
@click.pass_obj
def admin_propose(addr, payload, key):
    """Submit a command and wait until it is learned."""
    _admin(addr, {"op": "propose", "payload": payload, **({"key": key} if key else {})}, wait_reply=True)


@admin.command("recon")
@click.option("--members", required=True, help="Comma-separated member ids, leader first.")
@click.option("--id", "config_id", help="Configuration id (default: generated).")
@click.pass_obj
def admin_recon(addr, members, config_id):
    """Propose a new configuration against the node's current one."""
    obj = {"op": "recon", "members": [m for m in members.split(",") if m]}
    if config_id:
        obj["id"] = config_id
    _admin(addr, obj)


@admin.command("status")
@click.pass_obj
def admin_status(addr):
    """Print trunk length, current configuration and view."""
    _admin(addr, {"op": "status"})


@admin.command("shutdown")
@click.pass_obj
def admin_shutdown(addr):
    _admin(addr, {"op": "shutdown"})


# -- bench -------------------------------------------------------------------------------------


@main.group()
def bench():
    """Benchmarks; each writes CSV files with a header row into --out."""


def _cluster(members, standby, speculation, trace=True):
    from .bench import LocalCluster
    return LocalCluster(members, standby, speculation=_onoff(speculation), trace=trace)


@bench.command("baseline")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--threads", default="1,2,4,8,10,16", show_default=True)
@click.option("--duration", type=float, default=10.0, show_default=True, help="Measured seconds per point.")
@click.option("--warmup", type=float, default=5.0, show_default=True)
@click.option("--speculation", type=ONOFF, default="on", show_default=True)
def bench_baseline(out, threads, duration, warmup, speculation):
    """Throughput and latency against closed-loop generator count, no recons."""
    from .bench import LoadSpec, emit_csv, run_baseline

    counts = tuple(int(x) for x in threads.split(","))
    with _cluster(3, 0, speculation, trace=False) as cluster:
        results = run_baseline(LoadSpec(duration=duration, warmup=warmup), cluster, counts)
    for p in emit_csv(out, baseline=results):
        click.echo(p)


@bench.command("recon-sweep")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--rates", default="0,1,2,5,10,20", show_default=True, help="Recons per second.")
@click.option("--threads", type=int, default=10, show_default=True)
@click.option("--duration", type=float, default=10.0, show_default=True)
@click.option("--warmup", type=float, default=5.0, show_default=True)
@click.option("--speculation", type=ONOFF, default="on", show_default=True)
@click.option("--repeats", type=int, default=1, show_default=True, help="Runs per rate, averaged.")
def bench_recon_sweep(out, rates, threads, duration, warmup, speculation, repeats):
    """Throughput against reconfiguration rate; the merged trace must pass the checker."""
    from .bench import LoadSpec, emit_csv, run_recon_sweep

    rate_list = tuple(float(x) for x in rates.split(","))
    if 0.0 not in rate_list:
        rate_list = (0.0,) + rate_list
    results = run_recon_sweep(LoadSpec(threads=threads, duration=duration, warmup=warmup), rate_list,
                              lambda: _cluster(3, 1, speculation), repeats=repeats)
    for p in emit_csv(out, sweep=results):
        click.echo(p)
    bad = [r for r in results if r.extra.get("violations")]
    if bad:
        raise click.ClickException(
            "trace check failed, benchmark invalid: " + ", ".join(f"{r.label} in {r.extra['workdir']}" for r in bad))


@bench.command("latency")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--delay", type=float, default=100.0, show_default=True, help="Mean network delay (ms).")
@click.option("--delay-kind", type=click.Choice(["fixed", "uniform"]), default="fixed", show_default=True)
@click.option("--recons", type=int, default=1, show_default=True)
@click.option("--interval", type=float, default=4.0, show_default=True, help="Ms between client commands.")
def bench_latency(out, delay, delay_kind, recons, interval):
    """Per-command latency around a recon, speculation on and off (simulated)."""
    from .bench import emit_csv, run_latency_around_recon

    series = [run_latency_around_recon(delay, spec, delay_kind=delay_kind, recons=recons, interval_ms=interval)
              for spec in (True, False)]
    for p in emit_csv(out, latency=series):
        click.echo(p)


if __name__ == "__main__":
    main()
