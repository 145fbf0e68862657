"""Benchmarks: throughput and latency under load, under reconfiguration, and around a recon.

Throughput experiments run a real cluster of node processes on loopback and
drive it from this process with closed-loop (synchronous) generators. The
latency-around-recon experiment runs in the simulator, where network delay
is a parameter rather than an accident of the host.
"""
from __future__ import annotations

import asyncio
import bisect
import csv
import os
import socket
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .checker import check_safety, check_well_formedness
from .core import Configuration
from .runtime.node import Client, ClusterFile, admin_request
from .simnet import FaultPlan, Simulation
from .trace import Trace


@dataclass
class LoadSpec:
    mode: str = "sync"          # "sync": generators wait for each reply; "async": fixed rate
    threads: int = 10
    rate: float = 0.0           # requests per second in async mode
    duration: float = 10.0      # measured seconds
    warmup: float = 5.0         # seconds excluded from measurement
    payload_size: int = 16


@dataclass
class BenchResult:
    label: str
    throughput: float = 0.0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    completed: int = 0
    degradation: Optional[float] = None
    extra: dict = field(default_factory=dict)


def percentile(values, q: float) -> float:
    if not values:
        return 0.0
    values = sorted(values)
    k = min(len(values) - 1, max(0, int(round(q / 100.0 * (len(values) - 1)))))
    return values[k]


def summarize(label: str, latencies_ms: list, window_s: float, **extra) -> BenchResult:
    if window_s <= 0 or not latencies_ms:
        return BenchResult(label, extra=extra)
    return BenchResult(label, len(latencies_ms) / window_s, percentile(latencies_ms, 50),
                       percentile(latencies_ms, 95), percentile(latencies_ms, 99),
                       len(latencies_ms), extra=extra)


def degradation(with_recon: float, baseline: float) -> float:
    """Fraction of baseline throughput lost (0 when there is no baseline)."""
    if baseline <= 0:
        return 0.0
    return 1.0 - with_recon / baseline


# -- local cluster ------------------------------------------------------------------


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LocalCluster:
    """Node processes on loopback, each writing a trace file into ``workdir``."""

    def __init__(self, members: int = 3, standby: int = 1, *, workdir: Optional[str] = None,
                 backend: str = "paxos", speculation: bool = True, trace: bool = True,
                 env: Optional[dict] = None):
        self.workdir = Path(workdir or tempfile.mkdtemp(prefix="reconfsm-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        names = [f"n{i}" for i in range(1, members + standby + 1)]
        addresses = {n: ("127.0.0.1", _free_port()) for n in names}
        self.cluster = ClusterFile("C0", names[:members], addresses, names[members:])
        self.config_path = self.workdir / "cluster.conf"
        self.config_path.write_text(self.cluster.dumps())
        self.backend = backend
        self.speculation = speculation
        self.trace = trace
        self.env = dict(os.environ, **(env or {}))
        self.procs: dict[str, subprocess.Popen] = {}

    def addr(self, node: str) -> tuple:
        return self.cluster.addresses[node]

    def trace_path(self, node: str) -> Path:
        return self.workdir / f"{node}.trace"

    def start(self) -> "LocalCluster":
        for node in self.cluster.nodes:
            host, port = self.addr(node)
            cmd = [sys.executable, "-m", "reconfsm.cli", "node", "run", "--id", node,
                   "--listen", f"{host}:{port}", "--initial-config", str(self.config_path),
                   "--backend", self.backend, "--speculation", "on" if self.speculation else "off"]
            if self.trace:
                cmd += ["--trace", str(self.trace_path(node))]
            log = open(self.workdir / f"{node}.log", "w")
            self.procs[node] = subprocess.Popen(cmd, stdout=log, stderr=subprocess.STDOUT, env=self.env)
        asyncio.run(self._wait_up())
        return self

    async def _wait_up(self, timeout: float = 20.0) -> None:
        deadline = time.monotonic() + timeout
        for node in self.cluster.nodes:
            while True:
                try:
                    await admin_request(self.addr(node), {"op": "status"}, timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise RuntimeError(f"node {node} did not come up; see {self.workdir}/{node}.log")
                    await asyncio.sleep(0.05)

    def stop(self) -> None:
        async def shutdown():
            for node in self.cluster.nodes:
                try:
                    await admin_request(self.addr(node), {"op": "shutdown"}, timeout=2.0)
                except (OSError, asyncio.TimeoutError):
                    pass
        asyncio.run(shutdown())
        for proc in self.procs.values():
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self.procs.clear()

    def merged_trace(self) -> Trace:
        return Trace.merge([Trace.load(self.trace_path(n)) for n in self.cluster.nodes])

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def validate_trace(trace: Trace) -> list:
    """Safety and well-formedness violations in a benchmark run (empty means valid)."""
    return check_well_formedness(trace).violations + check_safety(trace).violations


# -- load generation --------------------------------------------------------------------


async def _generate(addrs: list, load: LoadSpec, recon=None, label: str = "") -> tuple[list, float]:
    """Run closed-loop generators; return latencies (ms) completed inside the window."""
    clients = [await Client(addrs[i % len(addrs)]).connect() for i in range(load.threads)]
    start = time.monotonic()
    t0, t1 = start + load.warmup, start + load.warmup + load.duration
    buffers = [[] for _ in clients]
    payload = b"x" * load.payload_size

    async def sync_worker(i, client):
        n = 0
        while time.monotonic() < t1:
            n += 1
            sent = time.monotonic()
            reply = await client.submit(f"{label}g{i}-{n}", payload)
            done = time.monotonic()
            if reply.get("ok") and t0 <= done < t1:
                buffers[i].append((done - sent) * 1000.0)

    async def async_worker(i, client):
        period = load.threads / load.rate
        n = 0
        pending = []
        next_at = time.monotonic()
        while next_at < t1:
            await asyncio.sleep(max(0.0, next_at - time.monotonic()))
            n += 1
            sent = time.monotonic()
            fut = client.submit_nowait(f"{label}a{i}-{n}", payload)
            fut.add_done_callback(lambda f, s=sent: _record_async(f, s, buffers[i], t0, t1))
            pending.append(fut)
            next_at += period
        await asyncio.wait(pending, timeout=10.0)

    worker = sync_worker if load.mode == "sync" else async_worker
    tasks = [asyncio.ensure_future(worker(i, c)) for i, c in enumerate(clients)]
    if recon is not None:
        tasks.append(asyncio.ensure_future(recon(t0, t1)))
    await asyncio.gather(*tasks)
    for c in clients:
        await c.close()
    return [x for b in buffers for x in b], load.duration


def _record_async(fut, sent, buf, t0, t1):
    if fut.cancelled() or fut.exception() is not None:
        return
    done = time.monotonic()
    if fut.result().get("ok") and t0 <= done < t1:
        buf.append((done - sent) * 1000.0)


def run_baseline(load: LoadSpec, cluster: LocalCluster, threads: tuple = (1, 2, 4, 8, 10, 16)) -> list[BenchResult]:
    """Closed-loop sweep over generator counts; the knee is marked in ``extra``."""
    leader = [cluster.addr(cluster.cluster.members[0])]
    results = []
    for k in threads:
        spec = LoadSpec("sync", k, 0.0, load.duration, load.warmup, load.payload_size)
        if spec.duration <= 0:
            results.append(BenchResult(f"threads={k}", extra={"threads": k}))
            continue
        lat, window = asyncio.run(_generate(leader, spec, label=f"b{k}-"))
        results.append(summarize(f"threads={k}", lat, window, threads=k))
    mark_knee(results)
    return results


def mark_knee(results: list[BenchResult], gain: float = 0.05) -> Optional[BenchResult]:
    """Last point whose throughput still beat the previous one by ``gain``."""
    knee = None
    for prev, cur in zip([None] + results[:-1], results):
        cur.extra["knee"] = False
        if prev is None or cur.throughput > prev.throughput * (1 + gain):
            knee = cur
    if knee is not None:
        knee.extra["knee"] = True
    return knee


def rotation(cluster: ClusterFile):
    """Recon member sets: the leader stays first, one slot rotates through the standby pool."""
    fixed = cluster.members[:-1]
    pool = [cluster.members[-1]] + list(cluster.standby)
    i = 0
    while True:
        i += 1
        yield tuple(fixed) + (pool[i % len(pool)],)


def _recon_run(cluster: LocalCluster, load: LoadSpec, rate: float, label: str) -> BenchResult:
    leader_node = cluster.cluster.members[0]
    members = rotation(cluster.cluster)
    issued = []

    async def recon(t0, t1):
        period = 1.0 / rate
        next_at = time.monotonic() + 0.5
        n = 0
        while next_at < t1:
            await asyncio.sleep(max(0.0, next_at - time.monotonic()))
            n += 1
            reply = await admin_request(cluster.addr(leader_node),
                                        {"op": "recon", "members": list(next(members)), "id": f"R{n}"})
            if next_at >= t0:
                issued.append(bool(reply and reply[0].get("ok")))
            next_at += period

    lat, window = asyncio.run(_generate([cluster.addr(leader_node)], load,
                                        recon if rate > 0 else None, label=label))
    return summarize(f"rate={rate}", lat, window, rate=rate, recons=len(issued), recons_accepted=sum(issued))


def run_recon_sweep(load: LoadSpec, rates: tuple, make_cluster: Callable[[], LocalCluster], *,
                    baseline: Optional[float] = None, repeats: int = 1, check: bool = True) -> list[BenchResult]:
    """Throughput under scripted recons at each rate (per second), issued at the leader.

    Every measurement gets a fresh cluster so the trunk (and with it the cost
    of gossip) starts empty each time. Repeats are interleaved across rates
    and averaged. With ``check`` each run's merged trace goes through the
    safety checks; the violation count lands in ``extra``.
    """
    runs: dict = {rate: [] for rate in rates}
    for rep in range(repeats):
        for rate in rates:
            cluster = make_cluster().start()
            try:
                res = _recon_run(cluster, load, rate, label=f"r{rate}-{rep}-")
            finally:
                cluster.stop()
            res.extra["violations"] = len(validate_trace(cluster.merged_trace())) if check else None
            res.extra["workdir"] = str(cluster.workdir)
            runs[rate].append(res)
    results = []
    for rate in rates:
        group = runs[rate]
        res = group[0]
        res.extra["samples"] = [round(r.throughput, 1) for r in group]
        if len(group) > 1:
            res.throughput = statistics.fmean(r.throughput for r in group)
            res.completed = sum(r.completed for r in group)
            res.extra["recons"] = sum(r.extra["recons"] for r in group)
            res.extra["recons_accepted"] = sum(r.extra["recons_accepted"] for r in group)
            checked = [r.extra["violations"] for r in group if r.extra["violations"] is not None]
            res.extra["violations"] = sum(checked) if checked else None
        results.append(res)
    base = baseline if baseline is not None else next((r.throughput for r in results if r.extra["rate"] == 0), 0.0)
    for r in results:
        r.degradation = 0.0 if r.extra["rate"] == 0 else degradation(r.throughput, base)
        r.extra["baseline"] = base
    return results


# -- latency around a recon (simulated) ----------------------------------------------------


@dataclass
class LatencySeries:
    speculation: bool
    offsets: list          # command index relative to the first command submitted after the recon
    latencies: list        # mean latency (ms) per offset across recons
    steady: float          # mean latency of commands far from any recon
    recons: int = 1


def run_latency_around_recon(delay_ms: float = 100.0, speculation: bool = True, *,
                             delay_kind: str = "fixed", interval_ms: float = 4.0, before: int = 20,
                             after: int = 150, recons: int = 1, spacing_ms: float = 3000.0,
                             seed: int = 0) -> LatencySeries:
    """Open-loop client at a non-leader member; the same node issues each recon.

    Commands are submitted every ``interval_ms``. The leader stays the first
    member of every configuration; each recon rotates the third member.
    """
    if delay_kind == "fixed":
        delay = ("fixed", float(delay_ms))
    else:
        delay = ("uniform", delay_ms / 2.0, delay_ms * 1.5)
    nodes = ("n1", "n2", "n3", "n4")
    c0 = Configuration("C0", ("n1", "n2", "n3"))
    plan = FaultPlan(nodes, c0, seed, delay, [])
    hop = max(delay_ms, 1.0)
    sim = Simulation(plan, speculation=speculation, paxos_timeout=40 * hop, cq_timeout=40 * hop,
                     gossip_period=max(10.0, hop / 10.0))
    client = "n2"
    submitted: dict = {}
    done: dict = {}
    sim.reply_listeners.append(lambda key, node, ok, info: done.setdefault(key, sim.now))
    warm = spacing_ms
    recon_times = [warm + i * spacing_ms for i in range(recons)]
    end = recon_times[-1] + spacing_ms
    third = ["n4", "n3"]

    def do_recon(i):
        def act(s):
            r = s.replicas[client]
            r.recon(r.cur_conf.id, Configuration(f"R{i + 1}", ("n1", "n2", third[i % 2])))
            s._flush(client)
        return act

    for i, t in enumerate(recon_times):
        sim.call_at(t, do_recon(i))
    n = 0
    t = 0.0
    keys = []
    while t < end:
        key = f"k{n}"

        def submit(s, key=key):
            submitted[key] = s.now
            s.queues[client].submit(key, b"")
            s._flush(client)
        sim.call_at(t, submit)
        keys.append((t, key))
        n += 1
        t = n * interval_ms
    sim.run(time_bound=end + 100 * hop)

    def latency(key):
        return done[key] - submitted[key] if key in done else float("nan")

    per_offset = {o: [] for o in range(-before, after)}
    steady = []
    times = [k[0] for k in keys]
    for rt in recon_times:
        first = bisect.bisect_left(times, rt)
        for o in range(-before, after):
            idx = first + o
            if 0 <= idx < len(keys):
                per_offset[o].append(latency(keys[idx][1]))
    for (t, key) in keys:
        if all(not (rt - before * interval_ms <= t < rt + spacing_ms / 2) for rt in recon_times) and t >= hop * 10:
            steady.append(latency(key))
    offsets = sorted(per_offset)
    means = [statistics.fmean(per_offset[o]) if per_offset[o] else float("nan") for o in offsets]
    return LatencySeries(speculation, offsets, means, statistics.fmean(steady) if steady else float("nan"), recons)


# -- CSV output ----------------------------------------------------------------------------

BASELINE_COLUMNS = ["threads", "throughput_rps", "p50_ms", "p95_ms", "p99_ms", "completed", "knee"]
SWEEP_COLUMNS = ["recon_rate_per_s", "throughput_rps", "degradation_pct", "baseline_rps",
                 "p50_ms", "p99_ms", "recons_issued", "recons_accepted"]
LATENCY_COLUMNS = ["speculation", "offset", "latency_ms", "steady_ms", "ratio"]


def _write(path: Path, columns: list, rows: list) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)
    return path


def emit_csv(out_dir, *, baseline: Optional[list] = None, sweep: Optional[list] = None,
             latency: Optional[list] = None) -> list[Path]:
    """One CSV per experiment that was given (an empty list yields a header-only file)."""
    out = Path(out_dir)
    written = []
    if baseline is not None:
        rows = [[r.extra.get("threads"), f"{r.throughput:.1f}", f"{r.p50:.3f}", f"{r.p95:.3f}",
                 f"{r.p99:.3f}", r.completed, int(bool(r.extra.get("knee")))] for r in baseline]
        written.append(_write(out / "baseline.csv", BASELINE_COLUMNS, rows))
    if sweep is not None:
        rows = [[r.extra.get("rate"), f"{r.throughput:.1f}", f"{100 * (r.degradation or 0.0):.2f}",
                 f"{r.extra.get('baseline', 0.0):.1f}", f"{r.p50:.3f}", f"{r.p99:.3f}",
                 r.extra.get("recons", 0), r.extra.get("recons_accepted", 0)] for r in sweep]
        written.append(_write(out / "recon_sweep.csv", SWEEP_COLUMNS, rows))
    if latency is not None:
        rows = []
        for s in latency:
            for o, lat in zip(s.offsets, s.latencies):
                rows.append(["on" if s.speculation else "off", o, f"{lat:.3f}", f"{s.steady:.3f}",
                             f"{lat / s.steady:.4f}" if s.steady else ""])
        written.append(_write(out / "latency_around_recon.csv", LATENCY_COLUMNS, rows))
    return written
