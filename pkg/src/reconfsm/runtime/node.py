"""One replica process: transport, replica core, Command Queue and Configuration Manager.

Everything runs on a single asyncio loop. Frames from peers are decoded and
fed to the replica as they arrive; the replica's outbox is flushed once per
loop turn. A periodic tick drives gossip, back-end timeouts, CQ retries and
the CM.

Cluster file format, one node per line (``#`` starts a comment)::

    config C0
    member n1 127.0.0.1:7001
    member n2 127.0.0.1:7002
    standby n4 127.0.0.1:7004

A bare ``n1 127.0.0.1:7001`` line is a member.
"""
from __future__ import annotations

import asyncio
import base64
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

from .. import codec, paxos
from ..core import Configuration, ConsistencyError
from ..nrsm import sequencer_oracle
from ..rrsm import Replica, StateMsg
from ..trace import Record, Trace
from .cm import CmPolicy, ConfigurationManager
from .cq import CommandQueue
from .transport import Transport, admin_frame
from .wire import (
    TAG_ADMIN, TAG_BACKEND, TAG_CLIENT_REPLY, TAG_CLIENT_REQUEST, TAG_JOIN, TAG_STATE,
    FrameDecoder, decode_message, encode_frame, encode_json, encode_message,
)

log = logging.getLogger(__name__)


class ClusterFileError(ValueError):
    pass


@dataclass
class ClusterFile:
    config_id: str
    members: list
    addresses: dict = field(default_factory=dict)
    standby: list = field(default_factory=list)

    @property
    def c0(self) -> Configuration:
        return Configuration(self.config_id, tuple(self.members))

    @property
    def nodes(self) -> list:
        return self.members + self.standby

    @classmethod
    def parse(cls, text: str) -> "ClusterFile":
        config_id, members, standby, addresses = "C0", [], [], {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "config" and len(parts) == 2:
                config_id = parts[1]
                continue
            role = "member"
            if parts[0] in ("member", "standby"):
                role, parts = parts[0], parts[1:]
            if len(parts) != 2:
                raise ClusterFileError(f"line {lineno}: expected '[member|standby] ID HOST:PORT', got {raw!r}")
            node, addr = parts
            host, sep, port = addr.rpartition(":")
            if not sep or not port.isdigit():
                raise ClusterFileError(f"line {lineno}: bad address {addr!r}")
            if node in addresses:
                raise ClusterFileError(f"line {lineno}: node {node} listed twice")
            addresses[node] = (host or "127.0.0.1", int(port))
            (members if role == "member" else standby).append(node)
        if not members:
            raise ClusterFileError("no members")
        return cls(config_id, members, addresses, standby)

    @classmethod
    def load(cls, path) -> "ClusterFile":
        with open(path) as fh:
            return cls.parse(fh.read())

    def dumps(self) -> str:
        lines = [f"config {self.config_id}"]
        for n in self.members:
            lines.append(f"member {n} {self.addresses[n][0]}:{self.addresses[n][1]}")
        for n in self.standby:
            lines.append(f"standby {n} {self.addresses[n][0]}:{self.addresses[n][1]}")
        return "\n".join(lines) + "\n"


def _env_ms(name: str, default: float) -> float:
    value = os.environ.get(name)
    return float(value) if value else default


@dataclass
class NodeOptions:
    backend: str = "paxos"
    speculation: bool = True
    batching: bool = True
    trace_path: Optional[str] = None
    cm: bool = False
    tick_ms: float = field(default_factory=lambda: _env_ms("RECONFSM_TICK_MS", 5.0))
    gossip_ms: float = field(default_factory=lambda: _env_ms("RECONFSM_GOSSIP_MS", 500.0))
    paxos_timeout_ms: float = field(default_factory=lambda: _env_ms("RECONFSM_PAXOS_TIMEOUT_MS", 1000.0))
    cq_timeout_ms: float = field(default_factory=lambda: _env_ms("RECONFSM_CQ_TIMEOUT_MS", 3000.0))
    suspicion_ms: float = field(default_factory=lambda: _env_ms("RECONFSM_SUSPICION_MS", 2000.0))
    ping_ms: float = 250.0


def now_ms() -> float:
    return time.time() * 1000.0


class Node:
    def __init__(self, node_id: str, cluster: ClusterFile, options: Optional[NodeOptions] = None):
        if node_id not in cluster.addresses:
            raise ClusterFileError(f"{node_id} is not listed in the cluster file")
        self.id = node_id
        self.cluster = cluster
        self.opts = options or NodeOptions()
        opts = self.opts
        if opts.backend == "paxos":
            factory = paxos.paxos_factory(timeout=opts.paxos_timeout_ms, batching=opts.batching)
        elif opts.backend == "sequencer":
            factory = sequencer_oracle
        else:
            raise ValueError(f"unknown backend {opts.backend!r}")
        self.trace: Optional[Trace] = None
        self._trace_fh = None
        self._trace_seq = 0
        hook = None
        if opts.trace_path:
            self.trace = Trace(cluster.c0, tuple(cluster.nodes), speculation=opts.speculation)
            self._trace_fh = open(opts.trace_path, "w")
            self._trace_fh.write(next(iter(self.trace.lines())) + "\n")
            hook = self._record
        self.replica = Replica(node_id, cluster.c0, factory, speculation=opts.speculation,
                               gossip_period=opts.gossip_ms, clock=now_ms, hook=hook)
        self.cq = CommandQueue(self.replica, timeout=opts.cq_timeout_ms, reply=self._reply)
        self.cm: Optional[ConfigurationManager] = None
        if opts.cm:
            policy = CmPolicy(suspicion_timeout=opts.suspicion_ms, target_size=len(cluster.members),
                              pool=tuple(cluster.nodes))
            self.cm = ConfigurationManager(self.replica, policy, clock=now_ms)
        peers = {n: a for n, a in cluster.addresses.items() if n != node_id}
        self.transport = Transport(node_id, peers, self._on_frame, on_session=self._session)
        self.clients: dict[str, asyncio.StreamWriter] = {}
        self.failed: Optional[str] = None
        self._lines: list[bytes] = []
        self._flush_scheduled = False
        self._tasks: list = []
        self._admin_counter = 0
        self.stopped = asyncio.Event()

    # -- lifecycle -------------------------------------------------------------

    async def start(self, host: Optional[str] = None, port: Optional[int] = None) -> None:
        h, p = self.cluster.addresses[self.id]
        await self.transport.start(host or h, p if port is None else port)
        self._tasks.append(asyncio.ensure_future(self._ticker()))
        self._tasks.append(asyncio.ensure_future(self._pinger()))
        self._flush()
        log.info("%s listening on %s:%s", self.id, host or h, self.transport.port)

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await self.transport.close()
        if self._trace_fh:
            self._trace_fh.flush()
            self._trace_fh.close()
            self._trace_fh = None
        self.stopped.set()

    async def serve_forever(self) -> None:
        await self.start()
        await self.stopped.wait()

    # -- trace -------------------------------------------------------------------

    def _record(self, direction, kind, config, value) -> None:
        rec = Record(now_ms(), self.id, self._trace_seq, direction, kind, config, value)
        self._trace_seq += 1
        if self._trace_fh:
            self._trace_fh.write(codec.dumps(rec.to_json()) + "\n")

    # -- core plumbing -------------------------------------------------------------

    def _on_frame(self, peer: str, tag: int, body: bytes) -> None:
        if self.cm is not None:
            self.cm.heard(peer)
        if tag == TAG_ADMIN:
            return  # ping
        if self.failed:
            return
        try:
            skip = max(0, len(self.replica.trunk) - 1) if tag == TAG_STATE else 0
            msg = decode_message(tag, body, skip)
            self.replica.on_message(peer, msg)
        except ConsistencyError as exc:
            self.failed = str(exc)
            log.critical("%s: consistency violation: %s", self.id, exc)
            return
        self._schedule_flush()

    def _schedule_flush(self) -> None:
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_event_loop().call_soon(self._flush)

    def _flush(self) -> None:
        self._flush_scheduled = False
        r = self.replica
        if not r.outbox:
            return
        out, r.outbox = r.outbox, []
        state_cache = {}
        for to, msg in out:
            if type(msg) is StateMsg:
                frame = state_cache.get(id(msg))
                if frame is None:
                    frame = state_cache[id(msg)] = encode_frame(TAG_STATE, self._encode_state(msg))
                self.transport.send_frame(to, frame, droppable=True)
            else:
                tag, body = encode_message(msg)
                self.transport.send(to, tag, body)

    def _encode_state(self, msg: StateMsg) -> bytes:
        lines, trunk = self._lines, self.replica.trunk
        if len(lines) < msg.length:
            lines.extend(codec.encode_entry(e) for e in trunk[len(lines):msg.length])
        return codec.encode_state(msg.length, msg.view, lines[msg.base:msg.length])

    async def _ticker(self) -> None:
        period = self.opts.tick_ms / 1000.0
        while True:
            await asyncio.sleep(period)
            if self.failed:
                continue
            now = now_ms()
            try:
                self.replica.tick(now)
                self.cq.tick(now)
                if self.cm is not None:
                    self.cm.tick(now)
            except ConsistencyError as exc:
                self.failed = str(exc)
                log.critical("%s: consistency violation: %s", self.id, exc)
            self._flush()
            if self._trace_fh:
                self._trace_fh.flush()

    async def _pinger(self) -> None:
        frame = admin_frame({"op": "ping"})
        while True:
            await asyncio.sleep(self.opts.ping_ms / 1000.0)
            if self.cm is None:
                continue
            for peer in self.cluster.nodes:
                if peer != self.id:
                    self.transport.send_frame(peer, frame, droppable=True)

    # -- clients and admin -------------------------------------------------------------

    def _reply(self, key: str, ok: bool, info: str) -> None:
        writer = self.clients.pop(key, None)
        if writer is not None and not writer.is_closing():
            writer.write(encode_json(TAG_CLIENT_REPLY, {"key": key, "ok": ok, "info": info}))

    async def _session(self, reader, writer, decoder: FrameDecoder, frames) -> None:
        try:
            while True:
                for tag, body in frames:
                    self._handle_session_frame(writer, tag, body)
                self._flush()
                data = await reader.read(65536)
                if not data:
                    return
                frames = decoder.feed(data)
        finally:
            for key in [k for k, w in self.clients.items() if w is writer]:
                del self.clients[key]

    def _handle_session_frame(self, writer, tag: int, body: bytes) -> None:
        obj = json.loads(body)
        if tag == TAG_CLIENT_REQUEST:
            self._submit(writer, obj["key"], base64.b64decode(obj.get("payload", "")))
        elif tag == TAG_ADMIN:
            writer.write(encode_json(TAG_ADMIN, self.admin(obj, writer)))
        else:
            writer.write(encode_json(TAG_ADMIN, {"ok": False, "error": f"unexpected tag {tag}"}))

    def _submit(self, writer, key: str, payload: bytes) -> None:
        if self.failed:
            writer.write(encode_json(TAG_CLIENT_REPLY, {"key": key, "ok": False, "info": "node failed"}))
            return
        if key in self.cq.pending:
            self.clients[key] = writer
            return
        self.clients[key] = writer
        self.cq.submit(key, payload)

    def admin(self, obj: dict, writer=None) -> dict:
        op = obj.get("op")
        if op == "status":
            report = self.replica.status_report()
            report.update(ok=True, failed=self.failed, cq=dict(self.cq.metrics),
                          pending_requests=len(self.cq.pending), transport=self.transport.stats())
            if self.cm is not None:
                report["cm"] = dict(self.cm.metrics)
            return report
        if op == "propose":
            self._admin_counter += 1
            key = obj.get("key") or f"admin-{self.id}-{self._admin_counter}"
            payload = obj.get("payload", "").encode()
            if writer is not None:
                self._submit(writer, key, payload)
            else:
                self.cq.submit(key, payload)
            return {"ok": True, "key": key, "submitted": True}
        if op == "recon":
            members = tuple(obj["members"])
            unknown = [m for m in members if m not in self.cluster.addresses]
            if unknown:
                return {"ok": False, "error": f"unknown nodes {unknown}"}
            self._admin_counter += 1
            cid = obj.get("id") or f"{self.id}:admin{self._admin_counter}"
            parent = obj.get("parent") or self.replica.cur_conf.id
            try:
                new = Configuration(cid, members)
            except ValueError as exc:
                return {"ok": False, "error": str(exc)}
            accepted = self.replica.recon(parent, new)
            self._flush()
            return {"ok": accepted, "id": cid, "parent": parent,
                    **({} if accepted else {"error": "dropped: parent unknown here or already superseded"})}
        if op == "shutdown":
            asyncio.get_event_loop().call_soon(lambda: asyncio.ensure_future(self.stop()))
            return {"ok": True}
        return {"ok": False, "error": f"unknown op {op!r}"}


# -- client side -----------------------------------------------------------------------


async def admin_request(addr: tuple[str, int], obj: dict, *, wait_reply: bool = False,
                        timeout: float = 10.0) -> list[dict]:
    """Send one admin request; with ``wait_reply`` also wait for the client reply it triggers."""
    reader, writer = await asyncio.wait_for(asyncio.open_connection(*addr), timeout)
    try:
        writer.write(encode_json(TAG_ADMIN, obj))
        await writer.drain()
        decoder = FrameDecoder()
        replies = []
        want = 2 if wait_reply else 1
        while len(replies) < want:
            data = await asyncio.wait_for(reader.read(65536), timeout)
            if not data:
                break
            for tag, body in decoder.feed(data):
                replies.append(json.loads(body))
            if replies and not replies[0].get("ok", True):
                break
        return replies
    finally:
        writer.close()


class Client:
    """A client session: submit requests, await their replies."""

    def __init__(self, addr: tuple[str, int]):
        self.addr = addr
        self.reader = self.writer = None
        self.waiting: dict[str, asyncio.Future] = {}
        self._task = None

    async def connect(self) -> "Client":
        self.reader, self.writer = await asyncio.open_connection(*self.addr)
        self._task = asyncio.ensure_future(self._read())
        return self

    async def _read(self) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                data = await self.reader.read(65536)
                if not data:
                    break
                for tag, body in decoder.feed(data):
                    obj = json.loads(body)
                    fut = self.waiting.pop(obj.get("key"), None)
                    if fut is not None and not fut.done():
                        fut.set_result(obj)
        finally:
            for fut in self.waiting.values():
                if not fut.done():
                    fut.set_exception(ConnectionError("session closed"))
            self.waiting.clear()

    def submit_nowait(self, key: str, payload: bytes = b"") -> asyncio.Future:
        fut = asyncio.get_event_loop().create_future()
        self.waiting[key] = fut
        body = {"key": key, "payload": base64.b64encode(payload).decode("ascii")}
        self.writer.write(encode_json(TAG_CLIENT_REQUEST, body))
        return fut

    async def submit(self, key: str, payload: bytes = b"") -> dict:
        return await self.submit_nowait(key, payload)

    async def close(self) -> None:
        if self._task:
            self._task.cancel()
        if self.writer:
            self.writer.close()
