"""Reliable FIFO links between nodes over TCP.

Each node dials every peer it sends to and keeps one outbound connection per
peer. Frames on a link are numbered implicitly: the n-th frame ever written
to a peer has sequence number n. The receiver counts the frames it has
processed from each peer and sends that count back as a cumulative ack on
the same socket. After a reconnect the dialer sends ``hello``, learns how
many frames the receiver already holds, and replays the rest, so the
receiver sees each frame exactly once and in order.

Frames still waiting to be written sit in ``pending``; written frames sit in
``unacked``. When ``pending`` grows past its bound, the oldest droppable
frames (State gossip, pings) are discarded. Join and back-end frames are
never dropped.
"""
from __future__ import annotations

import asyncio
import json
import logging
from collections import deque
from typing import Callable, Optional

from .. import codec
from .wire import TAG_ADMIN, TAG_STATE, FrameDecoder, encode_frame

log = logging.getLogger(__name__)

# on_frame(peer, tag, body)
FrameHandler = Callable[[str, int, bytes], None]


def admin_frame(obj) -> bytes:
    return encode_frame(TAG_ADMIN, codec.dumps(obj).encode())


class Link:
    """Outbound half of a link to one peer."""

    def __init__(self, transport: "Transport", peer: str, addr: tuple[str, int]):
        self.transport = transport
        self.peer = peer
        self.addr = addr
        self.pending: deque = deque()   # (frame, droppable)
        self.unacked: deque = deque()   # frames written, not yet acknowledged
        self.acked = 0                  # sequence number of unacked[0]
        self.writer: Optional[asyncio.StreamWriter] = None
        self.wake = asyncio.Event()
        self.task: Optional[asyncio.Task] = None
        self.dropped = 0
        self.reconnects = 0

    def enqueue(self, frame: bytes, droppable: bool) -> None:
        self.pending.append((frame, droppable))
        limit = self.transport.pending_limit
        if len(self.pending) > limit:
            self._shed(len(self.pending) - limit)
        self.wake.set()

    def _shed(self, excess: int) -> None:
        kept = deque()
        for frame, droppable in self.pending:
            if excess and droppable:
                excess -= 1
                self.dropped += 1
                continue
            kept.append((frame, droppable))
        self.pending = kept

    def on_ack(self, count: int) -> None:
        while self.acked < count and self.unacked:
            self.unacked.popleft()
            self.acked += 1

    async def run(self) -> None:
        backoff = self.transport.backoff_min
        while not self.transport.closed:
            try:
                reader, writer = await asyncio.open_connection(*self.addr)
            except OSError:
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, self.transport.backoff_max)
                continue
            backoff = self.transport.backoff_min
            try:
                await self._session(reader, writer)
            except (OSError, asyncio.IncompleteReadError, ConnectionError) as exc:
                log.debug("link %s -> %s lost: %s", self.transport.node_id, self.peer, exc)
            finally:
                self.writer = None
                writer.close()
            self.reconnects += 1

    async def _session(self, reader, writer) -> None:
        writer.write(admin_frame({"op": "hello", "from": self.transport.node_id}))
        await writer.drain()
        decoder = FrameDecoder()
        welcome = None
        while welcome is None:
            data = await reader.read(65536)
            if not data:
                raise ConnectionError("closed during hello")
            for tag, body in decoder.feed(data):
                welcome = json.loads(body)
        self.on_ack(welcome["received"])
        self.writer = writer
        if self.unacked:
            writer.write(b"".join(self.unacked))
        acks = asyncio.ensure_future(self._read_acks(reader, decoder))
        try:
            while not self.transport.closed:
                if acks.done():
                    acks.result()
                    raise ConnectionError("peer closed")
                if not self.pending:
                    self.wake.clear()
                    waiter = asyncio.ensure_future(self.wake.wait())
                    done, _ = await asyncio.wait({waiter, acks}, return_when=asyncio.FIRST_COMPLETED)
                    if waiter not in done:
                        waiter.cancel()
                    continue
                batch = []
                while self.pending:
                    frame, _ = self.pending.popleft()
                    self.unacked.append(frame)
                    batch.append(frame)
                writer.write(b"".join(batch))
                await writer.drain()
        finally:
            acks.cancel()

    async def _read_acks(self, reader, decoder) -> None:
        while True:
            data = await reader.read(65536)
            if not data:
                return
            for tag, body in decoder.feed(data):
                obj = json.loads(body)
                if obj.get("op") == "ack":
                    self.on_ack(obj["received"])

    def kill(self) -> None:
        if self.writer is not None:
            self.writer.transport.abort()


class Transport:
    """Per-node endpoint: outbound links to peers plus the listening server.

    Inbound connections that open with ``hello`` are peer links; any other
    first frame marks a client or admin session, handed to ``on_session``.
    """

    def __init__(self, node_id: str, peers: dict[str, tuple[str, int]], on_frame: FrameHandler,
                 *, on_session=None, pending_limit: int = 10000,
                 backoff_min: float = 0.05, backoff_max: float = 2.0):
        self.node_id = node_id
        self.peers = dict(peers)
        self.on_frame = on_frame
        self.on_session = on_session
        self.pending_limit = pending_limit
        self.backoff_min = backoff_min
        self.backoff_max = backoff_max
        self.links: dict[str, Link] = {}
        self.received: dict[str, int] = {}
        self.inbound: set = set()
        self.sessions: dict = {}  # peer -> writer of its current inbound link
        self.server: Optional[asyncio.AbstractServer] = None
        self.closed = False

    async def start(self, host: str, port: int) -> None:
        self.server = await asyncio.start_server(self._accept, host, port)

    @property
    def port(self) -> int:
        return self.server.sockets[0].getsockname()[1]

    def send(self, peer: str, tag: int, body: bytes) -> None:
        self.send_frame(peer, encode_frame(tag, body), droppable=tag == TAG_STATE)

    def send_frame(self, peer: str, frame: bytes, droppable: bool = False) -> None:
        link = self.links.get(peer)
        if link is None:
            addr = self.peers.get(peer)
            if addr is None:
                log.warning("%s: no address for %s, frame dropped", self.node_id, peer)
                return
            link = self.links[peer] = Link(self, peer, addr)
            link.task = asyncio.ensure_future(link.run())
        link.enqueue(frame, droppable)

    async def _accept(self, reader, writer) -> None:
        self.inbound.add(writer)
        decoder = FrameDecoder()
        peer = None
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                frames = decoder.feed(data)
                if not frames:
                    continue
                if peer is None:
                    tag, body = frames[0]
                    obj = json.loads(body) if tag == TAG_ADMIN else {}
                    if obj.get("op") != "hello":
                        if self.on_session is not None:
                            await self.on_session(reader, writer, decoder, frames)
                        return
                    peer = obj["from"]
                    stale = self.sessions.get(peer)
                    if stale is not None:
                        stale.transport.abort()
                    self.sessions[peer] = writer
                    writer.write(admin_frame({"op": "welcome", "received": self.received.get(peer, 0)}))
                    frames = frames[1:]
                if self.sessions.get(peer) is not writer:
                    break  # superseded by a newer connection from the same peer
                count = self.received.get(peer, 0)
                for tag, body in frames:
                    count += 1
                    self.received[peer] = count
                    self.on_frame(peer, tag, body)
                if frames:
                    writer.write(admin_frame({"op": "ack", "received": count}))
        except (OSError, ConnectionError, ValueError) as exc:
            log.debug("%s: inbound from %s closed: %s", self.node_id, peer, exc)
        finally:
            self.inbound.discard(writer)
            if peer is not None and self.sessions.get(peer) is writer:
                del self.sessions[peer]
            writer.close()

    def kill_connections(self) -> None:
        """Abort every open connection (used by chaos tests); links reconnect on their own."""
        for link in self.links.values():
            link.kill()
        for writer in list(self.inbound):
            writer.transport.abort()

    def stats(self) -> dict:
        return {peer: {"pending": len(l.pending), "unacked": len(l.unacked), "dropped": l.dropped,
                       "reconnects": l.reconnects} for peer, l in sorted(self.links.items())}

    async def close(self) -> None:
        self.closed = True
        for link in self.links.values():
            link.wake.set()
            if link.task:
                link.task.cancel()
            link.kill()
        for writer in list(self.inbound):
            writer.transport.abort()
        if self.server:
            self.server.close()
            await self.server.wait_closed()
