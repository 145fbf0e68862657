"""Canonical serialization shared by trace files and the TCP wire format.

Everything is compact JSON with sorted keys. Entries are short arrays:
``["c", id, base64-payload]`` for a command and ``["f", id, [members...]]`` for
a configuration. ``null`` stands for a Paxos no-op filler.

State messages are the one exception: the body is a JSON header line followed
by one line per trunk entry, so a receiver can skip the prefix it already
holds without decoding it.
"""
from __future__ import annotations

import base64
import json
from typing import Optional

from .core import Command, Configuration, Entry
from .nrsm import SeqForward, SeqOrder
from .paxos import Accept, Accepted, Ballot, Decided, Forward, Nack, Prepare, Promise
from .rrsm import JoinMsg, StateMsg


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def entry_to_json(entry: Optional[Entry]):
    if entry is None:
        return None
    if type(entry) is Command:
        return ["c", entry.id, base64.b64encode(entry.payload).decode("ascii")]
    return ["f", entry.id, list(entry.members)]


def entry_from_json(obj) -> Optional[Entry]:
    if obj is None:
        return None
    tag, ident, rest = obj
    if tag == "c":
        return Command(ident, base64.b64decode(rest))
    if tag == "f":
        return Configuration(ident, tuple(rest))
    raise ValueError(f"unknown entry tag {tag!r}")


def encode_entry(entry: Entry) -> bytes:
    return dumps(entry_to_json(entry)).encode()


def decode_entry(data: bytes) -> Entry:
    return entry_from_json(json.loads(data))


def encode_seq(entries) -> bytes:
    return dumps([entry_to_json(e) for e in entries]).encode()


def decode_seq(data: bytes) -> list[Entry]:
    return [entry_from_json(o) for o in json.loads(data)]


def _items(items):
    return [[s, entry_to_json(v)] for s, v in items]


def _unitems(items):
    return tuple((s, entry_from_json(v)) for s, v in items)


def _ballot(b):
    return [b.round, b.proposer]


def backend_to_json(msg) -> dict:
    kind = type(msg)
    if kind is Accept:
        return {"type": "accept", "config": msg.config, "ballot": _ballot(msg.ballot), "items": _items(msg.items)}
    if kind is Accepted:
        return {"type": "accepted", "config": msg.config, "ballot": _ballot(msg.ballot), "slots": list(msg.slots)}
    if kind is Decided:
        return {"type": "decided", "config": msg.config, "items": _items(msg.items)}
    if kind is Forward:
        return {"type": "forward", "config": msg.config, "entry": entry_to_json(msg.entry)}
    if kind is Prepare:
        return {"type": "prepare", "config": msg.config, "ballot": _ballot(msg.ballot), "from": msg.from_slot}
    if kind is Promise:
        return {
            "type": "promise", "config": msg.config, "ballot": _ballot(msg.ballot),
            "accepted": [[s, _ballot(b), entry_to_json(v)] for s, b, v in msg.accepted],
            "decided": _items(msg.decided), "first": msg.first_undecided,
        }
    if kind is Nack:
        return {"type": "nack", "config": msg.config, "ballot": _ballot(msg.ballot)}
    if kind is SeqForward:
        return {"type": "seq_forward", "config": msg.config, "entry": entry_to_json(msg.entry)}
    if kind is SeqOrder:
        return {"type": "seq_order", "config": msg.config, "slot": msg.slot, "entry": entry_to_json(msg.entry)}
    raise TypeError(f"not a back-end message: {msg!r}")


def backend_from_json(obj: dict):
    kind, cid = obj["type"], obj["config"]
    if kind == "accept":
        return Accept(cid, Ballot(*obj["ballot"]), _unitems(obj["items"]))
    if kind == "accepted":
        return Accepted(cid, Ballot(*obj["ballot"]), tuple(obj["slots"]))
    if kind == "decided":
        return Decided(cid, _unitems(obj["items"]))
    if kind == "forward":
        return Forward(cid, entry_from_json(obj["entry"]))
    if kind == "prepare":
        return Prepare(cid, Ballot(*obj["ballot"]), obj["from"])
    if kind == "promise":
        accepted = tuple((s, Ballot(*b), entry_from_json(v)) for s, b, v in obj["accepted"])
        return Promise(cid, Ballot(*obj["ballot"]), accepted, _unitems(obj["decided"]), obj["first"])
    if kind == "nack":
        return Nack(cid, Ballot(*obj["ballot"]))
    if kind == "seq_forward":
        return SeqForward(cid, entry_from_json(obj["entry"]))
    if kind == "seq_order":
        return SeqOrder(cid, obj["slot"], entry_from_json(obj["entry"]))
    raise ValueError(f"unknown back-end message {kind!r}")


def encode_join(msg: JoinMsg) -> bytes:
    return dumps({"parent": entry_to_json(msg.parent), "new": entry_to_json(msg.new)}).encode()


def decode_join(data: bytes) -> JoinMsg:
    obj = json.loads(data)
    return JoinMsg(entry_from_json(obj["parent"]), entry_from_json(obj["new"]))


def encode_state(length: int, view, entry_lines) -> bytes:
    """``entry_lines`` are pre-encoded entries (see :func:`encode_entry`)."""
    header = dumps({"length": length, "view": sorted(view)}).encode()
    if not length:
        return header + b"\n"
    return header + b"\n" + b"\n".join(entry_lines) + b"\n"


def decode_state(data: bytes, skip: int = 0) -> StateMsg:
    """Decode a State body, materializing only entries from index ``skip`` on."""
    head, _, rest = data.partition(b"\n")
    header = json.loads(head)
    length = header["length"]
    skip = max(0, min(skip, length))
    want = length - skip
    if not want:
        return StateMsg(length, [], tuple(header["view"]), base=length)
    # split from the right so the skipped prefix is never materialized
    lines = rest.rstrip(b"\n").rsplit(b"\n", want)
    entries = [decode_entry(line) for line in lines[-want:]]
    return StateMsg(length, entries, tuple(header["view"]), base=skip)
