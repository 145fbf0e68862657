"""Execution traces: environment inputs and replica outputs, one record per line.

A trace file starts with a header line (initial configuration, node list,
speculation flag), then one JSON record per event, and optionally ends with a
footer carrying the quiescence flag and the set of nodes that never crashed.
Several per-node files from a live cluster merge into one trace by timestamp.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .codec import dumps, entry_from_json, entry_to_json
from .core import Configuration, NodeId

IN, OUT, NOTE, FAULT, NET = "in", "out", "note", "fault", "net"


@dataclass(slots=True)
class Record:
    time: float
    node: NodeId
    seq: int
    dir: str
    kind: str
    config: Optional[str] = None
    value: object = None

    def to_json(self) -> dict:
        value = self.value if self.dir == NET else entry_to_json(self.value)
        return {"t": self.time, "node": self.node, "seq": self.seq, "dir": self.dir,
                "kind": self.kind, "conf": self.config, "value": value}

    @classmethod
    def from_json(cls, obj: dict) -> "Record":
        value = obj["value"] if obj["dir"] == NET else entry_from_json(obj["value"])
        return cls(obj["t"], obj["node"], obj["seq"], obj["dir"], obj["kind"], obj["conf"], value)


@dataclass
class Trace:
    c0: Configuration
    nodes: tuple
    records: list = field(default_factory=list)
    speculation: bool = True
    quiescent: Optional[bool] = None
    correct: Optional[frozenset] = None

    def correct_nodes(self) -> frozenset:
        if self.correct is not None:
            return self.correct
        crashed = {r.node for r in self.records if r.dir == FAULT and r.kind == "crash"}
        return frozenset(n for n in self.nodes if n not in crashed)

    def lines(self) -> Iterable[str]:
        yield dumps({"trace": 1, "c0": entry_to_json(self.c0), "nodes": list(self.nodes),
                     "speculation": self.speculation})
        for r in self.records:
            yield dumps(r.to_json())
        if self.quiescent is not None or self.correct is not None:
            correct = sorted(self.correct) if self.correct is not None else None
            yield dumps({"end": {"quiescent": self.quiescent, "correct": correct}})

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Trace":
        trace = None
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "trace" in obj:
                trace = cls(entry_from_json(obj["c0"]), tuple(obj["nodes"]),
                            speculation=obj.get("speculation", True))
            elif "end" in obj:
                end = obj["end"]
                trace.quiescent = end.get("quiescent")
                if end.get("correct") is not None:
                    trace.correct = frozenset(end["correct"])
            else:
                if trace is None:
                    raise ValueError("trace record before header")
                trace.records.append(Record.from_json(obj))
        if trace is None:
            raise ValueError("empty trace")
        return trace

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path) as fh:
            return cls.loads(fh.read())

    @classmethod
    def merge(cls, traces: list["Trace"]) -> "Trace":
        """Interleave per-node traces by timestamp (stable per node)."""
        if not traces:
            raise ValueError("nothing to merge")
        first = traces[0]
        nodes = sorted({n for t in traces for n in t.nodes})
        records = list(heapq.merge(*(t.records for t in traces), key=lambda r: r.time))
        return cls(first.c0, tuple(nodes), records, speculation=first.speculation)
