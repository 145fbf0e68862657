"""Shared vocabulary: node and configuration identifiers, entries, output events.

Node ids, configuration ids and command ids are plain strings chosen by the
environment. Strings give the total order needed for leader choice and ballot
tie-breaking.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

NodeId = str
ConfigId = str


class ConsistencyError(RuntimeError):
    """A replica observed state that correct peers can never produce."""


class WellFormednessError(RuntimeError):
    """The environment broke an interaction rule (duplicate join, propose before join...)."""


@dataclass(frozen=True, slots=True)
class Configuration:
    id: ConfigId
    members: tuple[NodeId, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError(f"configuration {self.id!r} has no members")
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"configuration {self.id!r} lists a member twice")

    @classmethod
    def of(cls, id: ConfigId, members: Iterable[NodeId]) -> "Configuration":
        return cls(id, tuple(members))

    @property
    def majority(self) -> int:
        return len(self.members) // 2 + 1

    def __contains__(self, node: NodeId) -> bool:
        return node in self.members


@dataclass(frozen=True, slots=True)
class Command:
    id: str
    payload: bytes = b""


Entry = Union[Command, Configuration]


def is_config(entry: Entry) -> bool:
    return type(entry) is Configuration


def first_config_index(seq: Sequence[Entry]) -> Optional[int]:
    for i, entry in enumerate(seq):
        if type(entry) is Configuration:
            return i
    return None


def is_prefix(a: Sequence, b: Sequence) -> bool:
    """True iff ``a`` equals the first ``len(a)`` items of ``b``."""
    if len(a) > len(b):
        return False
    return list(a) == list(b[: len(a)])


def prefix_comparable(a: Sequence, b: Sequence) -> bool:
    return is_prefix(a, b) if len(a) <= len(b) else is_prefix(b, a)


LEARN = "learn"
NEW_CONF = "new_conf"
READY = "ready"


@dataclass(frozen=True, slots=True)
class OutputEvent:
    kind: str  # LEARN | NEW_CONF | READY
    value: Entry
    emitter: NodeId
    seq: int

    @property
    def key(self) -> str:
        return self.value.id
