"""Classical Petri nets: places, transitions, weighted arcs, markings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional


class NetClass(enum.Enum):
    ELEMENTARY = "elementary"
    PLACE_TRANSITION = "place-transition"
    TIMED = "timed"


@dataclass
class Place:
    id: str
    capacity: Optional[int] = None
    tokens: int = 0


@dataclass
class Transition:
    id: str
    delay: Optional[int] = None
    external: bool = False


@dataclass
class Arc:
    src: str
    dst: str
    weight: int = 1


@dataclass
class Net:
    id: str = "net"
    places: list[Place] = field(default_factory=list)
    transitions: list[Transition] = field(default_factory=list)
    arcs: list[Arc] = field(default_factory=list)
    # None: contact-freeness follows the net class; bool forces it on or off.
    contact_free: Optional[bool] = None

    def place_ids(self) -> list[str]:
        return [p.id for p in self.places]

    def transition_ids(self) -> list[str]:
        return [t.id for t in self.transitions]

    def place(self, pid: str) -> Place:
        for p in self.places:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def transition(self, tid: str) -> Transition:
        for t in self.transitions:
            if t.id == tid:
                return t
        raise KeyError(tid)

    def inputs(self, tid: str) -> list[tuple[str, int]]:
        """(place, weight) pairs feeding a transition, in arc order."""
        pids = set(self.place_ids())
        return [(a.src, a.weight) for a in self.arcs if a.dst == tid and a.src in pids]

    def outputs(self, tid: str) -> list[tuple[str, int]]:
        pids = set(self.place_ids())
        return [(a.dst, a.weight) for a in self.arcs if a.src == tid and a.dst in pids]

    def initial_marking(self) -> "Marking":
        return Marking({p.id: p.tokens for p in self.places})


@dataclass(frozen=True)
class Marking:
    counts: dict[str, int]

    def __getitem__(self, pid: str) -> int:
        return self.counts.get(pid, 0)

    def key(self) -> tuple[tuple[str, int], ...]:
        """Canonical form: sorted (place, count) pairs."""
        return tuple(sorted(self.counts.items()))

    def total(self) -> int:
        return sum(self.counts.values())

    def __hash__(self) -> int:
        return hash(self.key())

    def __eq__(self, other) -> bool:
        return isinstance(other, Marking) and self.key() == other.key()


@dataclass(frozen=True)
class NetViolation:
    rule: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.element}: {self.message}"


def validate_net(net: Net) -> list[NetViolation]:
    """Bipartiteness, dangling endpoints, and initial-marking capacity checks."""
    out: list[NetViolation] = []
    places = set(net.place_ids())
    transitions = set(net.transition_ids())
    if places & transitions:
        for shared in sorted(places & transitions):
            out.append(NetViolation("unique-ids", shared, "id used for place and transition"))
    for arc in net.arcs:
        label = f"{arc.src}->{arc.dst}"
        src_kind = "place" if arc.src in places else "transition" if arc.src in transitions else None
        dst_kind = "place" if arc.dst in places else "transition" if arc.dst in transitions else None
        if src_kind is None:
            out.append(NetViolation("dangling-arc", label, f"unknown node {arc.src}"))
        if dst_kind is None:
            out.append(NetViolation("dangling-arc", label, f"unknown node {arc.dst}"))
        if src_kind and dst_kind and src_kind == dst_kind:
            out.append(NetViolation("bipartite", label,
                                    f"arc joins two {src_kind}s"))
        if arc.weight < 1:
            out.append(NetViolation("weight", label, "arc weight must be at least 1"))
    for p in net.places:
        if p.tokens < 0:
            out.append(NetViolation("marking", p.id, "negative token count"))
        if p.capacity is not None and p.tokens > p.capacity:
            out.append(NetViolation("capacity", p.id,
                                    f"initial tokens {p.tokens} exceed capacity {p.capacity}"))
    return out


def class_of(net: Net) -> NetClass:
    """Structural class: delays make a net timed; unit everything, elementary."""
    problems = validate_net(net)
    if problems:
        raise ValueError(f"invalid net: {problems[0]}")
    if any(t.delay is not None for t in net.transitions):
        return NetClass.TIMED
    elementary = (
        all(a.weight == 1 for a in net.arcs)
        and all(p.capacity == 1 for p in net.places)
        and all(p.tokens in (0, 1) for p in net.places)
    )
    return NetClass.ELEMENTARY if elementary else NetClass.PLACE_TRANSITION
