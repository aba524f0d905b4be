"""Events as diagram regions, event traces, and execution-control graphs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import fmexec, guards
from .fmexec import ExecState, Trace, replay
from .fmmodel import FMModel
from .guards import Guard
from .stategraph import StateGraph


class EventError(Exception):
    """Raised for ill-formed event sets (e.g. colliding anchors)."""


@dataclass
class Event:
    id: str
    anchor: str
    region: tuple[str, ...] = ()
    window: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        if not self.region:
            self.region = (self.anchor,)
        if self.anchor not in self.region:
            raise EventError(f"event {self.id}: anchor {self.anchor} outside its region")
        if self.window is not None and self.window[0] > self.window[1]:
            raise EventError(f"event {self.id}: empty time window")


class EventSet:
    """Named events with pairwise-distinct anchors (regions may overlap)."""

    def __init__(self, events: list[Event]):
        anchors: dict[str, str] = {}
        ids: set[str] = set()
        for ev in events:
            if ev.id in ids:
                raise EventError(f"duplicate event id {ev.id}")
            ids.add(ev.id)
            if ev.anchor in anchors:
                raise EventError(
                    f"anchor collision: {ev.id} and {anchors[ev.anchor]} share {ev.anchor}")
            anchors[ev.anchor] = ev.id
        self.events = list(events)
        self.by_anchor = anchors

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def ids(self) -> list[str]:
        return [e.id for e in self.events]

    def get(self, event_id: str) -> Event:
        for e in self.events:
            if e.id == event_id:
                return e
        raise KeyError(event_id)

    def restricted(self, keep: set[str]) -> "EventSet":
        return EventSet([e for e in self.events if e.id in keep])


@dataclass
class ControlEdge:
    src: str
    dst: str
    guard: Optional[Guard] = None


@dataclass
class ControlGraph:
    start: str
    edges: list[ControlEdge] = field(default_factory=list)

    def successors(self, event_id: str) -> list[ControlEdge]:
        return [e for e in self.edges if e.src == event_id]

    def node_ids(self) -> set[str]:
        out = {self.start}
        for e in self.edges:
            out.add(e.src)
            out.add(e.dst)
        return out


@dataclass(frozen=True)
class Occurrence:
    event: str
    time: int
    record_seq: int = -1


EventTrace = list[Occurrence]


def _hit(subjects: tuple[str, ...], by_anchor: dict[str, str]) -> Optional[str]:
    """First anchored subject wins; at most one event per micro-step."""
    for s in subjects:
        if s in by_anchor:
            return by_anchor[s]
    return None


def extract_events(trace: Trace, events: EventSet) -> EventTrace:
    """Project a micro-step trace onto event occurrences at the anchors."""
    out: EventTrace = []
    for r in trace.records:
        ev = _hit(r.subjects, events.by_anchor)
        if ev is not None:
            out.append(Occurrence(event=ev, time=r.time, record_seq=r.seq))
    return out


@dataclass
class ConformanceVerdict:
    conformant: bool
    violation_index: Optional[int] = None
    expected: frozenset[str] = frozenset()

    def __bool__(self) -> bool:
        return self.conformant


def conform(etrace: EventTrace, control: ControlGraph,
            state_for_guards: Optional[Callable[[int], object]] = None) -> ConformanceVerdict:
    """Check an event trace against a control graph.

    The empty trace conforms. The first event must be the start node or one
    of its successors (a virtual start never occurs itself). Each later pair
    must be an edge whose guard, if any, held at the earlier event.
    """
    if not etrace:
        return ConformanceVerdict(True)
    first = etrace[0].event
    if first != control.start:
        allowed = {e.dst for e in control.successors(control.start)}
        if first not in allowed:
            return ConformanceVerdict(False, 0, frozenset(allowed | {control.start}))
    for i in range(1, len(etrace)):
        prev, here = etrace[i - 1], etrace[i]
        edges = control.successors(prev.event)
        permitted = set()
        matched = False
        for edge in edges:
            if edge.guard is not None and state_for_guards is not None:
                ctx = state_for_guards(i - 1)
                if not guards.eval_guard(edge.guard, ctx):
                    continue
            permitted.add(edge.dst)
            if edge.dst == here.event:
                matched = True
        if not matched:
            return ConformanceVerdict(False, i, frozenset(permitted))
    return ConformanceVerdict(True)


def guard_context_provider(trace: Trace, etrace: EventTrace) -> Callable[[int], object]:
    """Guard contexts at each occurrence: the state just after its micro-step."""
    prefix_states: list[ExecState] = []
    for occ in etrace:
        upto = [r for r in trace.records if r.seq <= occ.record_seq]
        prefix_states.append(replay(trace.model, upto))

    def provider(index: int):
        state = prefix_states[index]
        return fmexec._Ctx(state, trace.model)

    return provider


def event_language(graph: StateGraph, events: EventSet,
                   depth: int) -> tuple[set[tuple[str, ...]], bool]:
    """Anchor projections of all paths from the initial state, up to `depth`.

    Silent steps are elided. Returns (language, lower_bound_flag); the flag is
    set when the input graph was truncated, making the set a lower bound.
    """
    edge_events: dict[int, tuple[str, ...]] = {}
    for i, edge in enumerate(graph.edges):
        hits = []
        for subjects in edge.step_subjects:
            ev = _hit(subjects, events.by_anchor)
            if ev is not None:
                hits.append(ev)
        edge_events[i] = tuple(hits)

    outgoing: dict[int, list[int]] = {}
    for i, edge in enumerate(graph.edges):
        outgoing.setdefault(edge.src, []).append(i)

    language: set[tuple[str, ...]] = {()}
    seen: set[tuple[int, tuple[str, ...]]] = {(graph.initial, ())}
    frontier = deque([(graph.initial, ())])
    while frontier:
        node, word = frontier.popleft()
        for ei in outgoing.get(node, []):
            extended = word + edge_events[ei]
            if len(extended) > depth:
                extended = extended[:depth]
                grown = word != extended
                if grown:
                    for k in range(len(word) + 1, len(extended) + 1):
                        language.add(extended[:k])
                continue
            for k in range(len(word) + 1, len(extended) + 1):
                language.add(extended[:k])
            key = (graph.edges[ei].dst, extended)
            if key not in seen:
                seen.add(key)
                frontier.append(key)
    return language, graph.truncated


def projection_invariant_holds(trace: Trace, events: EventSet) -> bool:
    """Dropping non-anchor micro-steps must leave the event trace unchanged."""
    full = [(o.event, o.time) for o in extract_events(trace, events)]
    filtered = Trace(model=trace.model, records=[
        r for r in trace.records if _hit(r.subjects, events.by_anchor)],
        final_state=trace.final_state)
    thinned = [(o.event, o.time) for o in extract_events(filtered, events)]
    return full == thinned
