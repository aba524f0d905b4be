"""Petri net execution: the token game, reachability, languages, timed runs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from .pnmodel import Marking, Net, NetClass, class_of, validate_net
from .stategraph import Edge, StateGraph


class NotEnabled(Exception):
    """Raised when a transition is fired without being enabled."""


class ScheduleError(Exception):
    """Raised for schedule entries that reference unknown transitions."""


def _contact_rule(net: Net) -> bool:
    if net.contact_free is not None:
        return net.contact_free
    return class_of(net) is NetClass.ELEMENTARY


def enabled(net: Net, marking: Marking) -> list[str]:
    """Enabled transitions in declaration order.

    A transition needs every input place to hold at least the arc weight.
    Under the contact rule (elementary nets) its output places must also be
    empty; capacities, where declared, must not be exceeded by firing.
    """
    contact = _contact_rule(net)
    result = []
    for t in net.transitions:
        if _is_enabled(net, marking, t.id, contact):
            result.append(t.id)
    return result


def _is_enabled(net: Net, marking: Marking, tid: str, contact: bool) -> bool:
    for pid, weight in net.inputs(tid):
        if marking[pid] < weight:
            return False
    if contact:
        for pid, _ in net.outputs(tid):
            if marking[pid] != 0:
                return False
        return True
    consumed: dict[str, int] = {}
    for pid, weight in net.inputs(tid):
        consumed[pid] = consumed.get(pid, 0) + weight
    for pid, weight in net.outputs(tid):
        cap = net.place(pid).capacity
        if cap is not None:
            after = marking[pid] - consumed.get(pid, 0) + weight
            if after > cap:
                return False
    return True


def fire(net: Net, marking: Marking, tid: str) -> Marking:
    """Subtract input weights, add output weights."""
    if tid not in enabled(net, marking):
        raise NotEnabled(f"transition {tid} is not enabled")
    counts = dict(marking.counts)
    for pid, weight in net.inputs(tid):
        counts[pid] = counts.get(pid, 0) - weight
    for pid, weight in net.outputs(tid):
        counts[pid] = counts.get(pid, 0) + weight
    return Marking(counts)


def reachability(net: Net, cap: int = 100_000) -> StateGraph:
    """Breadth-first closure over markings; truncated when `cap` is hit."""
    problems = validate_net(net)
    if problems:
        raise ValueError(f"invalid net: {problems[0]}")
    initial = net.initial_marking()
    graph = StateGraph(nodes=[initial], initial=0)
    index = {initial.key(): 0}
    queue = deque([0])
    while queue:
        at = queue.popleft()
        marking = graph.nodes[at]
        for tid in enabled(net, marking):
            nxt = fire(net, marking, tid)
            key = nxt.key()
            if key not in index:
                if len(graph.nodes) >= cap:
                    graph.truncated = True
                    return graph
                index[key] = len(graph.nodes)
                graph.nodes.append(nxt)
                queue.append(index[key])
            graph.edges.append(Edge(src=at, label=tid, dst=index[key],
                                    step_subjects=((tid,),)))
    return graph


def firing_language(net: Net, depth: int) -> set[tuple[str, ...]]:
    """All firable transition sequences up to `depth`, prefix-closed."""
    language: set[tuple[str, ...]] = {()}
    seen: set[tuple] = set()
    queue = deque([(net.initial_marking(), ())])
    while queue:
        marking, prefix = queue.popleft()
        if len(prefix) >= depth:
            continue
        for tid in enabled(net, marking):
            word = prefix + (tid,)
            language.add(word)
            nxt = fire(net, marking, tid)
            key = (nxt.key(), word)
            if key not in seen:
                seen.add(key)
                queue.append((nxt, word))
    return language


@dataclass(frozen=True)
class FiredRecord:
    time: int
    transition: str
    fired: bool = True  # False marks a scheduled firing dropped while disabled

    def __str__(self) -> str:
        mark = "" if self.fired else " (dropped)"
        return f"{self.time} {self.transition}{mark}"


def timed_run(net: Net, schedule: list[tuple[int, str]], horizon: int) -> list[FiredRecord]:
    """Drive a timed net: externals fire per schedule, internals per delay.

    An internal timed transition fires at its latest enabling time plus its
    delay; consuming from its input places re-arms the delay. At equal times
    scheduled external firings precede due internal ones; ties among
    internals break by declaration order.
    """
    if class_of(net) is not NetClass.TIMED:
        raise ValueError("timed_run requires a timed net")
    known = set(net.transition_ids())
    for _, tid in schedule:
        if tid not in known:
            raise ScheduleError(f"schedule references unknown transition {tid}")
        if not net.transition(tid).external:
            raise ScheduleError(f"scheduled transition {tid} is not external")

    timed = [t for t in net.transitions if t.delay is not None and not t.external]
    for t in net.transitions:
        if t.delay is not None and t.external:
            raise ValueError(f"external transition {t.id} carries a delay")

    marking = net.initial_marking()
    contact = _contact_rule(net)
    due: dict[str, int] = {}

    def rearm(now: int, consumed_from: set[str]) -> None:
        for t in timed:
            on = _is_enabled(net, marking, t.id, contact)
            if not on:
                due.pop(t.id, None)
            elif t.id not in due or consumed_from & {p for p, _ in net.inputs(t.id)}:
                due[t.id] = now + t.delay

    rearm(0, set())
    records: list[FiredRecord] = []
    pending = sorted(schedule, key=lambda item: item[0])
    idx = 0
    while True:
        next_ext = pending[idx][0] if idx < len(pending) else None
        next_int = min(due.values()) if due else None
        candidates = [t for t in (next_ext, next_int) if t is not None]
        if not candidates:
            break
        now = min(candidates)
        if now > horizon:
            break
        # Externals scheduled at this moment, in schedule order.
        while idx < len(pending) and pending[idx][0] == now:
            _, tid = pending[idx]
            idx += 1
            if _is_enabled(net, marking, tid, contact):
                inputs = {p for p, _ in net.inputs(tid)}
                marking = fire(net, marking, tid)
                records.append(FiredRecord(now, tid))
                rearm(now, inputs)
            else:
                records.append(FiredRecord(now, tid, fired=False))
        # Internal transitions whose delay has elapsed.
        while True:
            ready = [t.id for t in timed if due.get(t.id) is not None and due[t.id] <= now]
            if not ready:
                break
            tid = ready[0]
            inputs = {p for p, _ in net.inputs(tid)}
            marking = fire(net, marking, tid)
            records.append(FiredRecord(now, tid))
            due.pop(tid, None)
            rearm(now, inputs)
    return records
