"""Compile Petri nets into flowthing-machine models plus an event mapping.

Each place becomes a storing machine (tokens = stored things), each
transition a machine whose firing is one uninterruptible group action:
consume stored things from the input places, run the transition machine's
process stage once, create and store the output things, and flush the
consumed things to the environment. The net's marking therefore corresponds
exactly to the storages, and the firing language to the event language.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import guards
from .events import ControlEdge, ControlGraph, Event, EventSet, Occurrence
from .fmmodel import (
    Clock, ClockStart, ClockStop, CreateTarget, FMModel, FireGroup, FlowArc,
    Group, InitialThing, Machine, STORAGE, Stage, TimeoutRule, TriggerArc,
    UnparkRule, exit_element,
)
from .pnmodel import Net, NetClass, class_of, validate_net
from .pnexec import FiredRecord


class TranslationError(Exception):
    """Raised for nets the translation rules cannot represent."""


VIRTUAL_START = "E_init"


@dataclass
class EventMapping:
    """Bijection transition <-> event, with the marking correspondence."""

    transition_to_event: dict[str, str]
    thing_kinds: dict[str, str] = field(default_factory=dict)  # place -> kind
    place_machines: dict[str, str] = field(default_factory=dict)  # place -> machine

    def event_for(self, transition: str) -> str:
        return self.transition_to_event[transition]

    def events(self) -> set[str]:
        return set(self.transition_to_event.values())


@dataclass
class Translation:
    model: FMModel
    events: EventSet
    control: ControlGraph
    mapping: EventMapping


def place_machine(pid: str) -> str:
    return f"P_{pid}"


def generator_machine(pid: str) -> str:
    return f"G_{pid}"


def transition_machine(tid: str) -> str:
    return f"T_{tid}"


def spawner_machine(tid: str) -> str:
    return f"S_{tid}"


def firing_group(tid: str) -> str:
    return f"fire_{tid}"


def translate(net: Net) -> Translation:
    """Compile an untimed net (elementary or place/transition class)."""
    cls = _checked_class(net)
    if cls is NetClass.TIMED:
        raise TranslationError("timed nets go through translate_timed()")
    return _translate(net, timed=False)


def translate_timed(net: Net) -> Translation:
    """Compile a timed net; internal delays become clock-driven firings.

    A net without delays degenerates to translate()'s output.
    """
    cls = _checked_class(net)
    for t in net.transitions:
        if t.delay is not None and t.external:
            raise TranslationError(f"external transition {t.id} carries a delay")
    return _translate(net, timed=cls is NetClass.TIMED)


def _checked_class(net: Net) -> NetClass:
    problems = validate_net(net)
    if problems:
        raise TranslationError(f"invalid net: {problems[0]}")
    cls = class_of(net)
    if cls is not NetClass.ELEMENTARY:
        capped = [p.id for p in net.places if p.capacity is not None]
        if capped:
            raise TranslationError(
                "place capacities outside the elementary class are not "
                f"representable: {', '.join(capped)}")
    return cls


def _translate(net: Net, timed: bool) -> Translation:
    model = FMModel(spheres=["net"])
    contact = class_of(net) is NetClass.ELEMENTARY

    fed_places = {a.dst for a in net.arcs if a.dst in set(net.place_ids())}
    for p in net.places:
        kind = f"tok_{p.id}"
        model.machines.append(Machine(
            id=place_machine(p.id), sphere="net", thing_kind=kind,
            stages=(Stage.RECEIVE, Stage.RELEASE, Stage.TRANSFER), has_storage=True))
        if p.id in fed_places:
            model.machines.append(Machine(
                id=generator_machine(p.id), sphere="net", thing_kind=kind,
                stages=(Stage.CREATE, Stage.RELEASE, Stage.TRANSFER)))
    for t in net.transitions:
        model.machines.append(Machine(
            id=transition_machine(t.id), sphere="net", thing_kind=None,
            stages=(Stage.RECEIVE, Stage.PROCESS, Stage.RELEASE, Stage.TRANSFER)))
        if not net.inputs(t.id):
            model.machines.append(Machine(
                id=spawner_machine(t.id), sphere="net", thing_kind=f"fire_{t.id}",
                stages=(Stage.CREATE, Stage.RELEASE, Stage.TRANSFER)))

    arcs: dict[tuple, str] = {}

    def arc(src_m: str, src_s: Stage, dst_m: str, dst_s: Stage) -> str:
        key = (src_m, src_s, dst_m, dst_s)
        if key not in arcs:
            fid = f"f{len(arcs) + 1}"
            arcs[key] = fid
            model.flows.append(FlowArc(id=fid, src_machine=src_m, src_stage=src_s,
                                       dst_machine=dst_m, dst_stage=dst_s))
        return arcs[key]

    unpark_of: dict[str, str] = {}
    for p in net.places:
        uid = f"up_{p.id}"
        unpark_of[p.id] = uid
        model.unparks.append(UnparkRule(id=uid, machine=place_machine(p.id),
                                        to_stage=Stage.RELEASE))
    park_of: dict[str, str] = {}

    triggers: dict[tuple[str, str], str] = {}
    spawn_trigger: dict[str, str] = {}

    for t in net.transitions:
        tm = transition_machine(t.id)
        for q, _ in net.outputs(t.id):
            key = (t.id, q)
            if key in triggers:
                continue
            tid = f"tr_{t.id}_{q}"
            triggers[key] = tid
            model.triggers.append(TriggerArc(
                id=tid, src_machine=tm, src_stage=Stage.PROCESS,
                target=CreateTarget(machine=generator_machine(q))))
            if q not in park_of:
                park_of[q] = f"pk_{q}"
                model.parks.append(ParkRuleCompat(park_of[q], place_machine(q)))
        if not net.inputs(t.id):
            sid = f"tr_spawn_{t.id}"
            spawn_trigger[t.id] = sid
            model.triggers.append(TriggerArc(
                id=sid, src_machine=tm, src_stage=Stage.PROCESS,
                target=CreateTarget(machine=spawner_machine(t.id))))

    for t in net.transitions:
        tm = transition_machine(t.id)
        steps: list[str] = []
        consumed = 0
        if not net.inputs(t.id):
            sm = spawner_machine(t.id)
            steps.append(spawn_trigger[t.id])
            steps.append(arc(sm, Stage.CREATE, sm, Stage.RELEASE))
            steps.append(arc(sm, Stage.RELEASE, sm, Stage.TRANSFER))
            steps.append(arc(sm, Stage.TRANSFER, tm, Stage.TRANSFER))
            steps.append(arc(tm, Stage.TRANSFER, tm, Stage.RECEIVE))
            consumed = 1
        for p, weight in net.inputs(t.id):
            pm = place_machine(p)
            for _ in range(weight):
                steps.append(unpark_of[p])
                steps.append(arc(pm, Stage.RELEASE, pm, Stage.TRANSFER))
                steps.append(arc(pm, Stage.TRANSFER, tm, Stage.TRANSFER))
                steps.append(arc(tm, Stage.TRANSFER, tm, Stage.RECEIVE))
                consumed += 1
        steps.append(arc(tm, Stage.RECEIVE, tm, Stage.PROCESS))
        for q, weight in net.outputs(t.id):
            gm = generator_machine(q)
            qm = place_machine(q)
            for _ in range(weight):
                steps.append(triggers[(t.id, q)])
                steps.append(arc(gm, Stage.CREATE, gm, Stage.RELEASE))
                steps.append(arc(gm, Stage.RELEASE, gm, Stage.TRANSFER))
                steps.append(arc(gm, Stage.TRANSFER, qm, Stage.TRANSFER))
                steps.append(arc(qm, Stage.TRANSFER, qm, Stage.RECEIVE))
                steps.append(park_of[q])
        # Flush the representative from process, then the other consumed things.
        steps.append(arc(tm, Stage.PROCESS, tm, Stage.RELEASE))
        steps.append(arc(tm, Stage.RELEASE, tm, Stage.TRANSFER))
        steps.append(exit_element(tm))
        for _ in range(consumed - 1):
            steps.append(arc(tm, Stage.RECEIVE, tm, Stage.RELEASE))
            steps.append(arc(tm, Stage.RELEASE, tm, Stage.TRANSFER))
            steps.append(exit_element(tm))
        guard = None
        if contact:
            for q, _ in net.outputs(t.id):
                clause = guards.Compare("=", guards.Count(place_machine(q), STORAGE),
                                        guards.IntLit(0))
                guard = clause if guard is None else guards.And(guard, clause)
        model.groups.append(Group(id=firing_group(t.id), constituents=tuple(steps),
                                  guard=guard))

    for p in net.places:
        for _ in range(p.tokens):
            model.initial_things.append(InitialThing(
                machine=place_machine(p.id), place=STORAGE))

    if timed:
        _add_clocks(net, model)

    events = [Event(id=VIRTUAL_START, anchor=f"virtual:{VIRTUAL_START}")]
    mapping = EventMapping(
        transition_to_event={t.id: f"E_{t.id}" for t in net.transitions},
        thing_kinds={p.id: f"tok_{p.id}" for p in net.places},
        place_machines={p.id: place_machine(p.id) for p in net.places})
    for t in net.transitions:
        tm = transition_machine(t.id)
        region = [f"{tm}.{s.value}" for s in
                  (Stage.RECEIVE, Stage.PROCESS, Stage.RELEASE, Stage.TRANSFER)]
        events.append(Event(id=mapping.event_for(t.id),
                            anchor=f"{tm}.{Stage.PROCESS.value}",
                            region=tuple(region)))
    edges = [ControlEdge(VIRTUAL_START, ev) for ev in sorted(mapping.events())]
    for a in sorted(mapping.events()):
        for b in sorted(mapping.events()):
            edges.append(ControlEdge(a, b))
    control = ControlGraph(start=VIRTUAL_START, edges=edges)

    return Translation(model=model, events=EventSet(events), control=control,
                       mapping=mapping)


def ParkRuleCompat(pid: str, machine: str):
    from .fmmodel import ParkRule
    return ParkRule(id=pid, machine=machine, from_stage=Stage.RECEIVE)


def _enabled_guard(net: Net, tid: str):
    """Marking-level enabling condition of a transition as a storage guard."""
    clause = None
    for p, weight in net.inputs(tid):
        c = guards.Compare(">=", guards.Count(place_machine(p), STORAGE),
                           guards.IntLit(weight))
        clause = c if clause is None else guards.And(clause, c)
    if clause is None:
        clause = guards.Compare("=", guards.IntLit(0), guards.IntLit(0))
    return clause


def _add_clocks(net: Net, model: FMModel) -> None:
    """Clock per internal timed transition, managed inside every group.

    The clock starts whenever the transition becomes enabled, restarts when
    another firing consumes from its input places while it stays enabled,
    stops when it gets disabled, and fires the transition's group on expiry.
    """
    timed = [t for t in net.transitions if t.delay is not None and not t.external]
    for t in timed:
        cid = f"C_{t.id}"
        initially_enabled = all(
            net.initial_marking()[p] >= w for p, w in net.inputs(t.id))
        model.clocks.append(Clock(
            id=cid, init_duration=t.delay if initially_enabled and net.inputs(t.id) != []
            or initially_enabled else None))
        model.timeouts.append(TimeoutRule(
            id=f"to_{t.id}", clock=cid, effect=FireGroup(group=firing_group(t.id))))

    idx = 0
    for group in model.groups:
        firing_of = group.id.removeprefix("fire_")
        consumed_places = {p for p, _ in net.inputs(firing_of)} if firing_of else set()
        extra: list[str] = []
        for t in timed:
            cid = f"C_{t.id}"
            enabled = _enabled_guard(net, t.id)
            inputs = {p for p, _ in net.inputs(t.id)}
            idx += 1
            stop_id = f"ck_stop_{idx}"
            model.triggers.append(TriggerArc(
                id=stop_id, src_machine=transition_machine(firing_of),
                src_stage=Stage.PROCESS, target=ClockStop(clock=cid),
                guard=guards.And(guards.Not(enabled), guards.Running(cid))))
            extra.append(stop_id)
            idx += 1
            start_id = f"ck_start_{idx}"
            if consumed_places & inputs:
                start_guard = enabled
            else:
                start_guard = guards.And(enabled, guards.Not(guards.Running(cid)))
            model.triggers.append(TriggerArc(
                id=start_id, src_machine=transition_machine(firing_of),
                src_stage=Stage.PROCESS, target=ClockStart(clock=cid, duration=t.delay),
                guard=start_guard))
            extra.append(start_id)
        group.constituents = group.constituents + tuple(extra)


def map_trace(pn_run: list[FiredRecord], mapping: EventMapping) -> list[Occurrence]:
    """Rename fired transitions to events, preserving order and times."""
    out: list[Occurrence] = []
    for record in pn_run:
        if record.transition not in mapping.transition_to_event:
            raise TranslationError(f"unmapped transition {record.transition}")
        if not record.fired:
            continue
        out.append(Occurrence(event=mapping.event_for(record.transition),
                              time=record.time))
    return out


def mapping_to_text(mapping: EventMapping) -> dict[str, str]:
    return dict(mapping.transition_to_event)


def mapping_from_text(pairs: dict[str, str], net: Net) -> EventMapping:
    """Build an EventMapping from parsed `<transition> <-> <event>` pairs."""
    missing = [t.id for t in net.transitions if t.id not in pairs]
    if missing:
        raise TranslationError(f"mapping misses transitions: {', '.join(missing)}")
    values = list(pairs.values())
    if len(set(values)) != len(values):
        raise TranslationError("mapping is not injective over events")
    return EventMapping(transition_to_event=dict(pairs))
