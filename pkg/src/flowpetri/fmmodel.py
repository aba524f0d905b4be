"""Static flowthing-machine models: machines, flows, triggers, clocks, groups.

A model is immutable after construction. Validation returns violations as
data; execution lives in fmexec.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Optional, Union

from . import guards
from .guards import Guard, Expr


class ModelError(Exception):
    """Raised when an operation is applied to a structurally unusable model."""


class Stage(enum.Enum):
    CREATE = "create"
    RECEIVE = "receive"
    PROCESS = "process"
    RELEASE = "release"
    TRANSFER = "transfer"

    def __str__(self) -> str:  # pragma: no cover - repr convenience
        return self.value


# Canonical ordering of placements inside one machine. Storage drains first
# so that guarded unparks act before same-machine stage moves.
PLACE_ORDER: dict[object, int] = {
    "storage": 0,
    Stage.CREATE: 1,
    Stage.RECEIVE: 2,
    Stage.PROCESS: 3,
    Stage.RELEASE: 4,
    Stage.TRANSFER: 5,
}

# Legal intra-machine flow steps (see README for the stage discipline).
INTRA_ADJACENCY: frozenset[tuple[Stage, Stage]] = frozenset(
    {
        (Stage.TRANSFER, Stage.RECEIVE),
        (Stage.RECEIVE, Stage.PROCESS),
        (Stage.RECEIVE, Stage.RELEASE),
        (Stage.PROCESS, Stage.RELEASE),
        (Stage.CREATE, Stage.RELEASE),
        (Stage.RELEASE, Stage.TRANSFER),
    }
)

PARK_STAGES = frozenset({Stage.PROCESS, Stage.RECEIVE})
UNPARK_STAGES = frozenset({Stage.RELEASE, Stage.PROCESS})


class Power(enum.Enum):
    ON = "on"
    OFF = "off"


class SimplifyLevel(enum.Enum):
    FULL = "full"
    NO_TRANSPORT = "notransport"
    CREATE_PROCESS_ONLY = "cp"


AttrValue = Union[int, str]


@dataclass
class Machine:
    id: str
    sphere: str
    thing_kind: Optional[str]
    stages: tuple[Stage, ...]
    has_storage: bool = False
    initial_power: Power = Power.ON

    def stage_set(self) -> frozenset[Stage]:
        return frozenset(self.stages)


@dataclass
class FlowArc:
    """Thing movement edge. Stage endpoints are None only in simplified models."""

    id: str
    src_machine: str
    src_stage: Optional[Stage]
    dst_machine: str
    dst_stage: Optional[Stage]
    label: Optional[str] = None

    @property
    def intra(self) -> bool:
        return self.src_machine == self.dst_machine


@dataclass
class CreateTarget:
    machine: str
    attrs: dict[str, Expr] = field(default_factory=dict)


@dataclass
class PowerTarget:
    machine: str
    power: Power


@dataclass
class ClockStart:
    clock: str
    duration: int


@dataclass
class ClockStop:
    clock: str


@dataclass
class FireGroup:
    """Timeout-only effect: attempt a group action (used by timed translation)."""

    group: str


TriggerTarget = Union[CreateTarget, PowerTarget, ClockStart, ClockStop]
TimeoutEffect = Union[CreateTarget, PowerTarget, ClockStart, ClockStop, FireGroup]


@dataclass
class TriggerArc:
    """Dashed-arrow activation: fires when a thing arrives at the source stage."""

    id: str
    src_machine: str
    src_stage: Stage
    target: TriggerTarget
    guard: Optional[Guard] = None


@dataclass
class ParkRule:
    """Allows a thing at from_stage to move into the machine's storage."""

    id: str
    machine: str
    from_stage: Stage
    guard: Optional[Guard] = None


@dataclass
class UnparkRule:
    """Allows a stored thing to move to to_stage (oldest stored thing first)."""

    id: str
    machine: str
    to_stage: Stage
    guard: Optional[Guard] = None


@dataclass
class Clock:
    id: str
    sphere: str = ""
    init_duration: Optional[int] = None


@dataclass
class TimeoutRule:
    """Effect applied when its clock's deadline strictly passes."""

    id: str
    clock: str
    effect: TimeoutEffect


@dataclass
class Group:
    """Uninterruptible action: ordered constituent elements run as one step."""

    id: str
    constituents: tuple[str, ...]
    guard: Optional[Guard] = None


STORAGE = "storage"


@dataclass
class InitialThing:
    machine: str
    place: Union[Stage, str]  # Stage or STORAGE
    attrs: dict[str, AttrValue] = field(default_factory=dict)
    kind: Optional[str] = None


@dataclass
class FMModel:
    spheres: list[str] = field(default_factory=list)
    machines: list[Machine] = field(default_factory=list)
    flows: list[FlowArc] = field(default_factory=list)
    triggers: list[TriggerArc] = field(default_factory=list)
    parks: list[ParkRule] = field(default_factory=list)
    unparks: list[UnparkRule] = field(default_factory=list)
    clocks: list[Clock] = field(default_factory=list)
    timeouts: list[TimeoutRule] = field(default_factory=list)
    groups: list[Group] = field(default_factory=list)
    initial_things: list[InitialThing] = field(default_factory=list)
    relaxed: bool = False  # True for simplified views; adjacency not enforced

    def machine(self, mid: str) -> Machine:
        for m in self.machines:
            if m.id == mid:
                return m
        raise KeyError(mid)

    def machine_ids(self) -> list[str]:
        return [m.id for m in self.machines]

    def has_machine(self, mid: str) -> bool:
        return any(m.id == mid for m in self.machines)

    def clock_ids(self) -> list[str]:
        return [c.id for c in self.clocks]

    def group(self, gid: str) -> Group:
        for g in self.groups:
            if g.id == gid:
                return g
        raise KeyError(gid)

    def grouped_element_ids(self) -> set[str]:
        owned: set[str] = set()
        for g in self.groups:
            owned.update(g.constituents)
        return owned

    def sphere_paths(self) -> list[str]:
        """Declared spheres plus every ancestor of a machine's sphere path."""
        seen: list[str] = []

        def add(path: str) -> None:
            parts = path.split("/")
            for i in range(1, len(parts) + 1):
                prefix = "/".join(parts[:i])
                if prefix and prefix not in seen:
                    seen.append(prefix)

        for s in self.spheres:
            add(s)
        for m in self.machines:
            add(m.sphere)
        return seen


def stage_element(machine: str, stage: Stage) -> str:
    return f"{machine}.{stage.value}"


def storage_element(machine: str) -> str:
    return f"{machine}.storage"


def exit_element(machine: str) -> str:
    return f"exit:{machine}"


def timeout_element(clock: str) -> str:
    return f"timeout:{clock}"


def element_index(model: FMModel) -> dict[str, object]:
    """Total index from element id to model element (stages included)."""
    index: dict[str, object] = {}

    def put(key: str, value: object) -> None:
        if key in index:
            raise ModelError(f"duplicate element id: {key}")
        index[key] = value

    for m in model.machines:
        put(m.id, m)
        for s in m.stages:
            put(stage_element(m.id, s), (m.id, s))
        if m.has_storage:
            put(storage_element(m.id), (m.id, STORAGE))
        if Stage.TRANSFER in m.stages:
            put(exit_element(m.id), (m.id, "exit"))
    for c in model.clocks:
        put(c.id, c)
        put(timeout_element(c.id), c)
    for group in (model.flows, model.triggers, model.parks, model.unparks,
                  model.timeouts, model.groups):
        for el in group:
            put(el.id, el)
    return index


@dataclass(frozen=True)
class Violation:
    rule: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.element}: {self.message}"


def validate(model: FMModel) -> list[Violation]:
    """Check every structural invariant; an empty report means valid."""
    out: list[Violation] = []
    try:
        index = element_index(model)
    except ModelError as exc:
        return [Violation("unique-ids", "model", str(exc))]

    machine_ids = set(model.machine_ids())
    clock_ids = set(model.clock_ids())

    for m in model.machines:
        if not m.stages:
            out.append(Violation("stages-nonempty", m.id, "machine declares no stages"))
        if len(set(m.stages)) != len(m.stages):
            out.append(Violation("stage-unique", m.id, "duplicate stage kind"))

    for arc in model.flows:
        for mid in (arc.src_machine, arc.dst_machine):
            if mid not in machine_ids:
                out.append(Violation("dangling-arc", arc.id, f"unknown machine {mid}"))
        if arc.src_machine in machine_ids and arc.src_stage is not None:
            if arc.src_stage not in model.machine(arc.src_machine).stage_set():
                out.append(Violation("dangling-arc", arc.id,
                                     f"{arc.src_machine} has no {arc.src_stage.value} stage"))
        if arc.dst_machine in machine_ids and arc.dst_stage is not None:
            if arc.dst_stage not in model.machine(arc.dst_machine).stage_set():
                out.append(Violation("dangling-arc", arc.id,
                                     f"{arc.dst_machine} has no {arc.dst_stage.value} stage"))
        if model.relaxed or arc.src_stage is None or arc.dst_stage is None:
            continue
        if arc.intra:
            if (arc.src_stage, arc.dst_stage) not in INTRA_ADJACENCY:
                out.append(Violation(
                    "illegal stage adjacency", arc.id,
                    f"{arc.src_stage.value} -> {arc.dst_stage.value} is not a legal step"))
        else:
            if arc.src_stage is not Stage.TRANSFER or arc.dst_stage is not Stage.TRANSFER:
                out.append(Violation(
                    "inter-machine transfer", arc.id,
                    "arcs between machines must join transfer stages"))

    for trig in model.triggers:
        if trig.src_machine not in machine_ids:
            out.append(Violation("dangling-trigger", trig.id,
                                 f"unknown machine {trig.src_machine}"))
        elif trig.src_stage not in model.machine(trig.src_machine).stage_set():
            out.append(Violation("dangling-trigger", trig.id,
                                 f"{trig.src_machine} has no {trig.src_stage.value} stage"))
        out.extend(_check_target(trig.target, trig.id, machine_ids, clock_ids, model))
        out.extend(_check_guard(trig.guard, trig.id, machine_ids, clock_ids))

    for park in model.parks:
        if park.machine not in machine_ids:
            out.append(Violation("dangling-park", park.id, f"unknown machine {park.machine}"))
            continue
        m = model.machine(park.machine)
        if not m.has_storage:
            out.append(Violation("storage-required", park.id, f"{m.id} has no storage"))
        if not model.relaxed and park.from_stage not in PARK_STAGES:
            out.append(Violation("park-stage", park.id,
                                 "parking is allowed from process or receive only"))
        elif park.from_stage not in m.stage_set():
            out.append(Violation("dangling-park", park.id,
                                 f"{m.id} has no {park.from_stage.value} stage"))
        out.extend(_check_guard(park.guard, park.id, machine_ids, clock_ids))

    for unpark in model.unparks:
        if unpark.machine not in machine_ids:
            out.append(Violation("dangling-unpark", unpark.id,
                                 f"unknown machine {unpark.machine}"))
            continue
        m = model.machine(unpark.machine)
        if not m.has_storage:
            out.append(Violation("storage-required", unpark.id, f"{m.id} has no storage"))
        if not model.relaxed and unpark.to_stage not in UNPARK_STAGES:
            out.append(Violation("unpark-stage", unpark.id,
                                 "unparking targets release or process only"))
        elif unpark.to_stage not in m.stage_set():
            out.append(Violation("dangling-unpark", unpark.id,
                                 f"{m.id} has no {unpark.to_stage.value} stage"))
        out.extend(_check_guard(unpark.guard, unpark.id, machine_ids, clock_ids))

    for rule in model.timeouts:
        if rule.clock not in clock_ids:
            out.append(Violation("dangling-timeout", rule.id, f"unknown clock {rule.clock}"))
        if isinstance(rule.effect, FireGroup):
            if rule.effect.group not in {g.id for g in model.groups}:
                out.append(Violation("dangling-timeout", rule.id,
                                     f"unknown group {rule.effect.group}"))
        else:
            out.extend(_check_target(rule.effect, rule.id, machine_ids, clock_ids, model))

    for grp in model.groups:
        for cid in grp.constituents:
            el = index.get(cid)
            if el is None:
                out.append(Violation("dangling-group", grp.id, f"unknown element {cid}"))
            elif not isinstance(el, (FlowArc, TriggerArc, ParkRule, UnparkRule)) and \
                    not (isinstance(el, tuple) and el[1] == "exit"):
                out.append(Violation("group-constituent", grp.id,
                                     f"{cid} cannot be grouped"))
        out.extend(_check_guard(grp.guard, grp.id, machine_ids, clock_ids))

    for i, thing in enumerate(model.initial_things):
        tid = f"thing#{i + 1}"
        if thing.machine not in machine_ids:
            out.append(Violation("dangling-thing", tid, f"unknown machine {thing.machine}"))
            continue
        m = model.machine(thing.machine)
        if thing.place == STORAGE:
            if not m.has_storage:
                out.append(Violation("storage-required", tid, f"{m.id} has no storage"))
        elif isinstance(thing.place, Stage) and thing.place not in m.stage_set():
            out.append(Violation("dangling-thing", tid,
                                 f"{m.id} has no {thing.place.value} stage"))
        if thing.kind and m.thing_kind and thing.kind != m.thing_kind:
            out.append(Violation("thing-kind", tid,
                                 f"kind {thing.kind} does not match machine kind {m.thing_kind}"))

    return out


def _check_target(target: TriggerTarget, owner: str, machines: set[str],
                  clocks: set[str], model: FMModel) -> list[Violation]:
    out: list[Violation] = []
    if isinstance(target, CreateTarget):
        if target.machine not in machines:
            out.append(Violation("dangling-target", owner, f"unknown machine {target.machine}"))
        elif Stage.CREATE not in model.machine(target.machine).stage_set():
            out.append(Violation("dangling-target", owner,
                                 f"{target.machine} has no create stage"))
        for name, expr in target.attrs.items():
            out.extend(_check_guard(expr, owner, machines, clocks))
    elif isinstance(target, PowerTarget):
        if target.machine not in machines:
            out.append(Violation("dangling-target", owner, f"unknown machine {target.machine}"))
    elif isinstance(target, (ClockStart, ClockStop)):
        if target.clock not in clocks:
            out.append(Violation("dangling-target", owner, f"unknown clock {target.clock}"))
    return out


def _check_guard(guard, owner: str, machines: set[str], clocks: set[str]) -> list[Violation]:
    if guard is None:
        return []
    out = []
    for mid in sorted(guards.referenced_machines(guard) - machines):
        out.append(Violation("guard-reference", owner, f"unknown machine {mid}"))
    for cid in sorted(guards.referenced_clocks(guard) - clocks):
        out.append(Violation("guard-reference", owner, f"unknown clock {cid}"))
    return out


TRANSPORT_STAGES = frozenset({Stage.RELEASE, Stage.TRANSFER, Stage.RECEIVE})


def simplify(model: FMModel, level: SimplifyLevel) -> FMModel:
    """Produce the multilevel simplification of a model.

    FULL is the identity. NO_TRANSPORT drops release/transfer/receive stages
    and collapses each transport chain across an inter-machine hop into one
    machine-to-machine arc. CREATE_PROCESS_ONLY additionally removes machines
    left without create or process, rerouting arcs through them.
    """
    problems = validate(model)
    if problems:
        raise ModelError(f"cannot simplify an invalid model: {problems[0]}")
    if level is SimplifyLevel.FULL:
        return copy.deepcopy(model)

    out = copy.deepcopy(model)
    out.relaxed = True

    kept: dict[str, tuple[Stage, ...]] = {}
    for m in out.machines:
        m.stages = tuple(s for s in m.stages if s not in TRANSPORT_STAGES)
        kept[m.id] = m.stages

    # One collapsed arc per inter-machine transfer hop.
    collapsed: list[FlowArc] = []
    n = 0
    for arc in model.flows:
        if arc.src_stage is None or arc.dst_stage is None:
            collapsed.append(copy.deepcopy(arc))
            continue
        if not arc.intra:
            n += 1
            collapsed.append(FlowArc(
                id=f"s{n}", src_machine=arc.src_machine, src_stage=None,
                dst_machine=arc.dst_machine, dst_stage=None, label=arc.label))
        elif arc.src_stage not in TRANSPORT_STAGES and arc.dst_stage not in TRANSPORT_STAGES:
            collapsed.append(copy.deepcopy(arc))
    out.flows = collapsed

    for trig in out.triggers:
        if trig.src_stage in TRANSPORT_STAGES:
            # Re-anchor at the machine's surviving stage when possible.
            survivors = kept[trig.src_machine]
            trig.src_stage = survivors[0] if survivors else Stage.PROCESS
    for park in out.parks:
        if park.from_stage in TRANSPORT_STAGES:
            park.from_stage = Stage.PROCESS
    for unpark in out.unparks:
        if unpark.to_stage in TRANSPORT_STAGES:
            unpark.to_stage = Stage.PROCESS
    out.parks = [p for p in out.parks if Stage.PROCESS in kept[p.machine] or True]
    out.groups = []
    out.initial_things = [
        t for t in out.initial_things
        if t.place == STORAGE or (isinstance(t.place, Stage) and t.place in kept[t.machine])
    ]

    if level is SimplifyLevel.NO_TRANSPORT:
        return _dedupe_arcs(out)

    # CREATE_PROCESS_ONLY: drop stage-less machines, rerouting through them.
    dropped = {m.id for m in out.machines if not m.stages}
    out.machines = [m for m in out.machines if m.id not in dropped]
    changed = True
    arcs = out.flows
    while changed:
        changed = False
        rerouted: list[FlowArc] = []
        for arc in arcs:
            if arc.dst_machine in dropped:
                for nxt in arcs:
                    if nxt.src_machine == arc.dst_machine and nxt.dst_machine != arc.src_machine:
                        if nxt.dst_machine not in dropped and arc.src_machine not in dropped:
                            rerouted.append(FlowArc(
                                id=f"{arc.id}+{nxt.id}", src_machine=arc.src_machine,
                                src_stage=None, dst_machine=nxt.dst_machine, dst_stage=None))
                            changed = True
            elif arc.src_machine not in dropped:
                rerouted.append(arc)
        arcs = rerouted
    out.flows = [a for a in arcs if a.src_machine not in dropped and a.dst_machine not in dropped]
    out.triggers = [t for t in out.triggers
                    if t.src_machine not in dropped
                    and not (isinstance(t.target, CreateTarget) and t.target.machine in dropped)
                    and not (isinstance(t.target, PowerTarget) and t.target.machine in dropped)]
    out.parks = [p for p in out.parks if p.machine not in dropped]
    out.unparks = [u for u in out.unparks if u.machine not in dropped]
    out.initial_things = [t for t in out.initial_things if t.machine not in dropped]
    return _dedupe_arcs(out)


def _dedupe_arcs(model: FMModel) -> FMModel:
    seen: set[tuple] = set()
    arcs: list[FlowArc] = []
    n = 0
    for arc in model.flows:
        key = (arc.src_machine, arc.src_stage, arc.dst_machine, arc.dst_stage)
        if key in seen or arc.src_machine == arc.dst_machine and arc.src_stage is None:
            continue
        seen.add(key)
        n += 1
        arcs.append(FlowArc(id=f"s{n}", src_machine=arc.src_machine, src_stage=arc.src_stage,
                            dst_machine=arc.dst_machine, dst_stage=arc.dst_stage,
                            label=arc.label))
    model.flows = arcs
    return model
