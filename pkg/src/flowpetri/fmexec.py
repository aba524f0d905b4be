"""Operational semantics for flowthing-machine models.

Execution is a sequence of micro-steps over an isolated state value. One
scheduled *action* (a move, a guarded park or unpark, a pending trigger, a
timeout, or a whole uninterruptible group) may emit several micro-step
records; records are what traces, events, and replay work from.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

from . import fmmodel, guards
from .fmmodel import (
    STORAGE, Clock, ClockStart, ClockStop, CreateTarget, FMModel, FireGroup,
    FlowArc, Group, Machine, ModelError, ParkRule, PLACE_ORDER, Power,
    PowerTarget, Stage, TriggerArc, UnparkRule, exit_element, stage_element,
    storage_element, timeout_element, validate,
)
from .stategraph import Edge, StateGraph


class ActionNotEnabled(Exception):
    """Raised when step() is handed an action outside enabled_actions()."""


class DivergenceError(Exception):
    """A fixed moment cycled through the same state without new input."""

    def __init__(self, time: int, state_key):
        super().__init__(f"non-quiescent loop at time {time}; repeating state {state_key!r}")
        self.time = time
        self.state_key = state_key


AttrValue = Union[int, str]

IN, OUT = "in", "out"


@dataclass(frozen=True)
class Thing:
    id: str
    kind: str
    attrs: tuple[tuple[str, AttrValue], ...] = ()
    direction: Optional[str] = None  # meaningful only at transfer stages

    def attr(self, name: str) -> AttrValue:
        for key, value in self.attrs:
            if key == name:
                return value
        raise guards.GuardError(f"thing {self.id} has no attribute {name}")

    def attr_dict(self) -> dict[str, AttrValue]:
        return dict(self.attrs)


def freeze_attrs(attrs: dict[str, AttrValue]) -> tuple[tuple[str, AttrValue], ...]:
    return tuple(sorted(attrs.items()))


IDLE, RUNNING, EXPIRED = "idle", "running", "expired"


@dataclass
class ClockState:
    status: str = IDLE
    started_at: int = 0
    duration: int = 0
    deadline: Optional[int] = None


@dataclass
class ExecState:
    now: int = 0
    placements: dict[tuple[str, Stage], list[Thing]] = field(default_factory=dict)
    storages: dict[str, list[Thing]] = field(default_factory=dict)
    env: list[Thing] = field(default_factory=list)
    power: dict[str, Power] = field(default_factory=dict)
    clocks: dict[str, ClockState] = field(default_factory=dict)
    pending: deque = field(default_factory=deque)  # (trigger_id, this_attrs)
    next_thing: int = 1

    def clone(self) -> "ExecState":
        out = ExecState(
            now=self.now,
            placements={k: list(v) for k, v in self.placements.items()},
            storages={k: list(v) for k, v in self.storages.items()},
            env=list(self.env),
            power=dict(self.power),
            clocks={k: replace(v) for k, v in self.clocks.items()},
            pending=deque(self.pending),
            next_thing=self.next_thing,
        )
        return out

    def at(self, machine: str, stage: Stage) -> list[Thing]:
        return self.placements.setdefault((machine, stage), [])

    def storage(self, machine: str) -> list[Thing]:
        return self.storages.setdefault(machine, [])

    def things_everywhere(self) -> list[Thing]:
        out: list[Thing] = []
        for lst in self.placements.values():
            out.extend(lst)
        for lst in self.storages.values():
            out.extend(lst)
        out.extend(self.env)
        return out

    def snapshot(self, include_env: bool = True):
        """Canonical, id-free value of the state (used for cycle detection)."""
        placements = tuple(
            (key[0], key[1].value,
             tuple((t.kind, t.attrs, t.direction) for t in lst))
            for key, lst in sorted(self.placements.items(),
                                   key=lambda kv: (kv[0][0], kv[0][1].value))
            if lst
        )
        storages = tuple(
            (mid, tuple((t.kind, t.attrs) for t in lst))
            for mid, lst in sorted(self.storages.items()) if lst
        )
        env = tuple(sorted((t.kind, t.attrs) for t in self.env)) if include_env else ()
        power = tuple(sorted((m, p.value) for m, p in self.power.items()))
        clocks = tuple(sorted(
            (c, s.status, s.started_at, s.duration, s.deadline)
            for c, s in self.clocks.items()))
        pending = tuple(self.pending)
        return (placements, storages, env, power, clocks, pending)

    def identical_to(self, other: "ExecState") -> bool:
        """Exact equality including thing ids (replay check)."""
        def norm(state: "ExecState"):
            return (
                state.now,
                tuple((k[0], k[1].value, tuple((t.id, t.kind, t.attrs, t.direction) for t in v))
                      for k, v in sorted(state.placements.items(),
                                         key=lambda kv: (kv[0][0], kv[0][1].value)) if v),
                tuple((m, tuple((t.id, t.kind, t.attrs) for t in v))
                      for m, v in sorted(state.storages.items()) if v),
                tuple(sorted((t.id, t.kind, t.attrs) for t in state.env)),
                tuple(sorted((m, p.value) for m, p in state.power.items())),
                tuple(sorted((c, s.status, s.started_at, s.duration, s.deadline)
                             for c, s in state.clocks.items())),
            )
        return norm(self) == norm(other)


@dataclass(frozen=True)
class MicroStepRecord:
    seq: int
    time: int
    kind: str  # move create park unpark trigger-fire power-change
    #          # clock-start clock-stop timeout injection
    subjects: tuple[str, ...]
    thing: Optional[str] = None
    details: tuple[tuple[str, str], ...] = ()

    def detail(self, key: str) -> Optional[str]:
        for k, v in self.details:
            if k == key:
                return v
        return None


@dataclass
class Trace:
    model: FMModel
    records: list[MicroStepRecord]
    final_state: ExecState
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class ScheduleEntry:
    time: int
    kind: str  # "inject" or "fire"
    target: str  # machine id (inject) or group/transition name (fire)
    stage: Optional[Stage] = None  # injection point; default transfer
    attrs: tuple[tuple[str, AttrValue], ...] = ()


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class TimeoutAction:
    clock: str


@dataclass(frozen=True)
class FireTriggerAction:
    trigger: str


@dataclass(frozen=True)
class MoveAction:
    arc: str
    thing: str


@dataclass(frozen=True)
class ParkAction:
    rule: str
    thing: str


@dataclass(frozen=True)
class UnparkAction:
    rule: str
    thing: str


@dataclass(frozen=True)
class EnvExitAction:
    machine: str
    thing: str


@dataclass(frozen=True)
class GroupAction:
    group: str


Action = Union[TimeoutAction, FireTriggerAction, MoveAction, ParkAction,
               UnparkAction, EnvExitAction, GroupAction]


def action_label(action: Action) -> str:
    if isinstance(action, TimeoutAction):
        return timeout_element(action.clock)
    if isinstance(action, FireTriggerAction):
        return f"fire:{action.trigger}"
    if isinstance(action, MoveAction):
        return f"move:{action.arc}"
    if isinstance(action, ParkAction):
        return f"park:{action.rule}"
    if isinstance(action, UnparkAction):
        return f"unpark:{action.rule}"
    if isinstance(action, EnvExitAction):
        return exit_element(action.machine)
    return f"group:{action.group}"


# ---------------------------------------------------------------------------
# Guard evaluation context


class _Ctx:
    def __init__(self, state: ExecState, model: FMModel,
                 this: Optional[tuple[tuple[str, AttrValue], ...]] = None):
        self.state = state
        self.model = model
        self.this = this

    def count(self, machine: str, place: str) -> int:
        if place == STORAGE:
            return len(self.state.storages.get(machine, []))
        stage = Stage(place)
        return len(self.state.placements.get((machine, stage), []))

    def sum_storage(self, machine: str, attr: str) -> int:
        total = 0
        for t in self.state.storages.get(machine, []):
            value = dict(t.attrs).get(attr, 0)
            if not isinstance(value, int):
                raise guards.GuardError(f"attribute {attr} of {t.id} is not an integer")
            total += value
        return total

    def stage_count_total(self, machine: str) -> int:
        return sum(len(v) for (m, _), v in self.state.placements.items() if m == machine)

    def power_is_on(self, machine: str) -> bool:
        return self.state.power.get(machine, Power.ON) is Power.ON

    def clock_running(self, clock: str) -> bool:
        return self.state.clocks[clock].status == RUNNING

    def clock_expired(self, clock: str) -> bool:
        return self.state.clocks[clock].status == EXPIRED

    def clock_elapsed(self, clock: str) -> int:
        cs = self.state.clocks[clock]
        if cs.status == IDLE:
            return -1
        return self.state.now - cs.started_at

    def this_attr(self, name: str):
        if self.this is None:
            raise guards.GuardError("no triggering thing in this context")
        for key, value in self.this:
            if key == name:
                return value
        raise guards.GuardError(f"triggering thing has no attribute {name}")


def _guard_holds(guard, state: ExecState, model: FMModel, this=None) -> bool:
    if guard is None:
        return True
    return guards.eval_guard(guard, _Ctx(state, model, this))


# ---------------------------------------------------------------------------
# Model indexes (cached per model id)


class _ModelView:
    def __init__(self, model: FMModel):
        self.model = model
        self.machine_index = {m.id: i for i, m in enumerate(model.machines)}
        self.machines = {m.id: m for m in model.machines}
        self.arcs_from: dict[tuple[str, Stage], list[FlowArc]] = {}
        for arc in model.flows:
            if arc.src_stage is None or arc.dst_stage is None:
                continue
            self.arcs_from.setdefault((arc.src_machine, arc.src_stage), []).append(arc)
        self.arc_by_id = {a.id: a for a in model.flows}
        self.triggers_from: dict[tuple[str, Stage], list[TriggerArc]] = {}
        for trig in model.triggers:
            self.triggers_from.setdefault((trig.src_machine, trig.src_stage), []).append(trig)
        self.trigger_by_id = {t.id: t for t in model.triggers}
        self.park_by_id = {p.id: p for p in model.parks}
        self.unpark_by_id = {u.id: u for u in model.unparks}
        self.parks_from: dict[tuple[str, Stage], list[ParkRule]] = {}
        for p in model.parks:
            self.parks_from.setdefault((p.machine, p.from_stage), []).append(p)
        self.unparks_of: dict[str, list[UnparkRule]] = {}
        for u in model.unparks:
            self.unparks_of.setdefault(u.machine, []).append(u)
        self.group_by_id = {g.id: g for g in model.groups}
        self.grouped = model.grouped_element_ids()
        self.timeout_rules: dict[str, list] = {}
        for rule in model.timeouts:
            self.timeout_rules.setdefault(rule.clock, []).append(rule)
        self.element_order = {el: i for i, el in enumerate(
            [a.id for a in model.flows] + [t.id for t in model.triggers]
            + [p.id for p in model.parks] + [u.id for u in model.unparks]
            + [g.id for g in model.groups])}

    def inter_arcs_from_transfer(self, machine: str) -> list[FlowArc]:
        return [a for a in self.arcs_from.get((machine, Stage.TRANSFER), []) if not a.intra]


_VIEWS: dict[int, _ModelView] = {}


def _view(model: FMModel) -> _ModelView:
    key = id(model)
    view = _VIEWS.get(key)
    if view is None or view.model is not model:
        view = _ModelView(model)
        _VIEWS[key] = view
    return view


# ---------------------------------------------------------------------------
# Operations


def init_state(model: FMModel) -> ExecState:
    """Initial state: declared things placed, powers set, clocks idle."""
    problems = validate(model)
    if problems:
        raise ModelError(f"invalid model: {problems[0]}")
    state = ExecState()
    for m in model.machines:
        state.power[m.id] = m.initial_power
    for c in model.clocks:
        cs = ClockState()
        if c.init_duration is not None:
            cs = ClockState(status=RUNNING, started_at=0, duration=c.init_duration,
                            deadline=c.init_duration)
        state.clocks[c.id] = cs
    for decl in model.initial_things:
        machine = model.machine(decl.machine)
        kind = decl.kind or machine.thing_kind or machine.id
        thing = Thing(id=f"t{state.next_thing}", kind=kind,
                      attrs=freeze_attrs(decl.attrs),
                      direction=IN if decl.place is Stage.TRANSFER else None)
        state.next_thing += 1
        if decl.place == STORAGE:
            state.storage(decl.machine).append(thing)
        else:
            state.at(decl.machine, decl.place).append(thing)
    return state


def _power_on(state: ExecState, machine: str) -> bool:
    return state.power.get(machine, Power.ON) is Power.ON


def _move_legal(state: ExecState, arc: FlowArc, thing: Thing) -> bool:
    if arc.src_stage is Stage.TRANSFER:
        if arc.intra and thing.direction != IN:
            return False
        if not arc.intra and thing.direction != OUT:
            return False
    return True


def enabled_actions(state: ExecState, model: FMModel) -> list[Action]:
    """Every legal next action, in the canonical deterministic order.

    Timeouts come first, then the head of the pending-trigger queue, then
    thing movements ordered by machine declaration, placement (storage,
    then create < receive < process < release < transfer), thing arrival,
    and action kind (unpark, park, move, group, exit).
    """
    view = _view(model)
    actions: list[Action] = []

    for clock in model.clocks:
        cs = state.clocks.get(clock.id)
        if cs and cs.status == RUNNING and cs.deadline is not None and cs.deadline < state.now:
            actions.append(TimeoutAction(clock.id))

    if state.pending:
        actions.append(FireTriggerAction(state.pending[0][0]))

    keyed: list[tuple[tuple, Action]] = []
    KIND_UNPARK, KIND_PARK, KIND_MOVE, KIND_GROUP, KIND_EXIT = range(5)

    for m in model.machines:
        midx = view.machine_index[m.id]
        if not _power_on(state, m.id):
            continue
        stored = state.storages.get(m.id, [])
        if stored:
            head = stored[0]
            for rule in view.unparks_of.get(m.id, []):
                if rule.id in view.grouped:
                    continue
                if rule.to_stage not in m.stage_set():
                    continue
                if _guard_holds(rule.guard, state, model, head.attrs):
                    keyed.append(((midx, 0, 0, KIND_UNPARK,
                                   view.element_order.get(rule.id, 0)),
                                  UnparkAction(rule.id, head.id)))
        for stage in (Stage.CREATE, Stage.RECEIVE, Stage.PROCESS,
                      Stage.RELEASE, Stage.TRANSFER):
            things = state.placements.get((m.id, stage), [])
            for pos, thing in enumerate(things):
                porder = PLACE_ORDER[stage]
                for rule in view.parks_from.get((m.id, stage), []):
                    if rule.id in view.grouped:
                        continue
                    if _guard_holds(rule.guard, state, model, thing.attrs):
                        keyed.append(((midx, porder, pos, KIND_PARK,
                                       view.element_order.get(rule.id, 0)),
                                      ParkAction(rule.id, thing.id)))
                moved = False
                for arc in view.arcs_from.get((m.id, stage), []):
                    if arc.id in view.grouped:
                        continue
                    if not _power_on(state, arc.dst_machine):
                        continue
                    if not _move_legal(state, arc, thing):
                        continue
                    moved = True
                    keyed.append(((midx, porder, pos, KIND_MOVE,
                                   view.element_order.get(arc.id, 0)),
                                  MoveAction(arc.id, thing.id)))
                if (stage is Stage.TRANSFER and thing.direction == OUT
                        and not view.inter_arcs_from_transfer(m.id)):
                    keyed.append(((midx, porder, pos, KIND_EXIT, 0),
                                  EnvExitAction(m.id, thing.id)))

    for gi, group in enumerate(model.groups):
        ok, anchor = _group_enabled(state, model, group)
        if ok:
            keyed.append(((anchor[0], anchor[1], 0, KIND_GROUP, gi),
                          GroupAction(group.id)))

    keyed.sort(key=lambda kv: kv[0])
    actions.extend(a for _, a in keyed)
    return actions


def _group_anchor(view: _ModelView, group: Group) -> tuple[int, int]:
    """(machine index, place order) of the group's first locatable constituent."""
    for cid in group.constituents:
        arc = view.arc_by_id.get(cid)
        if arc is not None and arc.src_stage is not None:
            return (view.machine_index[arc.src_machine], PLACE_ORDER[arc.src_stage])
        rule = view.unpark_by_id.get(cid)
        if rule is not None:
            return (view.machine_index[rule.machine], 0)
        park = view.park_by_id.get(cid)
        if park is not None:
            return (view.machine_index[park.machine], PLACE_ORDER[park.from_stage])
        trig = view.trigger_by_id.get(cid)
        if trig is not None:
            return (view.machine_index[trig.src_machine], PLACE_ORDER[trig.src_stage])
    return (0, 0)


def _group_enabled(state: ExecState, model: FMModel, group: Group) -> tuple[bool, tuple[int, int]]:
    view = _view(model)
    anchor = _group_anchor(view, group)
    if not _guard_holds(group.guard, state, model):
        return False, anchor
    probe = state.clone()
    try:
        _execute_group(probe, model, group, recorder=None)
    except ActionNotEnabled:
        return False, anchor
    return True, anchor


class _Recorder:
    def __init__(self, start_seq: int, time: int):
        self.seq = start_seq
        self.time = time
        self.records: list[MicroStepRecord] = []

    def emit(self, kind: str, subjects: Iterable[str], thing: Optional[str] = None,
             details: Optional[dict] = None) -> None:
        self.seq += 1
        detail_items = tuple(sorted((k, str(v)) for k, v in (details or {}).items()))
        self.records.append(MicroStepRecord(
            seq=self.seq, time=self.time, kind=kind, subjects=tuple(subjects),
            thing=thing, details=detail_items))


def _take(lst: list[Thing], thing_id: str) -> Thing:
    for i, t in enumerate(lst):
        if t.id == thing_id:
            return lst.pop(i)
    raise ActionNotEnabled(f"thing {thing_id} is not at the expected placement")


def _arrive(state: ExecState, model: FMModel, machine: str, stage: Stage,
            thing: Thing, suppressed: set[str]) -> None:
    """Place a thing at a stage and enqueue the stage's triggers."""
    state.at(machine, stage).append(thing)
    if not _power_on(state, machine):
        return
    view = _view(model)
    for trig in view.triggers_from.get((machine, stage), []):
        if trig.id in suppressed:
            continue
        if _guard_holds(trig.guard, state, model, thing.attrs):
            state.pending.append((trig.id, thing.attrs))


def _apply_move(state: ExecState, model: FMModel, arc: FlowArc, thing_id: str,
                recorder: Optional[_Recorder], suppressed: set[str]) -> None:
    if arc.src_stage is None or arc.dst_stage is None:
        raise ActionNotEnabled(f"arc {arc.id} has no executable stages")
    if not (_power_on(state, arc.src_machine) and _power_on(state, arc.dst_machine)):
        raise ActionNotEnabled(f"machine powered off for arc {arc.id}")
    src = state.at(arc.src_machine, arc.src_stage)
    found = next((t for t in src if t.id == thing_id), None)
    if found is None or not _move_legal(state, arc, found):
        raise ActionNotEnabled(f"no movable thing for arc {arc.id}")
    thing = _take(src, found.id)
    if arc.dst_stage is Stage.TRANSFER:
        direction = OUT if arc.intra else IN
    else:
        direction = None
    moved = replace(thing, direction=direction)
    if recorder:
        recorder.emit("move", (arc.id, stage_element(arc.dst_machine, arc.dst_stage)),
                      thing.id)
    _arrive(state, model, arc.dst_machine, arc.dst_stage, moved, suppressed)


def _head_for_arc(state: ExecState, arc: FlowArc) -> Optional[str]:
    if arc.src_stage is None:
        return None
    for t in state.placements.get((arc.src_machine, arc.src_stage), []):
        if _move_legal(state, arc, t):
            return t.id
    return None


def _create_thing(state: ExecState, model: FMModel, target: CreateTarget,
                  this_attrs, recorder: Optional[_Recorder], suppressed: set[str]) -> None:
    machine = model.machine(target.machine)
    attrs: dict[str, AttrValue] = {}
    ctx = _Ctx(state, model, this_attrs)
    for name, expr in target.attrs.items():
        attrs[name] = guards.eval_expr(expr, ctx)
    kind = machine.thing_kind or machine.id
    thing = Thing(id=f"t{state.next_thing}", kind=kind, attrs=freeze_attrs(attrs))
    state.next_thing += 1
    if recorder:
        recorder.emit("create", (stage_element(machine.id, Stage.CREATE),), thing.id,
                      details={"kind": kind, **{f"attr.{k}": _enc(v) for k, v in attrs.items()}})
    _arrive(state, model, machine.id, Stage.CREATE, thing, suppressed)


def _enc(value: AttrValue) -> str:
    return f'"{value}"' if isinstance(value, str) else str(value)


def _dec(text: str) -> AttrValue:
    if text.startswith('"') and text.endswith('"'):
        return text[1:-1]
    return int(text)


def _apply_effect(state: ExecState, model: FMModel, effect, this_attrs,
                  recorder: Optional[_Recorder], suppressed: set[str]) -> None:
    if isinstance(effect, CreateTarget):
        _create_thing(state, model, effect, this_attrs, recorder, suppressed)
    elif isinstance(effect, PowerTarget):
        old = state.power.get(effect.machine, Power.ON)
        state.power[effect.machine] = effect.power
        if recorder:
            recorder.emit("power-change", (effect.machine,), details={
                "power": effect.power.value,
                "noop": str(old is effect.power).lower()})
    elif isinstance(effect, ClockStart):
        state.clocks[effect.clock] = ClockState(
            status=RUNNING, started_at=state.now, duration=effect.duration,
            deadline=state.now + effect.duration)
        if recorder:
            recorder.emit("clock-start", (effect.clock,), details={
                "duration": effect.duration,
                "deadline": state.now + effect.duration})
    elif isinstance(effect, ClockStop):
        was = state.clocks[effect.clock].status
        state.clocks[effect.clock] = ClockState()
        if recorder:
            recorder.emit("clock-stop", (effect.clock,), details={
                "noop": str(was == IDLE).lower()})
    elif isinstance(effect, FireGroup):
        group = _view(model).group_by_id.get(effect.group)
        if group is None:
            raise ModelError(f"timeout names unknown group {effect.group}")
        ok, _ = _group_enabled(state, model, group)
        if ok:
            _execute_group(state, model, group, recorder)
    else:  # pragma: no cover - parser prevents this
        raise ModelError(f"unknown effect {effect!r}")


def _execute_group(state: ExecState, model: FMModel, group: Group,
                   recorder: Optional[_Recorder]) -> None:
    """Run a group's constituents in order as one uninterruptible action."""
    view = _view(model)
    suppressed = view.grouped
    last_arrival: dict[tuple[str, Stage], tuple] = {}

    for cid in group.constituents:
        arc = view.arc_by_id.get(cid)
        if arc is not None:
            head = _head_for_arc(state, arc)
            if head is None:
                raise ActionNotEnabled(f"group {group.id}: nothing to move on {cid}")
            src = state.at(arc.src_machine, arc.src_stage)
            thing = next(t for t in src if t.id == head)
            _apply_move(state, model, arc, head, recorder, suppressed)
            if arc.dst_stage is not None:
                last_arrival[(arc.dst_machine, arc.dst_stage)] = thing.attrs
            continue
        trig = view.trigger_by_id.get(cid)
        if trig is not None:
            this_attrs = last_arrival.get((trig.src_machine, trig.src_stage))
            if _guard_holds(trig.guard, state, model, this_attrs):
                if recorder:
                    recorder.emit("trigger-fire", (trig.id,))
                _apply_effect(state, model, trig.target, this_attrs, recorder, suppressed)
            continue
        park = view.park_by_id.get(cid)
        if park is not None:
            things = state.placements.get((park.machine, park.from_stage), [])
            if not things:
                raise ActionNotEnabled(f"group {group.id}: nothing to park via {cid}")
            thing = things[0]
            if not _guard_holds(park.guard, state, model, thing.attrs):
                raise ActionNotEnabled(f"group {group.id}: park guard fails for {cid}")
            _take(things, thing.id)
            state.storage(park.machine).append(replace(thing, direction=None))
            if recorder:
                recorder.emit("park", (park.id,), thing.id)
            continue
        rule = view.unpark_by_id.get(cid)
        if rule is not None:
            stored = state.storages.get(rule.machine, [])
            if not stored:
                raise ActionNotEnabled(f"group {group.id}: empty storage for {cid}")
            thing = stored[0]
            if not _guard_holds(rule.guard, state, model, thing.attrs):
                raise ActionNotEnabled(f"group {group.id}: unpark guard fails for {cid}")
            _take(stored, thing.id)
            if recorder:
                recorder.emit("unpark", (rule.id, stage_element(rule.machine, rule.to_stage)),
                              thing.id)
            _arrive(state, model, rule.machine, rule.to_stage,
                    replace(thing, direction=None), suppressed)
            last_arrival[(rule.machine, rule.to_stage)] = thing.attrs
            continue
        if cid.startswith("exit:"):
            mid = cid.split(":", 1)[1]
            things = state.placements.get((mid, Stage.TRANSFER), [])
            target = next((t for t in things if t.direction == OUT), None)
            if target is None:
                raise ActionNotEnabled(f"group {group.id}: nothing to release via {cid}")
            _take(things, target.id)
            state.env.append(replace(target, direction=None))
            if recorder:
                recorder.emit("move", (cid,), target.id, details={"env": "true"})
            continue
        raise ModelError(f"group {group.id} references unsupported element {cid}")


def step(state: ExecState, model: FMModel, action: Action) -> tuple[ExecState, list[MicroStepRecord]]:
    """Apply one enabled action; returns the new state and its micro-steps."""
    legal = enabled_actions(state, model)
    if action not in legal:
        raise ActionNotEnabled(f"{action_label(action)} is not enabled")
    return _apply(state, model, action, seq_base=0)


def _apply(state: ExecState, model: FMModel, action: Action,
           seq_base: int) -> tuple[ExecState, list[MicroStepRecord]]:
    view = _view(model)
    out = state.clone()
    rec = _Recorder(seq_base, out.now)
    suppressed = view.grouped

    if isinstance(action, TimeoutAction):
        cs = out.clocks[action.clock]
        out.clocks[action.clock] = ClockState(status=EXPIRED, started_at=cs.started_at,
                                              duration=cs.duration, deadline=None)
        rec.emit("timeout", (timeout_element(action.clock),))
        for rule in view.timeout_rules.get(action.clock, []):
            _apply_effect(out, model, rule.effect, None, rec, suppressed)
    elif isinstance(action, FireTriggerAction):
        trigger_id, this_attrs = out.pending.popleft()
        trig = view.trigger_by_id[trigger_id]
        rec.emit("trigger-fire", (trigger_id,))
        _apply_effect(out, model, trig.target, this_attrs, rec, suppressed)
    elif isinstance(action, MoveAction):
        _apply_move(out, model, view.arc_by_id[action.arc], action.thing, rec, suppressed)
    elif isinstance(action, ParkAction):
        rule = view.park_by_id[action.rule]
        thing = _take(out.at(rule.machine, rule.from_stage), action.thing)
        out.storage(rule.machine).append(replace(thing, direction=None))
        rec.emit("park", (rule.id,), thing.id)
    elif isinstance(action, UnparkAction):
        rule = view.unpark_by_id[action.rule]
        thing = _take(out.storage(rule.machine), action.thing)
        rec.emit("unpark", (rule.id, stage_element(rule.machine, rule.to_stage)), thing.id)
        _arrive(out, model, rule.machine, rule.to_stage,
                replace(thing, direction=None), suppressed)
    elif isinstance(action, EnvExitAction):
        thing = _take(out.at(action.machine, Stage.TRANSFER), action.thing)
        out.env.append(replace(thing, direction=None))
        rec.emit("move", (exit_element(action.machine),), thing.id, details={"env": "true"})
    elif isinstance(action, GroupAction):
        _execute_group(out, model, view.group_by_id[action.group], rec)
    else:  # pragma: no cover
        raise ActionNotEnabled(f"unknown action {action!r}")
    return out, rec.records


# ---------------------------------------------------------------------------
# Deterministic runs


MOMENT_STEP_CAP = 100_000


def run(model: FMModel, schedule: list[ScheduleEntry], horizon: int) -> Trace:
    """Deterministic run: per moment, apply injections, then exhaust actions.

    Time advances to the next moment with work (an injection or a deadline
    strictly passed). A repeated state inside one moment raises
    DivergenceError.
    """
    state = init_state(model)
    records: list[MicroStepRecord] = []
    warnings: list[str] = []
    entries = sorted(
        (e for e in schedule if e.time <= horizon),
        key=lambda e: e.time)
    view = _view(model)
    idx = 0
    seq = 0

    def drain_moment() -> None:
        nonlocal seq
        seen = {state.snapshot()}
        for _ in range(MOMENT_STEP_CAP):
            actions = enabled_actions(state, model)
            if not actions:
                return
            new_state, recs = _apply(state, model, actions[0], seq)
            seq += len(recs)
            records.extend(recs)
            _absorb(state, new_state)
            key = state.snapshot()
            if key in seen:
                raise DivergenceError(state.now, key)
            seen.add(key)
        raise DivergenceError(state.now, state.snapshot())

    while True:
        while idx < len(entries) and entries[idx].time == state.now:
            entry = entries[idx]
            idx += 1
            seq = _apply_entry(state, model, view, entry, records, warnings, seq)
        drain_moment()
        next_times = []
        if idx < len(entries):
            next_times.append(entries[idx].time)
        for cs in state.clocks.values():
            if cs.status == RUNNING and cs.deadline is not None and cs.deadline + 1 > state.now:
                next_times.append(cs.deadline + 1)
        next_times = [t for t in next_times if t <= horizon]
        if not next_times:
            break
        state.now = min(next_times)

    return Trace(model=model, records=records, final_state=state, warnings=warnings)


def _apply_entry(state: ExecState, model: FMModel, view: _ModelView,
                 entry: ScheduleEntry, records: list[MicroStepRecord],
                 warnings: list[str], seq: int) -> int:
    rec = _Recorder(seq, state.now)
    if entry.kind == "inject":
        if entry.target not in view.machines:
            raise ModelError(f"schedule injects into unknown machine {entry.target}")
        machine = view.machines[entry.target]
        stage = entry.stage or Stage.TRANSFER
        if stage not in machine.stage_set():
            raise ModelError(f"machine {entry.target} has no {stage.value} stage")
        kind = machine.thing_kind or machine.id
        thing = Thing(id=f"t{state.next_thing}", kind=kind, attrs=entry.attrs,
                      direction=IN if stage is Stage.TRANSFER else None)
        state.next_thing += 1
        rec.emit("injection", (stage_element(machine.id, stage),), thing.id,
                 details={"kind": kind,
                          **{f"attr.{k}": _enc(v) for k, v in entry.attrs}})
        state.at(machine.id, stage).append(thing)
        if _power_on(state, machine.id):
            for trig in view.triggers_from.get((machine.id, stage), []):
                if trig.id in view.grouped:
                    continue
                if _guard_holds(trig.guard, state, model, thing.attrs):
                    state.pending.append((trig.id, thing.attrs))
        records.extend(rec.records)
        return rec.seq
    # "fire": attempt a named group action (translated nets' external firings).
    name = entry.target
    group = view.group_by_id.get(name) or view.group_by_id.get(f"fire_{name}")
    if group is None:
        warnings.append(f"t={state.now}: no group for scheduled firing {name}; skipped")
        return seq
    ok, _ = _group_enabled(state, model, group)
    if not ok:
        warnings.append(f"t={state.now}: scheduled firing {name} not enabled; dropped")
        return seq
    _execute_group(state, model, group, rec)
    records.extend(rec.records)
    return rec.seq


def _absorb(target: ExecState, source: ExecState) -> None:
    target.now = source.now
    target.placements = source.placements
    target.storages = source.storages
    target.env = source.env
    target.power = source.power
    target.clocks = source.clocks
    target.pending = source.pending
    target.next_thing = source.next_thing


# ---------------------------------------------------------------------------
# Exhaustive exploration (untimed models)


def explore(model: FMModel, max_depth: int = 10_000,
            max_states: int = 100_000) -> StateGraph:
    """Breadth-first closure over all action interleavings.

    Clocked models are refused; their state spaces are unbounded in time.
    Canonical states ignore thing identities and the environment pool
    (released things are inert).
    """
    if model.clocks or model.timeouts:
        raise ModelError("explore() supports untimed models only")
    initial = init_state(model)
    key0 = initial.snapshot(include_env=False)
    graph = StateGraph(nodes=[key0], initial=0)
    index = {key0: 0}
    states = {0: initial}
    frontier = deque([(0, 0)])
    while frontier:
        at, depth = frontier.popleft()
        if depth >= max_depth:
            graph.truncated = True
            continue
        state = states[at]
        for action in enabled_actions(state, model):
            nxt, recs = _apply(state, model, action, 0)
            key = nxt.snapshot(include_env=False)
            existing = index.get(key)
            if existing is None:
                if len(graph.nodes) >= max_states:
                    graph.truncated = True
                    continue
                existing = len(graph.nodes)
                index[key] = existing
                graph.nodes.append(key)
                states[existing] = nxt
                frontier.append((existing, depth + 1))
            graph.edges.append(Edge(
                src=at, label=action_label(action), dst=existing,
                step_subjects=tuple(r.subjects for r in recs)))
    return graph


# ---------------------------------------------------------------------------
# Trace serialization and replay


def serialize_trace(trace: Trace) -> str:
    """Line-delimited micro-steps; byte-stable for the determinism check."""
    lines = []
    for r in trace.records:
        details = ";".join(f"{k}={v}" for k, v in r.details) or "-"
        lines.append("\t".join([
            str(r.seq), str(r.time), r.kind, ",".join(r.subjects),
            r.thing or "-", details]))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trace(text: str) -> list[MicroStepRecord]:
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        seq, time, kind, subjects, thing, details = line.split("\t")
        detail_items = tuple(
            tuple(item.split("=", 1)) for item in details.split(";")) if details != "-" else ()
        records.append(MicroStepRecord(
            seq=int(seq), time=int(time), kind=kind,
            subjects=tuple(subjects.split(",")) if subjects else (),
            thing=None if thing == "-" else thing,
            details=detail_items))
    return records


def replay(model: FMModel, records: list[MicroStepRecord]) -> ExecState:
    """Mechanically re-apply recorded micro-steps from the initial state."""
    view = _view(model)
    state = init_state(model)
    for r in records:
        state.now = r.time
        if r.kind == "injection" or r.kind == "create":
            element = r.subjects[0]
            machine, stage_name = element.rsplit(".", 1)
            stage = Stage(stage_name)
            attrs = {}
            kind = None
            for k, v in r.details:
                if k == "kind":
                    kind = v
                elif k.startswith("attr."):
                    attrs[k[5:]] = _dec(v)
            thing = Thing(id=r.thing, kind=kind or machine,
                          attrs=freeze_attrs(attrs),
                          direction=IN if stage is Stage.TRANSFER else None)
            state.at(machine, stage).append(thing)
        elif r.kind == "move":
            if r.detail("env") == "true":
                mid = r.subjects[0].split(":", 1)[1]
                thing = _take(state.at(mid, Stage.TRANSFER), r.thing)
                state.env.append(replace(thing, direction=None))
            else:
                arc = view.arc_by_id[r.subjects[0]]
                thing = _take(state.at(arc.src_machine, arc.src_stage), r.thing)
                if arc.dst_stage is Stage.TRANSFER:
                    direction = OUT if arc.intra else IN
                else:
                    direction = None
                state.at(arc.dst_machine, arc.dst_stage).append(
                    replace(thing, direction=direction))
        elif r.kind == "park":
            rule = view.park_by_id[r.subjects[0]]
            thing = _take(state.at(rule.machine, rule.from_stage), r.thing)
            state.storage(rule.machine).append(replace(thing, direction=None))
        elif r.kind == "unpark":
            rule = view.unpark_by_id[r.subjects[0]]
            thing = _take(state.storage(rule.machine), r.thing)
            state.at(rule.machine, rule.to_stage).append(replace(thing, direction=None))
        elif r.kind == "power-change":
            state.power[r.subjects[0]] = Power(r.detail("power"))
        elif r.kind == "clock-start":
            duration = int(r.detail("duration"))
            state.clocks[r.subjects[0]] = ClockState(
                status=RUNNING, started_at=r.time, duration=duration,
                deadline=int(r.detail("deadline")))
        elif r.kind == "clock-stop":
            state.clocks[r.subjects[0]] = ClockState()
        elif r.kind == "timeout":
            clock = r.subjects[0].split(":", 1)[1]
            cs = state.clocks[clock]
            state.clocks[clock] = ClockState(status=EXPIRED, started_at=cs.started_at,
                                             duration=cs.duration, deadline=None)
        elif r.kind == "trigger-fire":
            pass  # effects carry their own records
        else:  # pragma: no cover
            raise ModelError(f"cannot replay record kind {r.kind}")
        if r.thing is not None:
            number = int(r.thing[1:]) if r.thing[1:].isdigit() else 0
            state.next_thing = max(state.next_thing, number + 1)
    return state


def conservation_holds(trace: Trace) -> bool:
    """Things are never destroyed: final count = initial + created + injected."""
    initial = len(trace.model.initial_things)
    created = sum(1 for r in trace.records if r.kind == "create")
    injected = sum(1 for r in trace.records if r.kind == "injection")
    final = len(trace.final_state.things_everywhere())
    return final == initial + created + injected
