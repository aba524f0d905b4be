"""Text formats: the FM and PN DSLs, PNML ingestion, schedules, mappings.

Both DSLs are line-oriented. Every diagnostic carries a source span; parsing
is syntax-plus-reference checking only, deeper structure rules live in
validate() / validate_net().
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Union

from . import guards
from .events import ControlEdge, ControlGraph, Event, EventError, EventSet
from .fmexec import ScheduleEntry
from .fmmodel import (
    STORAGE, Clock, ClockStart, ClockStop, CreateTarget, FMModel, FireGroup,
    FlowArc, Group, InitialThing, Machine, ParkRule, Power, PowerTarget,
    Stage, TimeoutRule, TriggerArc, UnparkRule, element_index,
)
from .pnmodel import Arc, Net, Place, Transition


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int
    col_start: int
    col_end: int

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.col_start}-{self.col_end}"


@dataclass(frozen=True)
class Diagnostic:
    span: SourceSpan
    message: str

    def __str__(self) -> str:
        return f"{self.span}: {self.message}"


class ParseError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics[:5]))
        self.diagnostics = diagnostics


class UnsupportedFeature(Exception):
    """Raised for PNML constructs outside the ingested subset."""


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<comment>\#.*)
      | (?P<string>"[^"]*")
      | (?P<punct><->|->|=>|<=|>=|!=|[{}(),=<>+\-*:])
      | (?P<word>[A-Za-z0-9_][A-Za-z0-9_./]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # string | punct | word
    text: str
    col: int


def _tokenize(line: str, lineno: int, filename: str,
              diags: list[Diagnostic]) -> list[Token]:
    tokens: list[Token] = []
    pos = 0
    while pos < len(line):
        m = _TOKEN_RE.match(line, pos)
        if m is None:
            diags.append(Diagnostic(
                SourceSpan(filename, lineno, pos + 1, pos + 2),
                f"unexpected character {line[pos]!r}"))
            pos += 1
            continue
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), m.start() + 1))
        pos = m.end()
    return tokens


class _Cursor:
    def __init__(self, tokens: list[Token], lineno: int, filename: str, raw: str):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno
        self.filename = filename
        self.raw = raw

    def span(self, token: Optional[Token] = None) -> SourceSpan:
        if token is None:
            col = self.tokens[-1].col + len(self.tokens[-1].text) if self.tokens else 1
            return SourceSpan(self.filename, self.lineno, col, col + 1)
        return SourceSpan(self.filename, self.lineno, token.col, token.col + len(token.text))

    def line_span(self) -> SourceSpan:
        return SourceSpan(self.filename, self.lineno, 1, max(2, len(self.raw) + 1))

    def peek(self) -> Optional[Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Token:
        token = self.peek()
        if token is None:
            raise _LineError(self.span(), "unexpected end of line")
        self.pos += 1
        return token

    def expect(self, text: str) -> Token:
        token = self.next()
        if token.text != text:
            raise _LineError(self.span(token), f"expected {text!r}, found {token.text!r}")
        return token

    def expect_word(self, what: str = "name") -> Token:
        token = self.next()
        if token.kind != "word":
            raise _LineError(self.span(token), f"expected {what}, found {token.text!r}")
        return token

    def expect_int(self) -> int:
        token = self.expect_word("integer")
        if not token.text.isdigit():
            raise _LineError(self.span(token), f"expected integer, found {token.text!r}")
        return int(token.text)

    def at_word(self, text: str) -> bool:
        token = self.peek()
        return token is not None and token.text == text

    def take_word(self, text: str) -> bool:
        if self.at_word(text):
            self.pos += 1
            return True
        return False

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def expect_done(self) -> None:
        if not self.done():
            token = self.peek()
            raise _LineError(self.span(token), f"trailing input {token.text!r}")


class _LineError(Exception):
    def __init__(self, span: SourceSpan, message: str):
        super().__init__(message)
        self.span = span
        self.message = message


# ---------------------------------------------------------------------------
# Guard / expression parsing


class _PowerRef:
    def __init__(self, machine: str):
        self.machine = machine


def _parse_guard(cur: _Cursor):
    node = _parse_and(cur)
    while cur.take_word("or"):
        node = guards.Or(node, _parse_and(cur))
    return node


def _parse_and(cur: _Cursor):
    node = _parse_bool_unit(cur)
    while cur.take_word("and"):
        node = guards.And(node, _parse_bool_unit(cur))
    return node


def _parse_bool_unit(cur: _Cursor):
    if cur.take_word("not"):
        return guards.Not(_parse_bool_unit(cur))
    token = cur.peek()
    if token is not None and token.text == "(":
        saved = cur.pos
        cur.next()
        try:
            inner = _parse_guard(cur)
            cur.expect(")")
            return inner
        except _LineError:
            cur.pos = saved
    if token is not None and token.kind == "word":
        if token.text == "running":
            cur.next()
            cur.expect("(")
            clock = cur.expect_word("clock id").text
            cur.expect(")")
            return guards.Running(clock)
        if token.text == "expired":
            cur.next()
            cur.expect("(")
            clock = cur.expect_word("clock id").text
            cur.expect(")")
            return guards.Expired(clock)
        if token.text == "idle":
            cur.next()
            cur.expect("(")
            machine = cur.expect_word("machine id").text
            cur.expect(")")
            return guards.Idle(machine)
    left = _parse_arith(cur)
    op_token = cur.next()
    if op_token.text not in ("=", "!=", "<", "<=", ">", ">="):
        raise _LineError(cur.span(op_token), f"expected comparison, found {op_token.text!r}")
    if isinstance(left, _PowerRef):
        value = cur.expect_word("on|off").text
        if value not in ("on", "off"):
            raise _LineError(cur.span(), "power compares with on or off")
        on = value == "on"
        if op_token.text == "=":
            return guards.PowerIs(left.machine, on)
        if op_token.text == "!=":
            return guards.PowerIs(left.machine, not on)
        raise _LineError(cur.span(op_token), "power supports = and != only")
    right = _parse_arith(cur)
    if isinstance(right, _PowerRef):
        raise _LineError(cur.span(op_token), "power() belongs on the left of a comparison")
    return guards.Compare(op_token.text, left, right)


def _parse_arith(cur: _Cursor):
    node = _parse_term(cur)
    while True:
        token = cur.peek()
        if token is not None and token.text in ("+", "-"):
            cur.next()
            node = guards.BinOp(token.text, node, _parse_term(cur))
        else:
            return node


def _parse_term(cur: _Cursor):
    node = _parse_factor(cur)
    while True:
        token = cur.peek()
        if token is not None and token.text == "*":
            cur.next()
            node = guards.BinOp("*", node, _parse_factor(cur))
        else:
            return node


def _parse_factor(cur: _Cursor):
    token = cur.next()
    if token.kind == "string":
        return guards.StrLit(token.text[1:-1])
    if token.text == "(":
        inner = _parse_arith(cur)
        cur.expect(")")
        return inner
    if token.kind != "word":
        raise _LineError(cur.span(token), f"expected expression, found {token.text!r}")
    text = token.text
    if text.isdigit():
        return guards.IntLit(int(text))
    if text == "count":
        cur.expect("(")
        ref = cur.expect_word("machine.place").text
        cur.expect(")")
        machine, _, place = ref.rpartition(".")
        if not machine:
            raise _LineError(cur.span(token), "count() needs machine.stage or machine.storage")
        return guards.Count(machine, place)
    if text == "sum":
        cur.expect("(")
        ref = cur.expect_word("machine.storage.attr").text
        cur.expect(")")
        parts = ref.split(".")
        if len(parts) != 3 or parts[1] != STORAGE:
            raise _LineError(cur.span(token), "sum() needs machine.storage.attr")
        return guards.SumStorage(parts[0], parts[2])
    if text == "elapsed":
        cur.expect("(")
        clock = cur.expect_word("clock id").text
        cur.expect(")")
        return guards.Elapsed(clock)
    if text == "power":
        cur.expect("(")
        machine = cur.expect_word("machine id").text
        cur.expect(")")
        return _PowerRef(machine)
    if text.startswith("this."):
        return guards.ThisAttr(text[5:])
    raise _LineError(cur.span(token), f"unknown identifier {text!r} in expression")


def parse_guard(text: str, filename: str = "<guard>"):
    """Parse a standalone guard expression (test and tooling helper)."""
    diags: list[Diagnostic] = []
    tokens = _tokenize(text, 1, filename, diags)
    if diags:
        raise ParseError(diags)
    cur = _Cursor(tokens, 1, filename, text)
    try:
        node = _parse_guard(cur)
        cur.expect_done()
    except _LineError as err:
        raise ParseError([Diagnostic(err.span, err.message)]) from None
    return node


# ---------------------------------------------------------------------------
# FM DSL


@dataclass
class ParsedFM:
    model: FMModel
    events: EventSet
    control: Optional[ControlGraph]
    mapping: dict[str, str] = field(default_factory=dict)  # transition -> event


_STAGE_NAMES = {s.value: s for s in Stage}


class _FMParser:
    def __init__(self, filename: str):
        self.filename = filename
        self.model = FMModel()
        self.events: list[Event] = []
        self.control_start: Optional[str] = None
        self.control_edges: list[ControlEdge] = []
        self.mapping: dict[str, str] = {}
        self.diags: list[Diagnostic] = []
        self.used_ids: set[str] = set()
        self.counters = {"f": 0, "t": 0, "pk": 0, "up": 0, "to": 0}
        self.spans: dict[str, SourceSpan] = {}
        self.event_spans: dict[str, SourceSpan] = {}

    def fresh_id(self, prefix: str) -> str:
        while True:
            self.counters[prefix] += 1
            candidate = f"{prefix}{self.counters[prefix]}"
            if candidate not in self.used_ids:
                return candidate

    def claim(self, name: str, span: SourceSpan) -> str:
        if name in self.used_ids:
            self.diags.append(Diagnostic(span, f"duplicate id {name!r}"))
        self.used_ids.add(name)
        self.spans[name] = span
        return name

    def optional_id(self, cur: _Cursor, prefix: str) -> str:
        token = cur.peek()
        if (token is not None and token.kind == "word"
                and cur.pos + 1 < len(cur.tokens)
                and cur.tokens[cur.pos + 1].text == ":"):
            cur.next()
            cur.next()
            return self.claim(token.text, cur.span(token))
        return self.claim(self.fresh_id(prefix), cur.line_span())

    def stage_ref(self, cur: _Cursor) -> tuple[str, Stage]:
        token = cur.expect_word("machine.stage")
        machine, _, stage_name = token.text.rpartition(".")
        if not machine or stage_name not in _STAGE_NAMES:
            raise _LineError(cur.span(token), f"expected machine.stage, found {token.text!r}")
        return machine, _STAGE_NAMES[stage_name]

    def opt_guard(self, cur: _Cursor):
        if cur.take_word("if"):
            return _parse_guard(cur)
        return None

    def attr_literals(self, cur: _Cursor) -> dict[str, Union[int, str]]:
        attrs: dict[str, Union[int, str]] = {}
        if not cur.at_word("{") and not (cur.peek() and cur.peek().text == "{"):
            return attrs
        cur.expect("{")
        while not cur.take_word("}") and not (cur.peek() and cur.peek().text == "}"):
            if cur.peek() and cur.peek().text == "}":
                break
            name = cur.expect_word("attribute name").text
            cur.expect("=")
            token = cur.next()
            if token.kind == "string":
                attrs[name] = token.text[1:-1]
            elif token.kind == "word" and token.text.isdigit():
                attrs[name] = int(token.text)
            else:
                raise _LineError(cur.span(token), "attribute values are integers or strings")
            if not cur.take_word(",") and not (cur.peek() and cur.peek().text == ","):
                break
            if cur.peek() and cur.peek().text == ",":
                cur.next()
        if cur.peek() and cur.peek().text == "}":
            cur.next()
        return attrs

    def attr_templates(self, cur: _Cursor) -> dict[str, object]:
        attrs: dict[str, object] = {}
        if not (cur.peek() and cur.peek().text == "{"):
            return attrs
        cur.expect("{")
        while True:
            if cur.peek() and cur.peek().text == "}":
                cur.next()
                break
            name = cur.expect_word("attribute name").text
            cur.expect("=")
            attrs[name] = _parse_arith(cur)
            if cur.peek() and cur.peek().text == ",":
                cur.next()
                continue
        return attrs

    # -- line handlers ------------------------------------------------------

    def parse_line(self, cur: _Cursor) -> None:
        head = cur.expect_word("keyword")
        handler = getattr(self, f"line_{head.text}", None)
        if handler is None:
            raise _LineError(cur.span(head), f"unknown keyword {head.text!r}")
        handler(cur)
        cur.expect_done()

    def line_sphere(self, cur: _Cursor) -> None:
        self.model.spheres.append(cur.expect_word("sphere path").text)

    def line_machine(self, cur: _Cursor) -> None:
        name = cur.expect_word("machine id")
        mid = self.claim(name.text, cur.span(name))
        cur.expect("in")
        sphere = cur.expect_word("sphere path").text
        kind = None
        if cur.take_word("kind"):
            kind = cur.expect_word("thing kind").text
        cur.expect("stages")
        stages: list[Stage] = []
        while True:
            token = cur.expect_word("stage name")
            if token.text not in _STAGE_NAMES:
                raise _LineError(cur.span(token), f"unknown stage {token.text!r}")
            stages.append(_STAGE_NAMES[token.text])
            if cur.peek() and cur.peek().text == ",":
                cur.next()
                continue
            break
        storage = cur.take_word("storage")
        power = Power.ON
        if cur.take_word("power"):
            value = cur.expect_word("on|off").text
            if value not in ("on", "off"):
                raise _LineError(cur.span(), "power is on or off")
            power = Power(value)
        self.model.machines.append(Machine(
            id=mid, sphere=sphere, thing_kind=kind, stages=tuple(stages),
            has_storage=storage, initial_power=power))

    def line_clock(self, cur: _Cursor) -> None:
        name = cur.expect_word("clock id")
        cid = self.claim(name.text, cur.span(name))
        init = None
        if cur.take_word("init"):
            init = cur.expect_int()
        self.model.clocks.append(Clock(id=cid, init_duration=init))

    def line_flow(self, cur: _Cursor) -> None:
        fid = self.optional_id(cur, "f")
        src = cur.expect_word("endpoint")
        cur.expect("->")
        dst = cur.expect_word("endpoint")
        label = None
        if cur.take_word("label"):
            token = cur.next()
            if token.kind != "string":
                raise _LineError(cur.span(token), "label needs a quoted string")
            label = token.text[1:-1]

        def endpoint(text: str, token_span) -> tuple[str, Optional[Stage]]:
            machine, _, stage_name = text.rpartition(".")
            if machine and stage_name in _STAGE_NAMES:
                return machine, _STAGE_NAMES[stage_name]
            if "." in text:
                raise _LineError(token_span, f"unknown stage in {text!r}")
            return text, None

        src_m, src_s = endpoint(src.text, cur.span(src))
        dst_m, dst_s = endpoint(dst.text, cur.span(dst))
        self.model.flows.append(FlowArc(id=fid, src_machine=src_m, src_stage=src_s,
                                        dst_machine=dst_m, dst_stage=dst_s, label=label))

    def line_trigger(self, cur: _Cursor) -> None:
        tid = self.optional_id(cur, "t")
        machine, stage = self.stage_ref(cur)
        cur.expect("=>")
        target = self.parse_target(cur)
        guard = self.opt_guard(cur)
        self.model.triggers.append(TriggerArc(
            id=tid, src_machine=machine, src_stage=stage, target=target, guard=guard))

    def parse_target(self, cur: _Cursor):
        keyword = cur.expect_word("trigger target")
        if keyword.text == "create":
            machine = cur.expect_word("machine id").text
            attrs = self.attr_templates(cur)
            return CreateTarget(machine=machine, attrs=attrs)
        if keyword.text == "power":
            machine = cur.expect_word("machine id").text
            value = cur.expect_word("on|off").text
            if value not in ("on", "off"):
                raise _LineError(cur.span(), "power is on or off")
            return PowerTarget(machine=machine, power=Power(value))
        if keyword.text == "clock":
            clock = cur.expect_word("clock id").text
            verb = cur.expect_word("start|stop").text
            if verb == "start":
                return ClockStart(clock=clock, duration=cur.expect_int())
            if verb == "stop":
                return ClockStop(clock=clock)
            raise _LineError(cur.span(), f"unknown clock action {verb!r}")
        raise _LineError(cur.span(keyword), f"unknown trigger target {keyword.text!r}")

    def line_park(self, cur: _Cursor) -> None:
        pid = self.optional_id(cur, "pk")
        machine, stage = self.stage_ref(cur)
        guard = self.opt_guard(cur)
        self.model.parks.append(ParkRule(id=pid, machine=machine, from_stage=stage,
                                         guard=guard))

    def line_unpark(self, cur: _Cursor) -> None:
        uid = self.optional_id(cur, "up")
        machine = cur.expect_word("machine id").text
        cur.expect("to")
        stage_token = cur.expect_word("stage")
        if stage_token.text not in _STAGE_NAMES:
            raise _LineError(cur.span(stage_token), f"unknown stage {stage_token.text!r}")
        guard = self.opt_guard(cur)
        self.model.unparks.append(UnparkRule(
            id=uid, machine=machine, to_stage=_STAGE_NAMES[stage_token.text], guard=guard))

    def line_timeout(self, cur: _Cursor) -> None:
        tid = self.optional_id(cur, "to")
        clock = cur.expect_word("clock id").text
        cur.expect("=>")
        if cur.take_word("fire"):
            effect = FireGroup(group=cur.expect_word("group id").text)
        else:
            effect = self.parse_target(cur)
        self.model.timeouts.append(TimeoutRule(id=tid, clock=clock, effect=effect))

    def line_group(self, cur: _Cursor) -> None:
        name = cur.expect_word("group id")
        gid = self.claim(name.text, cur.span(name))
        cur.expect("{")
        constituents: list[str] = []
        while True:
            token = cur.next()
            if token.text == "}":
                break
            if token.text == ",":
                continue
            if token.kind != "word":
                raise _LineError(cur.span(token), f"expected element id, found {token.text!r}")
            text = token.text
            if cur.peek() and cur.peek().text == ":":  # exit:machine style ids
                cur.next()
                text += ":" + cur.expect_word("machine id").text
            constituents.append(text)
        guard = self.opt_guard(cur)
        self.model.groups.append(Group(id=gid, constituents=tuple(constituents), guard=guard))

    def line_thing(self, cur: _Cursor) -> None:
        cur.expect("at")
        token = cur.expect_word("machine.place")
        machine, _, place_name = token.text.rpartition(".")
        if not machine:
            raise _LineError(cur.span(token), "expected machine.stage or machine.storage")
        if place_name == STORAGE:
            place: Union[Stage, str] = STORAGE
        elif place_name in _STAGE_NAMES:
            place = _STAGE_NAMES[place_name]
        else:
            raise _LineError(cur.span(token), f"unknown place {place_name!r}")
        attrs = self.attr_literals(cur)
        kind = None
        if cur.take_word("kind"):
            kind = cur.expect_word("thing kind").text
        self.model.initial_things.append(InitialThing(
            machine=machine, place=place, attrs=attrs, kind=kind))

    def element_ref(self, cur: _Cursor) -> str:
        token = cur.expect_word("element id")
        text = token.text
        if cur.peek() and cur.peek().text == ":":
            cur.next()
            text += ":" + cur.expect_word("element id").text
        return text

    def line_event(self, cur: _Cursor) -> None:
        name = cur.expect_word("event id")
        eid = name.text
        if eid in self.event_spans:
            self.diags.append(Diagnostic(cur.span(name), f"duplicate event id {eid!r}"))
        self.event_spans[eid] = cur.span(name)
        cur.expect("anchor")
        anchor = self.element_ref(cur)
        region: list[str] = []
        if cur.take_word("region"):
            cur.expect("{")
            while True:
                token = cur.peek()
                if token is None:
                    raise _LineError(cur.span(), "unterminated region")
                if token.text == "}":
                    cur.next()
                    break
                if token.text == ",":
                    cur.next()
                    continue
                region.append(self.element_ref(cur))
        window = None
        if cur.take_word("window"):
            token = cur.expect_word("a..b")
            parts = token.text.split("..")
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise _LineError(cur.span(token), "window is <min>..<max>")
            window = (int(parts[0]), int(parts[1]))
        if anchor not in region:
            region = [anchor] + region
        try:
            self.events.append(Event(id=eid, anchor=anchor, region=tuple(region),
                                     window=window))
        except EventError as err:
            self.diags.append(Diagnostic(self.event_spans[eid], str(err)))

    def line_control(self, cur: _Cursor) -> None:
        cur.expect("start")
        token = cur.expect_word("event id")
        if self.control_start is not None:
            self.diags.append(Diagnostic(cur.span(token), "control start declared twice"))
        self.control_start = token.text

    def line_edge(self, cur: _Cursor) -> None:
        src = cur.expect_word("event id").text
        cur.expect("->")
        dst = cur.expect_word("event id").text
        guard = self.opt_guard(cur)
        self.control_edges.append(ControlEdge(src=src, dst=dst, guard=guard))

    def line_map(self, cur: _Cursor) -> None:
        transition = cur.expect_word("transition id").text
        cur.expect("<->")
        event = cur.expect_word("event id").text
        if transition in self.mapping:
            self.diags.append(Diagnostic(cur.line_span(),
                                         f"transition {transition} mapped twice"))
        self.mapping[transition] = event

    # -- final resolution ---------------------------------------------------

    def finish(self) -> ParsedFM:
        try:
            index = element_index(self.model)
        except Exception:
            index = {}
        if index:
            for ev in self.events:
                span = self.event_spans.get(ev.id, SourceSpan(self.filename, 0, 1, 2))
                if ev.anchor not in index:
                    self.diags.append(Diagnostic(span, f"unknown anchor {ev.anchor!r}"))
                for el in ev.region:
                    if el not in index:
                        self.diags.append(Diagnostic(span, f"unknown region element {el!r}"))
        declared = {e.id for e in self.events}
        for edge in self.control_edges:
            for eid in (edge.src, edge.dst):
                if eid not in declared:
                    self.diags.append(Diagnostic(
                        SourceSpan(self.filename, 0, 1, 2),
                        f"control edge references unknown event {eid!r}"))
        if self.control_start is not None and self.control_start not in declared:
            self.diags.append(Diagnostic(SourceSpan(self.filename, 0, 1, 2),
                                         f"control start {self.control_start!r} undeclared"))
        for transition, event in self.mapping.items():
            if event not in declared:
                self.diags.append(Diagnostic(SourceSpan(self.filename, 0, 1, 2),
                                             f"mapping targets unknown event {event!r}"))
        if self.diags:
            raise ParseError(self.diags)
        try:
            events = EventSet(self.events)
        except EventError as err:
            raise ParseError([Diagnostic(SourceSpan(self.filename, 0, 1, 2), str(err))])
        control = None
        if self.control_start is not None:
            control = ControlGraph(start=self.control_start, edges=self.control_edges)
        elif self.control_edges:
            raise ParseError([Diagnostic(SourceSpan(self.filename, 0, 1, 2),
                                         "control edges without a start declaration")])
        return ParsedFM(model=self.model, events=events, control=control,
                        mapping=self.mapping)


def parse_fm(text: str, filename: str = "<fm>") -> ParsedFM:
    """Parse the FM DSL into a model plus events, control graph, and mapping."""
    parser = _FMParser(filename)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, filename, parser.diags)
        if not tokens:
            continue
        cur = _Cursor(tokens, lineno, filename, raw)
        try:
            parser.parse_line(cur)
        except _LineError as err:
            parser.diags.append(Diagnostic(err.span, err.message))
    return parser.finish()


def _fmt_attr_value(value: Union[int, str]) -> str:
    return f'"{value}"' if isinstance(value, str) else str(value)


def print_fm(model: FMModel, events: Optional[EventSet] = None,
             control: Optional[ControlGraph] = None,
             mapping: Optional[dict[str, str]] = None) -> str:
    """Serialize a model (and companions) back to the DSL; round-trips."""
    lines: list[str] = []
    for sphere in model.spheres:
        lines.append(f"sphere {sphere}")
    for m in model.machines:
        parts = [f"machine {m.id} in {m.sphere}"]
        if m.thing_kind:
            parts.append(f"kind {m.thing_kind}")
        parts.append("stages " + ",".join(s.value for s in m.stages))
        if m.has_storage:
            parts.append("storage")
        if m.initial_power is Power.OFF:
            parts.append("power off")
        lines.append(" ".join(parts))
    for c in model.clocks:
        suffix = f" init {c.init_duration}" if c.init_duration is not None else ""
        lines.append(f"clock {c.id}{suffix}")
    for arc in model.flows:
        src = arc.src_machine if arc.src_stage is None else f"{arc.src_machine}.{arc.src_stage.value}"
        dst = arc.dst_machine if arc.dst_stage is None else f"{arc.dst_machine}.{arc.dst_stage.value}"
        label = f' label "{arc.label}"' if arc.label else ""
        lines.append(f"flow {arc.id}: {src} -> {dst}{label}")
    for trig in model.triggers:
        lines.append(f"trigger {trig.id}: {trig.src_machine}.{trig.src_stage.value} "
                     f"=> {_fmt_target(trig.target)}{_fmt_guard(trig.guard)}")
    for park in model.parks:
        lines.append(f"park {park.id}: {park.machine}.{park.from_stage.value}"
                     f"{_fmt_guard(park.guard)}")
    for unpark in model.unparks:
        lines.append(f"unpark {unpark.id}: {unpark.machine} to {unpark.to_stage.value}"
                     f"{_fmt_guard(unpark.guard)}")
    for rule in model.timeouts:
        if isinstance(rule.effect, FireGroup):
            effect = f"fire {rule.effect.group}"
        else:
            effect = _fmt_target(rule.effect)
        lines.append(f"timeout {rule.id}: {rule.clock} => {effect}")
    for group in model.groups:
        body = ", ".join(group.constituents)
        lines.append(f"group {group.id} {{ {body} }}{_fmt_guard(group.guard)}")
    for thing in model.initial_things:
        place = thing.place if thing.place == STORAGE else thing.place.value
        attrs = ""
        if thing.attrs:
            attrs = " {" + ", ".join(
                f"{k} = {_fmt_attr_value(v)}" for k, v in thing.attrs.items()) + "}"
        kind = f" kind {thing.kind}" if thing.kind else ""
        lines.append(f"thing at {thing.machine}.{place}{attrs}{kind}")
    if events is not None:
        for ev in events:
            region = ""
            extra = [el for el in ev.region if el != ev.anchor]
            if extra:
                region = " region { " + ", ".join(extra) + " }"
            window = f" window {ev.window[0]}..{ev.window[1]}" if ev.window else ""
            lines.append(f"event {ev.id} anchor {ev.anchor}{region}{window}")
    if control is not None:
        lines.append(f"control start {control.start}")
        for edge in control.edges:
            lines.append(f"edge {edge.src} -> {edge.dst}{_fmt_guard(edge.guard)}")
    for transition, event in (mapping or {}).items():
        lines.append(f"map {transition} <-> {event}")
    return "\n".join(lines) + "\n"


def _fmt_guard(guard) -> str:
    return f" if {guards.to_text(guard)}" if guard is not None else ""


def _fmt_target(target) -> str:
    if isinstance(target, CreateTarget):
        attrs = ""
        if target.attrs:
            attrs = " {" + ", ".join(
                f"{k} = {guards.to_text(v)}" for k, v in target.attrs.items()) + "}"
        return f"create {target.machine}{attrs}"
    if isinstance(target, PowerTarget):
        return f"power {target.machine} {target.power.value}"
    if isinstance(target, ClockStart):
        return f"clock {target.clock} start {target.duration}"
    if isinstance(target, ClockStop):
        return f"clock {target.clock} stop"
    raise ValueError(f"unknown target {target!r}")


# ---------------------------------------------------------------------------
# PN DSL


def parse_pn(text: str, filename: str = "<pn>") -> Net:
    net = Net()
    diags: list[Diagnostic] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, filename, diags)
        if not tokens:
            continue
        cur = _Cursor(tokens, lineno, filename, raw)
        try:
            head = cur.expect_word("keyword").text
            if head == "net":
                net.id = cur.expect_word("net id").text
            elif head == "place":
                name = cur.expect_word("place id")
                if name.text in seen:
                    diags.append(Diagnostic(cur.span(name), f"duplicate id {name.text!r}"))
                seen.add(name.text)
                place = Place(id=name.text)
                while not cur.done():
                    if cur.take_word("cap"):
                        place.capacity = cur.expect_int()
                    elif cur.take_word("tokens"):
                        place.tokens = cur.expect_int()
                    else:
                        raise _LineError(cur.span(cur.peek()),
                                         f"unexpected {cur.peek().text!r}")
                net.places.append(place)
            elif head == "trans":
                name = cur.expect_word("transition id")
                if name.text in seen:
                    diags.append(Diagnostic(cur.span(name), f"duplicate id {name.text!r}"))
                seen.add(name.text)
                tr = Transition(id=name.text)
                while not cur.done():
                    if cur.take_word("delay"):
                        tr.delay = cur.expect_int()
                    elif cur.take_word("external"):
                        tr.external = True
                    else:
                        raise _LineError(cur.span(cur.peek()),
                                         f"unexpected {cur.peek().text!r}")
                net.transitions.append(tr)
            elif head == "arc":
                src = cur.expect_word("node id").text
                cur.expect("->")
                dst = cur.expect_word("node id").text
                weight = 1
                if cur.take_word("weight"):
                    weight = cur.expect_int()
                cur.expect_done()
                net.arcs.append(Arc(src=src, dst=dst, weight=weight))
            else:
                raise _LineError(cur.line_span(), f"unknown keyword {head!r}")
        except _LineError as err:
            diags.append(Diagnostic(err.span, err.message))
    if diags:
        raise ParseError(diags)
    return net


def print_pn(net: Net) -> str:
    lines = [f"net {net.id}"] if net.id != "net" else []
    for p in net.places:
        parts = [f"place {p.id}"]
        if p.capacity is not None:
            parts.append(f"cap {p.capacity}")
        if p.tokens:
            parts.append(f"tokens {p.tokens}")
        lines.append(" ".join(parts))
    for t in net.transitions:
        parts = [f"trans {t.id}"]
        if t.delay is not None:
            parts.append(f"delay {t.delay}")
        if t.external:
            parts.append("external")
        lines.append(" ".join(parts))
    for a in net.arcs:
        suffix = f" weight {a.weight}" if a.weight != 1 else ""
        lines.append(f"arc {a.src} -> {a.dst}{suffix}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PNML subset

_PNML_SKIP = {"name", "graphics", "toolspecific", "text"}
_PNML_KNOWN = {"pnml", "net", "page", "place", "transition", "arc",
               "initialMarking", "inscription"}


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def parse_pnml(xml_text: str) -> Net:
    """Ingest the minimal PNML subset; anything else is rejected by name."""
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as err:
        raise ParseError([Diagnostic(SourceSpan("<pnml>", err.position[0],
                                                err.position[1] + 1, err.position[1] + 2),
                                     f"malformed XML: {err.msg}")])
    net = Net()

    def text_of(element, child_name: str) -> Optional[str]:
        for child in element:
            if _local(child.tag) == child_name:
                for grand in child:
                    if _local(grand.tag) == "text":
                        return (grand.text or "").strip()
                return (child.text or "").strip()
        return None

    def walk(element) -> None:
        tag = _local(element.tag)
        if tag in _PNML_SKIP:
            return
        if tag not in _PNML_KNOWN:
            raise UnsupportedFeature(f"unsupported PNML feature: <{tag}>")
        if tag == "net" and element.get("id"):
            net.id = element.get("id")
        if tag == "place":
            marking = text_of(element, "initialMarking")
            net.places.append(Place(id=element.get("id") or f"p{len(net.places) + 1}",
                                    tokens=int(marking) if marking else 0))
            for child in element:
                if _local(child.tag) not in _PNML_SKIP | {"initialMarking"}:
                    raise UnsupportedFeature(
                        f"unsupported PNML feature: <{_local(child.tag)}> in place")
            return
        if tag == "transition":
            net.transitions.append(Transition(id=element.get("id")
                                              or f"t{len(net.transitions) + 1}"))
            for child in element:
                if _local(child.tag) not in _PNML_SKIP:
                    raise UnsupportedFeature(
                        f"unsupported PNML feature: <{_local(child.tag)}> in transition")
            return
        if tag == "arc":
            inscription = text_of(element, "inscription")
            net.arcs.append(Arc(src=element.get("source"), dst=element.get("target"),
                                weight=int(inscription) if inscription else 1))
            for child in element:
                if _local(child.tag) not in _PNML_SKIP | {"inscription"}:
                    raise UnsupportedFeature(
                        f"unsupported PNML feature: <{_local(child.tag)}> in arc")
            return
        for child in element:
            walk(child)

    walk(root)
    return net


# ---------------------------------------------------------------------------
# Schedules and mappings


def parse_schedule(text: str, filename: str = "<sched>") -> list[ScheduleEntry]:
    """`at <t> inject <machine>[.create] {attrs}` / `at <t> fire <name>` lines."""
    entries: list[ScheduleEntry] = []
    diags: list[Diagnostic] = []
    last_time = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, filename, diags)
        if not tokens:
            continue
        cur = _Cursor(tokens, lineno, filename, raw)
        try:
            cur.expect("at")
            time = cur.expect_int()
            if time < last_time:
                raise _LineError(cur.line_span(), "schedule times must be non-decreasing")
            last_time = time
            verb = cur.expect_word("inject|fire").text
            if verb == "inject":
                target = cur.expect_word("machine").text
                stage = Stage.TRANSFER
                if "." in target:
                    machine, _, stage_name = target.rpartition(".")
                    if stage_name not in (Stage.TRANSFER.value, Stage.CREATE.value):
                        raise _LineError(cur.line_span(),
                                         "injections enter at transfer or create")
                    target = machine
                    stage = _STAGE_NAMES[stage_name]
                parser = _FMParser(filename)
                attrs = parser.attr_literals(cur)
                entries.append(ScheduleEntry(
                    time=time, kind="inject", target=target, stage=stage,
                    attrs=tuple(sorted(attrs.items()))))
            elif verb == "fire":
                entries.append(ScheduleEntry(time=time, kind="fire",
                                             target=cur.expect_word("name").text))
            else:
                raise _LineError(cur.line_span(), f"unknown schedule verb {verb!r}")
            cur.expect_done()
        except _LineError as err:
            diags.append(Diagnostic(err.span, err.message))
    if diags:
        raise ParseError(diags)
    return entries


def parse_mapping(text: str, filename: str = "<map>") -> dict[str, str]:
    """`<transition> <-> <event>` lines."""
    mapping: dict[str, str] = {}
    diags: list[Diagnostic] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, filename, diags)
        if not tokens:
            continue
        cur = _Cursor(tokens, lineno, filename, raw)
        try:
            transition = cur.expect_word("transition id").text
            cur.expect("<->")
            event = cur.expect_word("event id").text
            cur.expect_done()
            if transition in mapping:
                raise _LineError(cur.line_span(), f"transition {transition} mapped twice")
            mapping[transition] = event
        except _LineError as err:
            diags.append(Diagnostic(err.span, err.message))
    if diags:
        raise ParseError(diags)
    return mapping
