"""Guard and attribute expressions: AST, evaluation, and reference checks.

Guards are side-effect-free boolean expressions over thing attributes,
placement counts, machine power, and clock status. The same integer
sublanguage is reused for attribute templates on create triggers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Union


class GuardError(Exception):
    """Raised when an expression cannot be evaluated against a state."""


class EvalContext(Protocol):
    """State view an expression is evaluated against."""

    def count(self, machine: str, place: str) -> int: ...
    def sum_storage(self, machine: str, attr: str) -> int: ...
    def stage_count_total(self, machine: str) -> int: ...
    def power_is_on(self, machine: str) -> bool: ...
    def clock_running(self, clock: str) -> bool: ...
    def clock_expired(self, clock: str) -> bool: ...
    def clock_elapsed(self, clock: str) -> int: ...
    def this_attr(self, name: str) -> Union[int, str]: ...


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class StrLit:
    value: str


@dataclass(frozen=True)
class ThisAttr:
    """Attribute of the thing that caused the enclosing trigger."""

    name: str


@dataclass(frozen=True)
class Count:
    """Number of things at a stage, or in storage when place == 'storage'."""

    machine: str
    place: str


@dataclass(frozen=True)
class SumStorage:
    """Sum of an integer attribute over the things stored in a machine."""

    machine: str
    attr: str


@dataclass(frozen=True)
class Elapsed:
    clock: str


@dataclass(frozen=True)
class BinOp:
    op: str  # + - *
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str  # = != < <= > >=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class PowerIs:
    machine: str
    on: bool


@dataclass(frozen=True)
class Running:
    clock: str


@dataclass(frozen=True)
class Expired:
    clock: str


@dataclass(frozen=True)
class Idle:
    """True when no thing occupies any stage of the machine (storage ignored)."""

    machine: str


@dataclass(frozen=True)
class Not:
    inner: "Guard"


@dataclass(frozen=True)
class And:
    left: "Guard"
    right: "Guard"


@dataclass(frozen=True)
class Or:
    left: "Guard"
    right: "Guard"


Expr = Union[IntLit, StrLit, ThisAttr, Count, SumStorage, Elapsed, BinOp]
Guard = Union[Compare, PowerIs, Running, Expired, Idle, Not, And, Or]

_CMP = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}

_ARITH = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
}


def eval_expr(expr: Expr, ctx: EvalContext) -> Union[int, str]:
    if isinstance(expr, IntLit):
        return expr.value
    if isinstance(expr, StrLit):
        return expr.value
    if isinstance(expr, ThisAttr):
        return ctx.this_attr(expr.name)
    if isinstance(expr, Count):
        return ctx.count(expr.machine, expr.place)
    if isinstance(expr, SumStorage):
        return ctx.sum_storage(expr.machine, expr.attr)
    if isinstance(expr, Elapsed):
        return ctx.clock_elapsed(expr.clock)
    if isinstance(expr, BinOp):
        left = eval_expr(expr.left, ctx)
        right = eval_expr(expr.right, ctx)
        if not isinstance(left, int) or not isinstance(right, int):
            raise GuardError(f"arithmetic on non-integers: {to_text(expr)}")
        return _ARITH[expr.op](left, right)
    raise GuardError(f"not an expression: {expr!r}")


def eval_guard(guard: Guard, ctx: EvalContext) -> bool:
    if isinstance(guard, Compare):
        left = eval_expr(guard.left, ctx)
        right = eval_expr(guard.right, ctx)
        if isinstance(left, str) != isinstance(right, str):
            raise GuardError(f"comparing string with integer: {to_text(guard)}")
        if isinstance(left, str) and guard.op not in ("=", "!="):
            raise GuardError(f"ordering comparison on strings: {to_text(guard)}")
        return _CMP[guard.op](left, right)
    if isinstance(guard, PowerIs):
        return ctx.power_is_on(guard.machine) == guard.on
    if isinstance(guard, Running):
        return ctx.clock_running(guard.clock)
    if isinstance(guard, Expired):
        return ctx.clock_expired(guard.clock)
    if isinstance(guard, Idle):
        return ctx.stage_count_total(guard.machine) == 0
    if isinstance(guard, Not):
        return not eval_guard(guard.inner, ctx)
    if isinstance(guard, And):
        return eval_guard(guard.left, ctx) and eval_guard(guard.right, ctx)
    if isinstance(guard, Or):
        return eval_guard(guard.left, ctx) or eval_guard(guard.right, ctx)
    raise GuardError(f"not a guard: {guard!r}")


def referenced_machines(node) -> set[str]:
    out: set[str] = set()
    _walk(node, out, set(), set())
    return out


def referenced_clocks(node) -> set[str]:
    out: set[str] = set()
    _walk(node, set(), out, set())
    return out


def uses_this(node) -> bool:
    flags: set[str] = set()
    _walk(node, set(), set(), flags)
    return "this" in flags


def _walk(node, machines: set[str], clocks: set[str], flags: set[str]) -> None:
    if isinstance(node, (Count, SumStorage, Idle, PowerIs)):
        machines.add(node.machine)
    elif isinstance(node, (Elapsed, Running, Expired)):
        clocks.add(node.clock)
    elif isinstance(node, ThisAttr):
        flags.add("this")
    elif isinstance(node, BinOp):
        _walk(node.left, machines, clocks, flags)
        _walk(node.right, machines, clocks, flags)
    elif isinstance(node, Compare):
        _walk(node.left, machines, clocks, flags)
        _walk(node.right, machines, clocks, flags)
    elif isinstance(node, Not):
        _walk(node.inner, machines, clocks, flags)
    elif isinstance(node, (And, Or)):
        _walk(node.left, machines, clocks, flags)
        _walk(node.right, machines, clocks, flags)


def to_text(node) -> str:
    """Render an expression or guard in the DSL's concrete syntax."""
    if isinstance(node, IntLit):
        return str(node.value)
    if isinstance(node, StrLit):
        return '"%s"' % node.value
    if isinstance(node, ThisAttr):
        return f"this.{node.name}"
    if isinstance(node, Count):
        return f"count({node.machine}.{node.place})"
    if isinstance(node, SumStorage):
        return f"sum({node.machine}.storage.{node.attr})"
    if isinstance(node, Elapsed):
        return f"elapsed({node.clock})"
    if isinstance(node, BinOp):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    if isinstance(node, Compare):
        return f"{to_text(node.left)} {node.op} {to_text(node.right)}"
    if isinstance(node, PowerIs):
        return f"power({node.machine}) = {'on' if node.on else 'off'}"
    if isinstance(node, Running):
        return f"running({node.clock})"
    if isinstance(node, Expired):
        return f"expired({node.clock})"
    if isinstance(node, Idle):
        return f"idle({node.machine})"
    if isinstance(node, Not):
        return f"not ({to_text(node.inner)})"
    if isinstance(node, And):
        return f"({to_text(node.left)} and {to_text(node.right)})"
    if isinstance(node, Or):
        return f"({to_text(node.left)} or {to_text(node.right)})"
    raise GuardError(f"unprintable node: {node!r}")
