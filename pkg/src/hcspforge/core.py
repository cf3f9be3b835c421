"""HCSP abstract syntax, events, ready sets, pretty printer, and validation.

The process language:

    p  ::= skip | stop | x := e | ch?x | ch!e | p; q | B -> p | p [++] q
         | p* | p*N | wait e | <x_dot = e, ... & B>
         | <x_dot = e, ... & B> |> [] (ch?x -> p, ch!e -> q, ...)
         | rk4step(x_dot = e, ... ; s)
    pc ::= p | pc || pc

`wait e` and `rk4step` are first-class here: `wait` keeps the worked
examples' shape through discretization and code generation, and
`rk4step` is the one-step integrator update introduced by the
discretizer.  `desugar_wait` gives the clock-ODE reading of `wait`.

All values are 64-bit floats.  Guards are boolean-typed expressions;
the well-formedness check rejects arithmetic/boolean mixing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Optional, Union

IN = "?"
OUT = "!"


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class BoolLit(Expr):
    value: bool


@dataclass(frozen=True)
class Unary(Expr):
    op: str  # '-' or '!'
    operand: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str  # + - * /  < <= = >= >  && ||
    left: Expr
    right: Expr


@dataclass(frozen=True)
class NextGuard(Expr):
    """A guard evaluated one RK4 step ahead.

    Evaluates `inner` in the state where each of `vars` has been advanced
    by `step` along the vector field `rhs`.  Kept symbolic in the AST and
    evaluated numerically by the semantics.
    """

    vars: tuple[str, ...]
    rhs: tuple[Expr, ...]
    step: Expr
    inner: Expr


ARITH_OPS = {"+", "-", "*", "/"}
CMP_OPS = {"<", "<=", "=", ">=", ">"}
BOOL_OPS = {"&&", "||"}


def const(v: float) -> Const:
    return Const(float(v))


def conj(*parts: Expr) -> Expr:
    out: Optional[Expr] = None
    for p in parts:
        out = p if out is None else Binary("&&", out, p)
    return out if out is not None else BoolLit(True)


def neg(e: Expr) -> Expr:
    return Unary("!", e)


# ---------------------------------------------------------------------------
# Processes
# ---------------------------------------------------------------------------

class Process:
    __slots__ = ()


@dataclass(frozen=True)
class Skip(Process):
    pass


@dataclass(frozen=True)
class HorizonStop(Process):
    """Terminal marker emitted by the discretizer when the time horizon
    truncates an evolution; executing it flags the trace."""


@dataclass(frozen=True)
class Assign(Process):
    var: str
    expr: Expr


@dataclass(frozen=True)
class Input(Process):
    chan: str
    var: str


@dataclass(frozen=True)
class Output(Process):
    chan: str
    expr: Expr


@dataclass(frozen=True)
class Seq(Process):
    first: Process
    second: Process


@dataclass(frozen=True)
class Guarded(Process):
    cond: Expr
    body: Process


@dataclass(frozen=True)
class IChoice(Process):
    left: Process
    right: Process


@dataclass(frozen=True)
class Repeat(Process):
    body: Process
    count: Optional[int]  # None = unbounded


@dataclass(frozen=True)
class Wait(Process):
    duration: Expr


@dataclass(frozen=True)
class OdeSpec:
    vars: tuple[str, ...]
    rhs: tuple[Expr, ...]
    domain: Expr

    def __post_init__(self):
        if len(self.vars) != len(self.rhs):
            raise ValueError("vector field arity mismatch: %d vars, %d rhs"
                             % (len(self.vars), len(self.rhs)))


@dataclass(frozen=True)
class Ode(Process):
    spec: OdeSpec


@dataclass(frozen=True)
class CommDir:
    chan: str
    dir: str  # IN or OUT
    var: Optional[str] = None     # input target
    expr: Optional[Expr] = None   # output payload

    def __post_init__(self):
        if self.dir == IN and (self.var is None or self.expr is not None):
            raise ValueError("input endpoint needs a target variable")
        if self.dir == OUT and (self.expr is None or self.var is not None):
            raise ValueError("output endpoint needs a payload expression")


@dataclass(frozen=True)
class Interrupt(Process):
    spec: OdeSpec
    arms: tuple[tuple[CommDir, Process], ...]


@dataclass(frozen=True)
class RkStep(Process):
    """Simultaneous update x := x + s*Phi(x, s) for one vector field."""

    vars: tuple[str, ...]
    rhs: tuple[Expr, ...]
    step: Expr


@dataclass(frozen=True)
class Parallel(Process):
    branches: tuple[Process, ...]


# ---------------------------------------------------------------------------
# Events and ready sets
# ---------------------------------------------------------------------------

ReadySet = frozenset  # of (chan, dir) pairs


@dataclass(frozen=True)
class Tau:
    pass


@dataclass(frozen=True)
class Comm:
    chan: str
    dir: str  # IN, OUT, or 'sync'
    value: Optional[float]


@dataclass(frozen=True)
class WaitEvt:
    duration: float  # > 0, math.inf for blocked-forever
    rdy: ReadySet

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("wait event duration must be positive")


Event = Union[Tau, Comm, WaitEvt]

SYNC = "sync"


def compat(r1: ReadySet, r2: ReadySet) -> bool:
    """Ready sets are compatible unless the same channel is offered for
    input on one side and output on the other."""
    for chan, d in r1:
        other = (chan, OUT if d == IN else IN)
        if other in r2:
            return False
    return True


def rdy_of(dirs) -> ReadySet:
    return frozenset((c.chan, c.dir) for c in dirs)


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------

_PREC = {"||": 1, "&&": 2, "<": 3, "<=": 3, "=": 3, ">=": 3, ">": 3,
         "+": 4, "-": 4, "*": 5, "/": 5}


def fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def pretty_stmt_expr(e: Expr) -> str:
    """Expression rendering for statement contexts: top-level disjunctions
    are parenthesized so they cannot be read as parallel composition."""
    return pretty_expr(e, 2)


def pretty_expr(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, Const):
        s = fmt_num(e.value)
        return "(%s)" % s if e.value < 0 and parent_prec > 0 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, Unary):
        return e.op + pretty_expr(e.operand, 6)
    if isinstance(e, Binary):
        p = _PREC[e.op]
        s = "%s %s %s" % (pretty_expr(e.left, p), e.op,
                          pretty_expr(e.right, p + 1))
        return "(%s)" % s if p < parent_prec else s
    if isinstance(e, NextGuard):
        field = ", ".join("%s_dot = %s" % (v, pretty_expr(r, 2))
                          for v, r in zip(e.vars, e.rhs))
        return "nextstep(%s ; %s ; %s)" % (field, pretty_expr(e.step, 2),
                                           pretty_expr(e.inner, 2))
    raise TypeError("unknown expression node %r" % (e,))


def _ode_field(vars, rhs) -> str:
    return ", ".join("%s_dot = %s" % (v, pretty_expr(r, 2))
                     for v, r in zip(vars, rhs))


def pretty(p: Process) -> str:
    if isinstance(p, Parallel):
        return " || ".join(_pp_choice(b) for b in p.branches)
    return _pp_choice(p)


def _pp_choice(p: Process) -> str:
    if isinstance(p, IChoice):
        return "%s [++] %s" % (_pp_choice(p.left), _pp_seq(p.right))
    return _pp_seq(p)


def _pp_seq(p: Process) -> str:
    if isinstance(p, Seq):
        return "%s; %s" % (_pp_seq(p.first), _pp_item(p.second))
    return _pp_item(p)


def _pp_item(p: Process) -> str:
    if isinstance(p, Guarded):
        return "%s -> %s" % (pretty_stmt_expr(p.cond), _pp_item(p.body))
    return _pp_atom(p)


def _pp_atom(p: Process) -> str:
    if isinstance(p, Skip):
        return "skip"
    if isinstance(p, HorizonStop):
        return "stop"
    if isinstance(p, Assign):
        return "%s := %s" % (p.var, pretty_stmt_expr(p.expr))
    if isinstance(p, Input):
        return "%s?%s" % (p.chan, p.var)
    if isinstance(p, Output):
        return "%s!%s" % (p.chan, pretty_expr(p.expr, 4))
    if isinstance(p, Wait):
        return "wait %s" % pretty_stmt_expr(p.duration)
    if isinstance(p, Ode):
        return "<%s & %s>" % (_ode_field(p.spec.vars, p.spec.rhs),
                              pretty_stmt_expr(p.spec.domain))
    if isinstance(p, Interrupt):
        arms = ", ".join(
            "%s -> %s" % (_pp_comm(c), _pp_item(q)) for c, q in p.arms)
        return "<%s & %s> |> [] (%s)" % (
            _ode_field(p.spec.vars, p.spec.rhs),
            pretty_stmt_expr(p.spec.domain), arms)
    if isinstance(p, RkStep):
        return "rk4step(%s ; %s)" % (_ode_field(p.vars, p.rhs),
                                     pretty_expr(p.step, 2))
    if isinstance(p, Repeat):
        suffix = "*" if p.count is None else "*%d" % p.count
        return "(%s)%s" % (pretty(p.body), suffix)
    # parenthesize compound forms appearing in atom position
    return "(%s)" % pretty(p)


def _pp_comm(c: CommDir) -> str:
    if c.dir == IN:
        return "%s?%s" % (c.chan, c.var)
    return "%s!%s" % (c.chan, pretty_expr(c.expr, 4))


# ---------------------------------------------------------------------------
# wait desugaring
# ---------------------------------------------------------------------------

class FreshNames:
    """Generates collision-free auxiliary variable names."""

    def __init__(self, taken=()):
        self.taken = set(taken)
        self.counter = itertools.count()

    def fresh(self, base: str) -> str:
        while True:
            name = "%s%d" % (base, next(self.counter))
            if name not in self.taken:
                self.taken.add(name)
                return name


def desugar_wait(d: Expr, fresh: FreshNames) -> Process:
    """wait d  ==  t := 0; <t_dot = 1 & t < d>  with a fresh clock t."""
    t = fresh.fresh("__t")
    return Seq(Assign(t, const(0)),
               Ode(OdeSpec((t,), (const(1),), Binary("<", Var(t), d))))


def desugar_waits(p: Process, fresh: Optional[FreshNames] = None) -> Process:
    if fresh is None:
        fresh = FreshNames(free_vars(p))
    return _map_structure(p, lambda q: desugar_wait(q.duration, fresh)
                          if isinstance(q, Wait) else None)


def _map_structure(p: Process, hook) -> Process:
    out = hook(p)
    if out is not None:
        return out
    if isinstance(p, Seq):
        return Seq(_map_structure(p.first, hook), _map_structure(p.second, hook))
    if isinstance(p, Guarded):
        return Guarded(p.cond, _map_structure(p.body, hook))
    if isinstance(p, IChoice):
        return IChoice(_map_structure(p.left, hook), _map_structure(p.right, hook))
    if isinstance(p, Repeat):
        return Repeat(_map_structure(p.body, hook), p.count)
    if isinstance(p, Interrupt):
        return Interrupt(p.spec, tuple((c, _map_structure(q, hook))
                                       for c, q in p.arms))
    if isinstance(p, Parallel):
        return Parallel(tuple(_map_structure(b, hook) for b in p.branches))
    return p


# ---------------------------------------------------------------------------
# Variable / channel analysis
# ---------------------------------------------------------------------------

def expr_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Unary):
        return expr_vars(e.operand)
    if isinstance(e, Binary):
        return expr_vars(e.left) | expr_vars(e.right)
    if isinstance(e, NextGuard):
        out = set(e.vars) | expr_vars(e.step) | expr_vars(e.inner)
        for r in e.rhs:
            out |= expr_vars(r)
        return out
    return set()


def free_vars(p: Process) -> set[str]:
    out: set[str] = set()
    for node in walk(p):
        if isinstance(node, Assign):
            out.add(node.var)
            out |= expr_vars(node.expr)
        elif isinstance(node, Input):
            out.add(node.var)
        elif isinstance(node, Output):
            out |= expr_vars(node.expr)
        elif isinstance(node, Guarded):
            out |= expr_vars(node.cond)
        elif isinstance(node, Wait):
            out |= expr_vars(node.duration)
        elif isinstance(node, (Ode, Interrupt)):
            spec = node.spec
            out |= set(spec.vars) | expr_vars(spec.domain)
            for r in spec.rhs:
                out |= expr_vars(r)
            if isinstance(node, Interrupt):
                for c, _ in node.arms:
                    if c.dir == IN:
                        out.add(c.var)
                    else:
                        out |= expr_vars(c.expr)
        elif isinstance(node, RkStep):
            out |= set(node.vars) | expr_vars(node.step)
            for r in node.rhs:
                out |= expr_vars(r)
    return out


def channel_dirs(p: Process) -> set[tuple[str, str]]:
    out: set[tuple[str, str]] = set()
    for node in walk(p):
        if isinstance(node, Input):
            out.add((node.chan, IN))
        elif isinstance(node, Output):
            out.add((node.chan, OUT))
        elif isinstance(node, Interrupt):
            for c, _ in node.arms:
                out.add((c.chan, c.dir))
    return out


def walk(p: Process) -> Iterator[Process]:
    yield p
    if isinstance(p, Seq):
        yield from walk(p.first)
        yield from walk(p.second)
    elif isinstance(p, Guarded):
        yield from walk(p.body)
    elif isinstance(p, IChoice):
        yield from walk(p.left)
        yield from walk(p.right)
    elif isinstance(p, Repeat):
        yield from walk(p.body)
    elif isinstance(p, Interrupt):
        for _, q in p.arms:
            yield from walk(q)
    elif isinstance(p, Parallel):
        for b in p.branches:
            yield from walk(b)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self):
        return "%s: %s" % (self.path, self.message)


BOOL, REAL = "bool", "real"


def expr_type(e: Expr) -> str:
    """Returns 'bool' or 'real'; raises TypeError on ill-formed mixes."""
    if isinstance(e, Const):
        return REAL
    if isinstance(e, Var):
        return REAL
    if isinstance(e, BoolLit):
        return BOOL
    if isinstance(e, Unary):
        want = BOOL if e.op == "!" else REAL
        if expr_type(e.operand) != want:
            raise TypeError("operand of %r must be %s" % (e.op, want))
        return want
    if isinstance(e, Binary):
        lt, rt = expr_type(e.left), expr_type(e.right)
        if e.op in ARITH_OPS:
            if lt != REAL or rt != REAL:
                raise TypeError("arithmetic %r applied to boolean" % e.op)
            if e.op == "/" and isinstance(e.right, Const) and e.right.value == 0:
                raise TypeError("division by constant zero")
            return REAL
        if e.op in CMP_OPS:
            if lt != REAL or rt != REAL:
                raise TypeError("comparison %r applied to boolean" % e.op)
            return BOOL
        if e.op in BOOL_OPS:
            if lt != BOOL or rt != BOOL:
                raise TypeError("connective %r applied to non-boolean" % e.op)
            return BOOL
        raise TypeError("unknown operator %r" % e.op)
    if isinstance(e, NextGuard):
        if expr_type(e.inner) != BOOL:
            raise TypeError("nextstep body must be boolean")
        if expr_type(e.step) != REAL:
            raise TypeError("nextstep step must be arithmetic")
        return BOOL
    raise TypeError("unknown expression node %r" % (e,))


def _check_guard(e: Expr, path: str, out: list[Diagnostic]):
    try:
        if expr_type(e) != BOOL:
            out.append(Diagnostic(path, "guard is not boolean-typed"))
    except TypeError as exc:
        out.append(Diagnostic(path, str(exc)))


def _check_arith(e: Expr, path: str, out: list[Diagnostic]):
    try:
        if expr_type(e) != REAL:
            out.append(Diagnostic(path, "expression is not arithmetic"))
    except TypeError as exc:
        out.append(Diagnostic(path, str(exc)))


def validate(pc: Process) -> list[Diagnostic]:
    """Static checks: parallel only at top level, disjoint branch variables,
    no duplicated channel direction, well-typed expressions."""
    out: list[Diagnostic] = []
    branches = pc.branches if isinstance(pc, Parallel) else (pc,)
    seen_vars: dict[str, int] = {}
    seen_dirs: dict[tuple[str, str], int] = {}
    for i, b in enumerate(branches):
        path = "par[%d]" % i if isinstance(pc, Parallel) else "proc"
        for node in walk(b):
            if isinstance(node, Parallel):
                out.append(Diagnostic(path, "nested parallel composition"))
        for v in sorted(free_vars(b)):
            if v in seen_vars:
                out.append(Diagnostic(path, "shared variable %s with par[%d]"
                                      % (v, seen_vars[v])))
            else:
                seen_vars[v] = i
        for cd in sorted(channel_dirs(b)):
            if cd in seen_dirs:
                out.append(Diagnostic(path, "duplicated direction %s%s with par[%d]"
                                      % (cd[0], cd[1], seen_dirs[cd])))
            else:
                seen_dirs[cd] = i
        _validate_body(b, path, out)
    return out


def _validate_body(p: Process, path: str, out: list[Diagnostic]):
    if isinstance(p, Assign):
        _check_arith(p.expr, path, out)
    elif isinstance(p, Output):
        _check_arith(p.expr, path, out)
    elif isinstance(p, Wait):
        _check_arith(p.duration, path, out)
    elif isinstance(p, Seq):
        _validate_body(p.first, path + ".seq[0]", out)
        _validate_body(p.second, path + ".seq[1]", out)
    elif isinstance(p, Guarded):
        _check_guard(p.cond, path + ".guard", out)
        _validate_body(p.body, path + ".body", out)
    elif isinstance(p, IChoice):
        _validate_body(p.left, path + ".ichoice[0]", out)
        _validate_body(p.right, path + ".ichoice[1]", out)
    elif isinstance(p, Repeat):
        _validate_body(p.body, path + ".repeat", out)
    elif isinstance(p, (Ode, Interrupt)):
        spec = p.spec
        _check_guard(spec.domain, path + ".domain", out)
        for j, r in enumerate(spec.rhs):
            _check_arith(r, path + ".rhs[%d]" % j, out)
        if isinstance(p, Interrupt):
            for j, (c, q) in enumerate(p.arms):
                if c.dir == OUT:
                    _check_arith(c.expr, path + ".arm[%d]" % j, out)
                _validate_body(q, path + ".arm[%d].body" % j, out)
    elif isinstance(p, RkStep):
        _check_arith(p.step, path + ".step", out)
        for j, r in enumerate(p.rhs):
            _check_arith(r, path + ".rhs[%d]" % j, out)
