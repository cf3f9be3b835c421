"""Discretization of continuous HCSP: step-size selection from the global
RK4 error bound, epsilon-neighborhood guard transforms, and the structural
translation of evolutions and interrupts into step-bounded discrete loops.

The error bound combines per-step local error constants with Lipschitz
growth:

    M_N(h) = e^(N L h) xi1 + (e^(N L h) - 1)/L * C1 * h^4
    M(h)   = (e^(L h') - 1)/L * C2 * h'^4
             + [1 + L h' + (L h')^2/2 + (L h')^3/4 + (L h')^4/24] * M_N(h)

with N = floor(T_o/h) and residual h' = T_o - N h.  The chosen step is
min(h1, min_i eps/(2 U_i)) where h1 is the largest step keeping
M(h) <= eps/2 (found by bisection, then tightened so that 1.1*h1 fails).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Assign, Binary, BoolLit, CommDir, Const, Expr, FreshNames, Guarded,
    HorizonStop, IChoice, Input, Interrupt, NextGuard, Ode, OdeSpec, Output,
    Parallel, Process, Repeat, RkStep, Seq, Skip, Unary, Var, Wait, conj,
    const, expr_vars, free_vars, neg, pretty_expr, walk, IN, OUT,
)
from .semantics import (
    HState, HcspRuntimeError, compile_expr, eval_expr, ode_escape,
)


class DiscretizationError(Exception):
    pass


# ---------------------------------------------------------------------------
# RK4 increment function
# ---------------------------------------------------------------------------

def rk4_phi(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
            s: float) -> np.ndarray:
    """Classical 4-stage increment Phi(x, s) = (k1 + 2k2 + 2k3 + k4)/6."""
    if not s > 0:
        raise DiscretizationError("step must be positive")
    x = np.asarray(x, dtype=float)
    k1 = np.asarray(f(x), dtype=float)
    k2 = np.asarray(f(x + 0.5 * s * k1), dtype=float)
    k3 = np.asarray(f(x + 0.5 * s * k2), dtype=float)
    k4 = np.asarray(f(x + s * k3), dtype=float)
    phi = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    if not np.all(np.isfinite(phi)):
        raise DiscretizationError("non-finite RK4 stage value")
    return phi


def ode_field(spec: OdeSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field of an OdeSpec as a function on value vectors, ordered
    like spec.vars; non-continuous variables are not allowed here."""
    fns = [compile_expr(r) for r in spec.rhs]
    names = spec.vars

    def f(x: np.ndarray) -> np.ndarray:
        env = dict(zip(names, x))
        return np.array([fn(env) for fn in fns], dtype=float)
    return f


# ---------------------------------------------------------------------------
# Global error bound and step-size selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizationParams:
    L: float
    C1: float
    C2: float
    xi1: float = 0.0
    U: float = 1.0
    T_o: float = 1.0

    def __post_init__(self):
        if self.xi1 < 0:
            raise DiscretizationError("xi1 must be nonnegative")
        for name in ("L", "C1", "C2", "U", "T_o"):
            if getattr(self, name) < 0:
                raise DiscretizationError("%s must be nonnegative" % name)


def _expm1_over(l: float, a: float) -> float:
    """(e^(l*a) - 1)/l with the l -> 0 limit a."""
    if l < 1e-300:
        return a
    return math.expm1(l * a) / l


def global_error_bound(p: DiscretizationParams, h: float) -> float:
    """M(h) per the bound above; N = floor(T_o/h), h' = T_o - N h."""
    if not 0 < h <= p.T_o + 1e-15:
        raise DiscretizationError("need 0 < h <= T_o")
    n = math.floor(p.T_o / h + 1e-12)
    h_prime = max(p.T_o - n * h, 0.0)
    nlh = n * p.L * h
    m_n = math.exp(nlh) * p.xi1 + _expm1_over(p.L, n * h) * p.C1 * h ** 4
    lh = p.L * h_prime
    bracket = 1 + lh + lh ** 2 / 2 + lh ** 3 / 4 + lh ** 4 / 24
    return (_expm1_over(p.L, h_prime) * p.C2 * h_prime ** 4
            + bracket * m_n)


@dataclass
class StepPlan:
    h: float
    n_steps: int
    h_prime: float
    h1: float                      # bound from M(h) <= eps/2
    u_bounds: dict                 # ode id -> eps/(2 U_i)
    m_at_h: float
    eps: float
    T_o: float
    binding: str                   # 'error-bound' or 'sup-norm'

    def to_json(self) -> dict:
        return {
            "h": self.h, "N": self.n_steps, "h_prime": self.h_prime,
            "h1": self.h1, "u_bounds": dict(sorted(self.u_bounds.items())),
            "M_at_h": self.m_at_h, "eps": self.eps, "T": self.T_o,
            "binding": self.binding,
        }


def compute_step_size(odes: Sequence[tuple], eps: float, T_o: float,
                      rel_tol: float = 1e-3) -> StepPlan:
    """Chooses the discretization step for a process with the given ODEs.

    `odes` is a sequence of (ode_id, DiscretizationParams).  The error-bound
    side uses the worst-case constants over all ODEs; the returned h also
    satisfies h <= eps/(2 U_i) for every i.  Raises if no step in (0, T_o]
    meets the bound.
    """
    if eps <= 0 or T_o <= 0:
        raise DiscretizationError("eps and T must be positive")
    target = eps / 2.0
    if odes:
        worst = DiscretizationParams(
            L=max(p.L for _, p in odes),
            C1=max(p.C1 for _, p in odes),
            C2=max(p.C2 for _, p in odes),
            xi1=max(p.xi1 for _, p in odes),
            T_o=T_o)
        if worst.xi1 >= target:
            raise DiscretizationError(
                "initial-value error xi1=%g already exceeds eps/2" % worst.xi1)
        h1 = _largest_feasible(worst, target, T_o, rel_tol)
        if h1 is None:
            raise DiscretizationError(
                "no step in (0, %g] satisfies M(h) <= %g (smallest tested "
                "M(%g) = %g)" % (T_o, target, T_o * 2.0 ** -60,
                                 global_error_bound(worst, T_o * 2.0 ** -60)))
    else:
        worst = DiscretizationParams(L=0, C1=0, C2=0, T_o=T_o)
        h1 = T_o
    u_bounds = {oid: eps / (2.0 * p.U) if p.U > 0 else math.inf
                for oid, p in odes}
    h = min([h1] + list(u_bounds.values()))
    n = math.floor(T_o / h + 1e-12)
    return StepPlan(h=h, n_steps=n, h_prime=max(T_o - n * h, 0.0), h1=h1,
                    u_bounds=u_bounds, m_at_h=global_error_bound(worst, h),
                    eps=eps, T_o=T_o,
                    binding="error-bound" if h == h1 else "sup-norm")


def _largest_feasible(p: DiscretizationParams, target: float, T_o: float,
                      rel_tol: float) -> Optional[float]:
    if global_error_bound(p, T_o) <= target:
        return T_o
    lo = None
    probe = T_o
    for _ in range(60):
        probe /= 2.0
        if global_error_bound(p, probe) <= target:
            lo = probe
            break
    if lo is None:
        return None
    hi = probe * 2.0
    while hi - lo > rel_tol * lo:
        mid = 0.5 * (lo + hi)
        if global_error_bound(p, mid) <= target:
            lo = mid
        else:
            hi = mid
    # the bound is only piecewise monotone in h (the residual h' jumps at
    # divisors of T_o); climb so the 10% tightness audit holds
    while 1.1 * lo <= T_o and global_error_bound(p, 1.1 * lo) <= target:
        lo *= 1.1
    return lo


# ---------------------------------------------------------------------------
# Parameter estimation over a sampling box
# ---------------------------------------------------------------------------

def estimate_params(spec: OdeSpec, box: dict, T_o: float,
                    n_samples: int = 256, seed: int = 0,
                    c_default: float = 1.0) -> DiscretizationParams:
    """L as the max infinity-norm of the Jacobian (central differences) and
    U as the max sup-norm of the field over a sampled box; C1 = C2 default
    to a conservative constant."""
    rng = np.random.default_rng(seed)
    f = ode_field(spec)
    names = spec.vars
    lo = np.array([box.get(v, (0.0, 1.0))[0] for v in names], dtype=float)
    hi = np.array([box.get(v, (0.0, 1.0))[1] for v in names], dtype=float)
    span = np.maximum(hi - lo, 1e-9)
    l_max, u_max = 0.0, 0.0
    eps_fd = 1e-6
    for _ in range(n_samples):
        x = lo + rng.random(len(names)) * span
        fx = f(x)
        u_max = max(u_max, float(np.max(np.abs(fx))) if len(fx) else 0.0)
        jac = np.zeros((len(names), len(names)))
        for j in range(len(names)):
            step = eps_fd * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += step
            xm[j] -= step
            jac[:, j] = (f(xp) - f(xm)) / (2 * step)
        if jac.size:
            l_max = max(l_max, float(np.max(np.sum(np.abs(jac), axis=1))))
    return DiscretizationParams(L=l_max, C1=c_default, C2=c_default,
                                xi1=0.0, U=u_max, T_o=T_o)


# ---------------------------------------------------------------------------
# Guard neighborhood transforms
# ---------------------------------------------------------------------------

_FLIP = {"<": ">=", "<=": ">", ">": "<=", ">=": "<", "=": "="}


def _push_neg(e: Expr) -> Expr:
    """Negation-normal form over comparisons and connectives."""
    if isinstance(e, Unary) and e.op == "!":
        inner = e.operand
        if isinstance(inner, BoolLit):
            return BoolLit(not inner.value)
        if isinstance(inner, Unary) and inner.op == "!":
            return _push_neg(inner.operand)
        if isinstance(inner, Binary):
            if inner.op == "&&":
                return Binary("||", _push_neg(neg(inner.left)),
                              _push_neg(neg(inner.right)))
            if inner.op == "||":
                return Binary("&&", _push_neg(neg(inner.left)),
                              _push_neg(neg(inner.right)))
            if inner.op in _FLIP and inner.op != "=":
                return Binary(_FLIP[inner.op], _push_neg(inner.left),
                              _push_neg(inner.right))
        if isinstance(inner, NextGuard):
            raise DiscretizationError("cannot negate a next-step guard")
        return e
    if isinstance(e, Binary) and e.op in ("&&", "||"):
        return Binary(e.op, _push_neg(e.left), _push_neg(e.right))
    return e


def linear_coeffs(e: Expr) -> Optional[tuple[dict, float]]:
    """(coefficients, constant) of an affine expression, else None."""
    if isinstance(e, Const):
        return {}, e.value
    if isinstance(e, Var):
        return {e.name: 1.0}, 0.0
    if isinstance(e, Unary) and e.op == "-":
        sub = linear_coeffs(e.operand)
        if sub is None:
            return None
        w, c = sub
        return {k: -v for k, v in w.items()}, -c
    if isinstance(e, Binary):
        if e.op in ("+", "-"):
            l, r = linear_coeffs(e.left), linear_coeffs(e.right)
            if l is None or r is None:
                return None
            sign = 1.0 if e.op == "+" else -1.0
            w = dict(l[0])
            for k, v in r[0].items():
                w[k] = w.get(k, 0.0) + sign * v
            return w, l[1] + sign * r[1]
        if e.op == "*":
            l, r = linear_coeffs(e.left), linear_coeffs(e.right)
            if l is None or r is None:
                return None
            if not l[0]:
                return {k: l[1] * v for k, v in r[0].items()}, l[1] * r[1]
            if not r[0]:
                return {k: r[1] * v for k, v in l[0].items()}, r[1] * l[1]
            return None
        if e.op == "/":
            l, r = linear_coeffs(e.left), linear_coeffs(e.right)
            if l is None or r is None or r[0] or r[1] == 0:
                return None
            return {k: v / r[1] for k, v in l[0].items()}, l[1] / r[1]
    return None


def _atom_margin(atom: Binary, eps: float,
                 lipschitz: Optional[dict]) -> float:
    lhs = Binary("-", atom.left, atom.right)
    lin = linear_coeffs(lhs)
    if lin is not None:
        w, _ = lin
        return eps * sum(abs(v) for v in w.values())
    key = pretty_expr(atom)
    if lipschitz and key in lipschitz:
        return eps * lipschitz[key]
    raise DiscretizationError(
        "non-affine guard atom %r needs a declared Lipschitz constant" % key)


def _transform_guard(e: Expr, eps: float, widen: bool,
                     lipschitz: Optional[dict]) -> Expr:
    e = _push_neg(e)

    def go(e: Expr) -> Expr:
        if isinstance(e, BoolLit):
            return e
        if isinstance(e, Binary) and e.op in ("&&", "||"):
            return Binary(e.op, go(e.left), go(e.right))
        if isinstance(e, Binary) and e.op in ("<", "<=", ">", ">="):
            m = _atom_margin(e, eps, lipschitz)
            # a < c  widens to  a < c + m  and shrinks to  a < c - m;
            # lower bounds move the other way
            sign = 1.0 if (e.op in ("<", "<=")) == widen else -1.0
            return Binary(e.op, e.left,
                          Binary("+", e.right, const(sign * m))
                          if sign > 0 else
                          Binary("-", e.right, const(abs(sign) * m)))
        if isinstance(e, Binary) and e.op == "=":
            m = _atom_margin(e, eps, lipschitz)
            if widen:
                return Binary("&&",
                              Binary("<=", e.left,
                                     Binary("+", e.right, const(m))),
                              Binary(">=", e.left,
                                     Binary("-", e.right, const(m))))
            return BoolLit(False)  # an equality has empty interior
        if isinstance(e, Unary) and e.op == "!":
            # residual negation over a non-comparison operand
            raise DiscretizationError(
                "cannot transform negated non-affine guard %r"
                % pretty_expr(e))
        raise DiscretizationError("unsupported guard form %r" % pretty_expr(e))
    return go(e)


def expand_guard(b: Expr, eps: float,
                 lipschitz: Optional[dict] = None) -> Expr:
    """N(B, eps): every satisfying set grows by eps in the sup norm."""
    return _transform_guard(b, eps, widen=True, lipschitz=lipschitz)


def shrink_guard(b: Expr, eps: float,
                 lipschitz: Optional[dict] = None) -> Expr:
    """N(B, -eps): states at distance > eps from the complement of B."""
    return _transform_guard(b, eps, widen=False, lipschitz=lipschitz)


def next_step_guard(b: Expr, spec: OdeSpec, h: float, eps: float,
                    lipschitz: Optional[dict] = None) -> Expr:
    """N^n(B, eps): the widened guard evaluated one RK4 step ahead."""
    widened = expand_guard(b, eps, lipschitz)
    return NextGuard(spec.vars, spec.rhs, const(h), widened)


# ---------------------------------------------------------------------------
# HtoD: structural discretization
# ---------------------------------------------------------------------------

def _chain(*ps: Process) -> Process:
    out = None
    for p in ps:
        if out is None:
            out = p
        else:
            out = Seq(out, p)
    return out if out is not None else Skip()


def discretize_ode(spec: OdeSpec, h: float, eps: float, T: float,
                   fresh: FreshNames,
                   lipschitz: Optional[dict] = None) -> Process:
    """Step-bounded loop for one evolution:

        j := 1;
        ( !(N(B,eps) && Nn(B,eps)) -> j := 0;
          j = 1 -> (wait h; x := x + h*Phi(x,h)) )^N;
        N(B,eps) && Nn(B,eps) -> stop
    """
    j = fresh.fresh("__j")
    n_b = expand_guard(spec.domain, eps, lipschitz)
    nn_b = next_step_guard(spec.domain, spec, h, eps, lipschitz)
    inside = conj(n_b, nn_b)
    n_iter = max(1, math.ceil(T / h - 1e-12))
    body = _chain(
        Guarded(neg(inside), Assign(j, const(0))),
        Guarded(Binary("=", Var(j), const(1)),
                Seq(Wait(const(h)), RkStep(spec.vars, spec.rhs, const(h)))))
    return _chain(
        Assign(j, const(1)),
        Repeat(body, n_iter),
        Guarded(inside, HorizonStop()))


def discretize_interrupt(intr: Interrupt, h: float, eps: float, T: float,
                         fresh: FreshNames,
                         lipschitz: Optional[dict] = None) -> Process:
    """Step-bounded polling loop for an interrupted evolution:

        j1 := 1; j2 := -1;
        ( !(N(B,eps) && Nn(B,eps)) -> j1 := 0;
          j1 = 1 && j2 = -1 ->
              (c := 0; <c_dot = 1 & c <= h> |> [] (ch_i* -> j2 := i, ...));
          j1 = 1 && j2 = -1 -> x := x + h*Phi(x,h) )^N;
        j2 >= 0 -> (x := x + c*Phi(x,c); dispatch HtoD(p_i) on j2);
        j1 = 1 && j2 = -1 -> stop
    """
    spec = intr.spec
    j1 = fresh.fresh("__j1")
    j2 = fresh.fresh("__j2")
    c = fresh.fresh("__c")
    n_b = expand_guard(spec.domain, eps, lipschitz)
    nn_b = next_step_guard(spec.domain, spec, h, eps, lipschitz)
    inside = conj(n_b, nn_b)
    pending = conj(Binary("=", Var(j1), const(1)),
                   Binary("=", Var(j2), const(-1)))
    window = Interrupt(
        OdeSpec((c,), (const(1),), Binary("<=", Var(c), const(h))),
        tuple((cd, Assign(j2, const(i)))
              for i, (cd, _) in enumerate(intr.arms)))
    n_iter = max(1, math.ceil(T / h - 1e-12))
    body = _chain(
        Guarded(neg(inside), Assign(j1, const(0))),
        Guarded(pending, Seq(Assign(c, const(0)), window)),
        Guarded(pending, RkStep(spec.vars, spec.rhs, const(h))))
    dispatch = [Guarded(Binary("=", Var(j2), const(i)),
                        htod(cont, h, eps, T, fresh, lipschitz))
                for i, (_, cont) in enumerate(intr.arms)]
    taken = _chain(RkStep(spec.vars, spec.rhs, Var(c)), *dispatch)
    return _chain(
        Assign(j1, const(1)),
        Assign(j2, const(-1)),
        Repeat(body, n_iter),
        Guarded(Binary(">=", Var(j2), const(0)), taken),
        Guarded(pending, HorizonStop()))


def htod(pc: Process, h: float, eps: float, T: float,
         fresh: Optional[FreshNames] = None,
         lipschitz: Optional[dict] = None) -> Process:
    """Structural discretization: evolutions and interrupts become bounded
    loops; `wait` and all discrete constructs map homomorphically."""
    if fresh is None:
        fresh = FreshNames(free_vars(pc))
    if isinstance(pc, Parallel):
        return Parallel(tuple(htod(b, h, eps, T, fresh, lipschitz)
                              for b in pc.branches))
    if isinstance(pc, Ode):
        return discretize_ode(pc.spec, h, eps, T, fresh, lipschitz)
    if isinstance(pc, Interrupt):
        return discretize_interrupt(pc, h, eps, T, fresh, lipschitz)
    if isinstance(pc, Seq):
        return Seq(htod(pc.first, h, eps, T, fresh, lipschitz),
                   htod(pc.second, h, eps, T, fresh, lipschitz))
    if isinstance(pc, Guarded):
        return Guarded(pc.cond, htod(pc.body, h, eps, T, fresh, lipschitz))
    if isinstance(pc, IChoice):
        return IChoice(htod(pc.left, h, eps, T, fresh, lipschitz),
                       htod(pc.right, h, eps, T, fresh, lipschitz))
    if isinstance(pc, Repeat):
        return Repeat(htod(pc.body, h, eps, T, fresh, lipschitz), pc.count)
    return pc


def collect_odes(pc: Process) -> list:
    """(ode_id, OdeSpec) for every evolution, interrupt body, and wait
    clock in the process, in a stable order."""
    out = []
    idx = 0
    for node in walk(pc):
        if isinstance(node, (Ode, Interrupt)):
            out.append(("ode%d" % idx, node.spec))
            idx += 1
        elif isinstance(node, Wait):
            out.append(("clock%d" % idx,
                        OdeSpec(("__t",), (const(1),),
                                Binary("<", Var("__t"), node.duration))))
            idx += 1
    return out


# ---------------------------------------------------------------------------
# Robust-safety falsifier
# ---------------------------------------------------------------------------

@dataclass
class RobustViolation:
    kind: str        # 'guard-collar' | 'escape-clearance' | 'collar-dwell'
    where: str
    state: dict
    detail: str


@dataclass
class RobustReport:
    violations: list
    n_samples: int
    episodes: int

    @property
    def safe(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "verdict": "no violation found" if self.safe else "violation",
            "n_samples": self.n_samples,
            "episodes": self.episodes,
            "violations": [
                {"kind": v.kind, "where": v.where, "state": v.state,
                 "detail": v.detail} for v in self.violations],
        }


def _in_guard(b: Expr, s: HState) -> bool:
    return bool(eval_expr(b, s))


def check_robustly_safe(pc: Process, delta: float, eps: float,
                        n_samples: int = 1000, horizon: float = 10.0,
                        init: Optional[dict] = None,
                        jitter: Optional[float] = None,
                        h_ref: float = 1e-2, seed: int = 0,
                        lipschitz: Optional[dict] = None) -> RobustReport:
    """Sampling falsifier for robust safety at precisions (delta, eps).

    Each sample perturbs the initial state and runs the reference
    semantics.  Checks: (1) states reaching a continuous-variable guard lie
    in shrink(B) or shrink(not B); (2) after an evolution escapes at t,
    some t_hat in (t, t+delta) puts an eps-ball inside shrink(not B, eps),
    i.e. the center in shrink(not B, 2 eps); a trajectory that never leaves
    the eps-collar of its domain boundary for longer than delta is a
    violation as well.
    """
    from .semantics import (Config, FirstPolicy, SeededPolicy, WaitCap,
                            initial_config, par_successors, is_terminated)

    rng = np.random.default_rng(seed)
    violations: list[RobustViolation] = []
    episodes = 0
    base = initial_config(pc, init)

    for k in range(n_samples):
        state = base.hstate
        if jitter:
            state = {v: val + rng.uniform(-jitter, jitter)
                     for v, val in state.items()}
        cfg = Config.make(pc if not isinstance(pc, Parallel) else pc,
                          state, 0.0)
        violations_before = len(violations)
        episodes += _run_sample(cfg, delta, eps, horizon, h_ref,
                                seed * 7919 + k, violations, lipschitz)
        if violations_before != len(violations) and len(violations) >= 10:
            break
    return RobustReport(violations, n_samples, episodes)


def _run_sample(cfg, delta, eps, horizon, h_ref, seed, violations,
                lipschitz) -> int:
    from .semantics import SeededPolicy, is_terminated, par_successors

    episodes = 0
    policy = SeededPolicy(seed)
    steps = 0
    seen: dict[int, int] = {}  # branch index -> id of last checked episode
    while steps < 10000 and cfg.clock < horizon - 1e-12 \
            and not is_terminated(cfg):
        state = cfg.hstate
        for i, b in enumerate(_top_branches(cfg.proc)):
            head = _head(b)
            if isinstance(head, Guarded) and _continuous_guard(head.cond):
                if seen.get(i) != id(head):
                    seen[i] = id(head)
                    _check_guard_collar(head.cond, state, eps, violations,
                                        "branch[%d]" % i, lipschitz)
            elif isinstance(head, (Ode, Interrupt)):
                # an evolution keeps its node identity across delay steps,
                # so each episode is checked once, at its entry state
                if seen.get(i) != id(head):
                    seen[i] = id(head)
                    episodes += 1
                    _check_escape(head.spec, state, delta, eps, horizon,
                                  h_ref, violations, "branch[%d]" % i,
                                  lipschitz)
        succs = par_successors(cfg, h_ref=h_ref, budget=horizon - cfg.clock)
        succs = [s for s in succs if s.kind != "blocked"]
        if not succs:
            break
        cfg = succs[policy.choose(succs, steps)].config
        steps += 1
    return episodes


def _top_branches(p: Process):
    return p.branches if isinstance(p, Parallel) else (p,)


def _head(p: Process) -> Process:
    while isinstance(p, Seq):
        p = p.first
    return p


def _continuous_guard(b: Expr) -> bool:
    return bool(expr_vars(b)) and not isinstance(b, BoolLit)


def _check_guard_collar(b, state, eps, violations, where, lipschitz):
    try:
        inside = _in_guard(shrink_guard(b, eps, lipschitz), state)
        outside = _in_guard(shrink_guard(_push_neg(neg(b)), eps, lipschitz),
                            state)
    except DiscretizationError:
        return
    if not inside and not outside:
        violations.append(RobustViolation(
            "guard-collar", where, dict(state),
            "state within eps=%g of the boundary of %s"
            % (eps, pretty_expr(b))))


def _check_escape(spec, state, delta, eps, horizon, h_ref, violations,
                  where, lipschitz):
    try:
        not_b = _push_neg(neg(spec.domain))
        clearance = shrink_guard(not_b, 2 * eps, lipschitz)
        collar_in = shrink_guard(spec.domain, eps, lipschitz)
        collar_out = shrink_guard(not_b, eps, lipschitz)
    except DiscretizationError:
        return
    restricted = {v: state[v] for v in state}
    t_esc, landing, hit = ode_escape(spec, restricted, horizon, h_ref)
    if hit and t_esc > 0:
        # look for a clearance witness within (t_esc, t_esc + delta)
        probe_state = landing
        found = False
        n_probe = 32
        for j in range(1, n_probe + 1):
            dt = delta * j / (n_probe + 1)
            probe = _flow(spec, landing, dt, h_ref)
            if _in_guard(clearance, probe):
                found = True
                break
        if not found:
            violations.append(RobustViolation(
                "escape-clearance", where, dict(landing),
                "no t_hat in (t, t+delta) clears the eps-ball out of %s"
                % pretty_expr(spec.domain)))
    elif not hit:
        # no escape: flag a dwell inside the boundary collar longer than
        # delta (the trajectory never leaves the eps-collar)
        t, in_collar_since = 0.0, None
        probe = dict(restricted)
        step = max(h_ref, delta / 16)
        while t < horizon:
            inside = _in_guard(collar_in, probe)
            outside = _in_guard(collar_out, probe)
            if not inside and not outside:
                if in_collar_since is None:
                    in_collar_since = t
                elif t - in_collar_since > delta:
                    violations.append(RobustViolation(
                        "collar-dwell", where, dict(probe),
                        "trajectory stays within eps=%g of the boundary of "
                        "%s for longer than delta=%g"
                        % (eps, pretty_expr(spec.domain), delta)))
                    return
            else:
                in_collar_since = None
            probe = _flow(spec, probe, step, h_ref)
            t += step


def _flow(spec: OdeSpec, state: HState, d: float, h_ref: float) -> HState:
    from .semantics import rk4_state_step
    out = dict(state)
    t = 0.0
    while t < d - 1e-15:
        h = min(h_ref, d - t)
        out = rk4_state_step(spec.vars, spec.rhs, out, h)
        t += h
    return out
