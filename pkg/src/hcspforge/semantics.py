"""Executable small-step semantics for HCSP.

Sequential rules produce tau successors, communication offers, and wait
capabilities; the parallel rules combine them (per-branch tau, matched
synchronization, joint delay with pairwise-compatible ready sets).
Continuous evolution is resolved by a fine reference RK4 integrator with
bisection at the domain boundary, standing in for exact ODE solutions.

Conventions beyond the rule set, needed for executability:

- A terminated branch (skip) may idle through any joint delay with an
  empty ready set; the worked delay example requires this once its
  fastest branch finishes.
- An evolution whose domain is exhausted (false now, or true only at the
  current instant, as with a closed boundary like c <= h) exits by tau.
- A joint delay of infinite duration is reported as a terminal
  "blocked forever" wait event and never stepped past.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterable, Optional, Union

from .core import (
    IN, OUT, SYNC, Assign, Binary, BoolLit, Comm, CommDir, Const, Event,
    Expr, Guarded, HorizonStop, IChoice, Input, Interrupt, NextGuard, Ode,
    OdeSpec, Output, Parallel, Process, Repeat, RkStep, Seq, Skip, Tau,
    Unary, Var, Wait, WaitEvt, compat, free_vars, pretty,
)

HState = dict  # variable name -> float


class HcspRuntimeError(Exception):
    pass


class StuckError(HcspRuntimeError):
    """A non-skip sequential process with no applicable rule."""


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4096)
def compile_expr(e: Expr) -> Callable[[HState], float]:
    if isinstance(e, Const):
        v = e.value
        return lambda s: v
    if isinstance(e, Var):
        name = e.name

        def read(s, name=name):
            try:
                return s[name]
            except KeyError:
                raise HcspRuntimeError("unbound variable %r" % name) from None
        return read
    if isinstance(e, BoolLit):
        v = e.value
        return lambda s: v
    if isinstance(e, Unary):
        f = compile_expr(e.operand)
        if e.op == "-":
            return lambda s: -f(s)
        return lambda s: not f(s)
    if isinstance(e, Binary):
        lf, rf = compile_expr(e.left), compile_expr(e.right)
        op = e.op
        if op == "+":
            return lambda s: lf(s) + rf(s)
        if op == "-":
            return lambda s: lf(s) - rf(s)
        if op == "*":
            return lambda s: lf(s) * rf(s)
        if op == "/":
            def div(s):
                d = rf(s)
                if d == 0:
                    raise HcspRuntimeError("division by zero")
                return lf(s) / d
            return div
        if op == "<":
            return lambda s: lf(s) < rf(s)
        if op == "<=":
            return lambda s: lf(s) <= rf(s)
        if op == "=":
            return lambda s: lf(s) == rf(s)
        if op == ">=":
            return lambda s: lf(s) >= rf(s)
        if op == ">":
            return lambda s: lf(s) > rf(s)
        if op == "&&":
            return lambda s: lf(s) and rf(s)
        if op == "||":
            return lambda s: lf(s) or rf(s)
        raise HcspRuntimeError("unknown operator %r" % op)
    if isinstance(e, NextGuard):
        inner = compile_expr(e.inner)
        step_fn = compile_expr(e.step)
        vars_, rhs = e.vars, e.rhs

        def probe(s):
            stepped = rk4_state_step(vars_, rhs, s, step_fn(s))
            return inner(stepped)
        return probe
    raise HcspRuntimeError("unknown expression node %r" % (e,))


def eval_expr(e: Expr, s: HState):
    """Strict evaluation; unbound variables and division by zero raise."""
    return compile_expr(e)(s)


def rk4_state_step(vars_: tuple, rhs: tuple, s: HState, h: float) -> HState:
    """One classical RK4 step of the named variables, other state fixed."""
    fns = [compile_expr(r) for r in rhs]

    def deriv(st):
        return [f(st) for f in fns]

    def shifted(base, ks, scale):
        out = dict(base)
        for v, k in zip(vars_, ks):
            out[v] = base[v] + scale * k
        return out

    k1 = deriv(s)
    k2 = deriv(shifted(s, k1, 0.5 * h))
    k3 = deriv(shifted(s, k2, 0.5 * h))
    k4 = deriv(shifted(s, k3, h))
    out = dict(s)
    for i, v in enumerate(vars_):
        phi = (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) / 6.0
        out[v] = s[v] + h * phi
        if not math.isfinite(out[v]):
            raise HcspRuntimeError("non-finite value for %s in RK4 step" % v)
    return out


# ---------------------------------------------------------------------------
# ODE reference oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryHit:
    t_escape: float
    state: HState


DEFAULT_H_REF = 1e-3
BISECT_TOL = 1e-9


def _integrate(spec: OdeSpec, s: HState, d: float, h_ref: float) -> HState:
    state = dict(s)
    t = 0.0
    while t < d - 1e-15:
        h = min(h_ref, d - t)
        state = rk4_state_step(spec.vars, spec.rhs, state, h)
        t += h
    return state


def ode_escape(spec: OdeSpec, s: HState, cap: float,
               h_ref: float = DEFAULT_H_REF):
    """Largest t <= cap with the domain true on [0, t), via sampling at the
    reference grid and bisection on the flipping step.

    Returns (t_escape, state_at_escape, hit) where hit says the domain
    actually failed at t_escape (as opposed to the cap being reached).
    """
    dom = compile_expr(spec.domain)
    if not dom(s):
        return 0.0, dict(s), True
    state = dict(s)
    t = 0.0
    while t < cap - 1e-15:
        h = min(h_ref, cap - t)
        nxt = rk4_state_step(spec.vars, spec.rhs, state, h)
        if not dom(nxt):
            lo, hi = 0.0, h
            while hi - lo > BISECT_TOL:
                mid = 0.5 * (lo + hi)
                probe = rk4_state_step(spec.vars, spec.rhs, state, mid)
                if dom(probe):
                    lo = mid
                else:
                    hi = mid
            landing = rk4_state_step(spec.vars, spec.rhs, state, hi)
            return t + hi, landing, True
        state = nxt
        t += h
    return cap, state, False


def ode_evolve(spec: OdeSpec, s: HState, d: float,
               h_ref: float = DEFAULT_H_REF) -> Union[HState, BoundaryHit]:
    """State after following the ODE for duration d, or BoundaryHit at the
    first sampled time where the domain fails."""
    if d <= 0:
        raise HcspRuntimeError("evolution duration must be positive")
    t_esc, state, hit = ode_escape(spec, s, d, h_ref)
    if hit:
        return BoundaryHit(t_esc, state)
    return state


# ---------------------------------------------------------------------------
# Sequential capabilities
# ---------------------------------------------------------------------------

@dataclass
class CommCap:
    chan: str
    dir: str                   # IN or OUT
    value: Optional[float]     # payload for OUT, None for IN
    resume: Callable           # resume(v) -> (Process, HState)


@dataclass
class WaitCap:
    d_max: float               # may be math.inf
    rdy: frozenset
    evolve: Callable           # evolve(d) -> (Process, HState), 0 < d <= d_max


@dataclass
class Caps:
    taus: list                 # [(Process, HState)]
    comms: list                # [CommCap]
    wait: Optional[WaitCap]
    terminal: bool = False     # proc is skip
    stopped: bool = False      # proc is the horizon-stop marker


def seq_caps(p: Process, s: HState, budget: float,
             h_ref: float = DEFAULT_H_REF) -> Caps:
    """One-step capabilities of a sequential process.

    `budget` caps the duration of any offered delay (time left to the
    horizon); it keeps boundary detection finite for domains that never
    fail.
    """
    if isinstance(p, Skip):
        cap = WaitCap(math.inf, frozenset(),
                      lambda d, s=s: (Skip(), dict(s)))
        return Caps([], [], cap, terminal=True)
    if isinstance(p, HorizonStop):
        return Caps([], [], None, stopped=True)
    if isinstance(p, Assign):
        val = eval_expr(p.expr, s)
        s2 = dict(s)
        s2[p.var] = float(val)
        return Caps([(Skip(), s2)], [], None)
    if isinstance(p, Input):
        def resume_in(v, p=p, s=s):
            s2 = dict(s)
            s2[p.var] = float(v)
            return Skip(), s2
        cap = WaitCap(math.inf, frozenset([(p.chan, IN)]),
                      lambda d, p=p, s=s: (p, dict(s)))
        return Caps([], [CommCap(p.chan, IN, None, resume_in)], cap)
    if isinstance(p, Output):
        val = float(eval_expr(p.expr, s))
        cap = WaitCap(math.inf, frozenset([(p.chan, OUT)]),
                      lambda d, p=p, s=s: (p, dict(s)))
        return Caps([], [CommCap(p.chan, OUT, val,
                                 lambda v, s=s: (Skip(), dict(s)))], cap)
    if isinstance(p, Seq):
        head = seq_caps(p.first, s, budget, h_ref)
        if head.terminal:
            return Caps([(p.second, dict(s))], [], None)  # skip; c -> c
        second = p.second
        taus = [(Seq(q, second), s2) for q, s2 in head.taus]
        comms = [CommCap(c.chan, c.dir, c.value,
                         lambda v, c=c, second=second:
                         _seq_after(c.resume(v), second))
                 for c in head.comms]
        wait = None
        if head.wait is not None:
            hw = head.wait
            wait = WaitCap(hw.d_max, hw.rdy,
                           lambda d, hw=hw, second=second:
                           _seq_after(hw.evolve(d), second))
        return Caps(taus, comms, wait, stopped=head.stopped)
    if isinstance(p, Guarded):
        if eval_expr(p.cond, s):
            return Caps([(p.body, dict(s))], [], None)
        return Caps([(Skip(), dict(s))], [], None)
    if isinstance(p, IChoice):
        return Caps([(p.left, dict(s)), (p.right, dict(s))], [], None)
    if isinstance(p, Repeat):
        if p.count is not None:
            if p.count <= 0:
                return Caps([(Skip(), dict(s))], [], None)
            rest = Repeat(p.body, p.count - 1)
            return Caps([(Seq(p.body, rest) if p.count > 1 else p.body,
                          dict(s))], [], None)
        # unbounded: exit or unroll one iteration
        return Caps([(Skip(), dict(s)),
                     (Seq(p.body, p), dict(s))], [], None)
    if isinstance(p, Wait):
        d = float(eval_expr(p.duration, s))
        if d <= 0:
            return Caps([(Skip(), dict(s))], [], None)

        def evolve(dd, p=p, s=s, d=d):
            if dd >= d - 1e-15:
                return Skip(), dict(s)
            return Wait(Const(d - dd)), dict(s)
        return Caps([], [], WaitCap(d, frozenset(), evolve))
    if isinstance(p, RkStep):
        h = float(eval_expr(p.step, s))
        s2 = rk4_state_step(p.vars, p.rhs, s, h)
        return Caps([(Skip(), s2)], [], None)
    if isinstance(p, Ode):
        return _evolution_caps(p, p.spec, s, budget, h_ref,
                               exit_proc=Skip(), rdy=frozenset(), comms=[])
    if isinstance(p, Interrupt):
        comms = []
        for idx, (cd, cont) in enumerate(p.arms):
            if cd.dir == OUT:
                val = float(eval_expr(cd.expr, s))
                comms.append(CommCap(cd.chan, OUT, val,
                                     lambda v, cont=cont, s=s:
                                     (cont, dict(s))))
            else:
                def resume_in(v, cd=cd, cont=cont, s=s):
                    s2 = dict(s)
                    s2[cd.var] = float(v)
                    return cont, s2
                comms.append(CommCap(cd.chan, IN, None, resume_in))
        rdy = frozenset((cd.chan, cd.dir) for cd, _ in p.arms)
        return _evolution_caps(p, p.spec, s, budget, h_ref,
                               exit_proc=Skip(), rdy=rdy, comms=comms)
    raise StuckError("no rule for %r" % (p,))


def _seq_after(pair, second):
    q, s2 = pair
    if isinstance(q, Skip):
        return second, s2
    return Seq(q, second), s2


def _evolution_caps(p: Process, spec: OdeSpec, s: HState, budget: float,
                    h_ref: float, exit_proc: Process, rdy: frozenset,
                    comms: list) -> Caps:
    t_esc, landing, hit = ode_escape(spec, s, max(budget, 0.0), h_ref)
    if t_esc <= 0.0:
        # domain false now, or true only at this instant: exit by tau
        return Caps([(exit_proc, dict(s))], comms, None)

    def evolve(d, p=p, spec=spec, s=s, t_esc=t_esc, landing=landing,
               hit=hit, h_ref=h_ref):
        if hit and abs(d - t_esc) <= 1e-15:
            return p, landing
        out = ode_evolve(spec, s, d, h_ref)
        if isinstance(out, BoundaryHit):
            return p, out.state
        return p, out
    return Caps([], comms, WaitCap(t_esc, rdy, evolve))


# ---------------------------------------------------------------------------
# Configurations and parallel stepping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    proc: Process
    state: tuple          # sorted (name, value) pairs
    clock: float = 0.0

    @staticmethod
    def make(proc: Process, state: HState, clock: float = 0.0) -> "Config":
        return Config(proc, tuple(sorted(state.items())), clock)

    @property
    def hstate(self) -> HState:
        return dict(self.state)

    def digest(self) -> str:
        payload = "%s|%r|%r" % (pretty(self.proc), self.state, self.clock)
        return hashlib.blake2b(payload.encode(), digest_size=12).hexdigest()


def initial_config(proc: Process, init: Optional[HState] = None) -> Config:
    state = {v: 0.0 for v in sorted(free_vars(proc))}
    if init:
        state.update({k: float(v) for k, v in init.items()})
    return Config.make(proc, state, 0.0)


def _branches(p: Process) -> tuple:
    return p.branches if isinstance(p, Parallel) else (p,)


def _rebuild(p: Process, branches: list) -> Process:
    if isinstance(p, Parallel):
        return Parallel(tuple(branches))
    return branches[0]


def step_seq(c: Config, d_cap: Optional[float] = None,
             h_ref: float = DEFAULT_H_REF) -> list:
    """Successors of a sequential configuration.

    Wait successors are instantiated at the maximal admissible duration,
    capped at d_cap when given.  A stuck non-skip configuration raises
    StuckError.
    """
    if isinstance(c.proc, Parallel):
        raise HcspRuntimeError("step_seq on a parallel configuration")
    budget = d_cap if d_cap is not None else 1e9
    caps = seq_caps(c.proc, c.hstate, budget, h_ref)
    out = []
    for q, s2 in caps.taus:
        out.append((Tau(), Config.make(q, s2, c.clock)))
    for cm in caps.comms:
        if cm.dir == OUT:
            q, s2 = cm.resume(None)
            out.append((Comm(cm.chan, OUT, cm.value),
                        Config.make(q, s2, c.clock)))
        else:
            out.append((Comm(cm.chan, IN, None), c))
    if caps.wait is not None and caps.wait.d_max > 0:
        d = caps.wait.d_max
        if d_cap is not None:
            d = min(d, d_cap)
        if d > 0 and math.isfinite(d):
            q, s2 = caps.wait.evolve(d)
            out.append((WaitEvt(d, caps.wait.rdy),
                        Config.make(q, s2, c.clock + d)))
        elif d == math.inf:
            out.append((WaitEvt(math.inf, caps.wait.rdy), c))
    if not out and not caps.terminal and not caps.stopped:
        raise StuckError("stuck configuration: %s" % pretty(c.proc))
    return out


def _changed(new: HState, base: HState) -> HState:
    return {k: v for k, v in new.items() if k not in base or v != base[k]}


@dataclass
class ParSuccessor:
    event: Event
    config: Config
    kind: str           # 'tau' | 'comm' | 'wait' | 'blocked'
    branch: int = -1    # branch index for tau
    pair: tuple = ()    # (out_branch, in_branch) for comm


def par_successors(c: Config, d_grid: Optional[float] = None,
                   d_request: Optional[float] = None,
                   h_ref: float = DEFAULT_H_REF,
                   budget: Optional[float] = None) -> list:
    """G-Tau, G-Comm and G-delay successors of a configuration.

    The joint delay is the maximal duration every branch admits, capped
    at d_grid (or instantiated exactly at d_request when given).
    """
    branches = _branches(c.proc)
    state = c.hstate
    limit = budget if budget is not None else 1e9
    caps = [seq_caps(b, state, limit, h_ref) for b in branches]
    out: list[ParSuccessor] = []

    for i, cap in enumerate(caps):
        for q, s2 in cap.taus:
            bs = list(branches)
            bs[i] = q
            out.append(ParSuccessor(
                Tau(), Config.make(_rebuild(c.proc, bs), s2, c.clock),
                "tau", branch=i))

    for i, cap_i in enumerate(caps):
        for cm_out in cap_i.comms:
            if cm_out.dir != OUT:
                continue
            for j, cap_j in enumerate(caps):
                if i == j:
                    continue
                for cm_in in cap_j.comms:
                    if cm_in.dir != IN or cm_in.chan != cm_out.chan:
                        continue
                    bs = list(branches)
                    q_out, s_out = cm_out.resume(None)
                    q_in, s_in = cm_in.resume(cm_out.value)
                    bs[i], bs[j] = q_out, q_in
                    merged = dict(state)
                    merged.update(_changed(s_out, state))
                    merged.update(_changed(s_in, state))
                    out.append(ParSuccessor(
                        Comm(cm_out.chan, SYNC, cm_out.value),
                        Config.make(_rebuild(c.proc, bs), merged, c.clock),
                        "comm", pair=(i, j)))

    waits = [cap.wait for cap in caps]
    if all(w is not None for w in waits):
        rdys = [w.rdy for w in waits]
        ok = all(compat(rdys[i], rdys[j])
                 for i in range(len(rdys)) for j in range(i + 1, len(rdys)))
        if ok:
            d_joint = min(w.d_max for w in waits)
            rdy_all = frozenset().union(*rdys)
            if d_joint == math.inf:
                out.append(ParSuccessor(WaitEvt(math.inf, rdy_all), c,
                                        "blocked"))
            else:
                d = d_joint
                if d_request is not None:
                    d = d_request if d_request <= d_joint + 1e-12 else None
                elif d_grid is not None:
                    d = min(d, d_grid)
                if d is not None and d > 0:
                    # branches own disjoint variables, so merging only the
                    # entries each evolution changed is sound
                    bs, merged = [], dict(state)
                    for w in waits:
                        q, s2 = w.evolve(min(d, w.d_max))
                        bs.append(q)
                        merged.update(_changed(s2, state))
                    out.append(ParSuccessor(
                        WaitEvt(d, rdy_all),
                        Config.make(_rebuild(c.proc, bs), merged,
                                    c.clock + d), "wait"))
    return out


def step_par(c: Config, d_grid: Optional[float] = None,
             h_ref: float = DEFAULT_H_REF) -> list:
    """Spec-facing wrapper returning (event, config) pairs."""
    return [(s.event, s.config)
            for s in par_successors(c, d_grid=d_grid, h_ref=h_ref)]


def is_terminated(c: Config) -> bool:
    return all(isinstance(b, Skip) for b in _branches(c.proc))


def has_stop(c: Config) -> bool:
    return any(isinstance(b, HorizonStop) for b in _branches(c.proc))


# ---------------------------------------------------------------------------
# Trace generation
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    initial: Config
    steps: list            # [(Event, Config)]
    verdict: str           # terminated | horizon | blocked | deadlock |
                           # horizon-stop | budget
    def configs(self) -> list:
        return [self.initial] + [c for _, c in self.steps]

    def final(self) -> Config:
        return self.steps[-1][1] if self.steps else self.initial


class SchedulePolicy:
    """Resolves the choice among successors at each step."""

    d_grid: Optional[float] = None

    def choose(self, succs: list, step_idx: int) -> int:
        raise NotImplementedError


class FirstPolicy(SchedulePolicy):
    """Deterministic: taus in branch order, then comms, then the wait."""

    def __init__(self, d_grid: Optional[float] = None):
        self.d_grid = d_grid

    def choose(self, succs, step_idx):
        return 0


class SeededPolicy(SchedulePolicy):
    def __init__(self, seed: int, d_grid: Optional[float] = None):
        self.seed = seed
        self.d_grid = d_grid

    def choose(self, succs, step_idx):
        key = "%d:%d:%d" % (self.seed, step_idx, len(succs))
        h = hashlib.blake2b(key.encode(), digest_size=8).digest()
        return int.from_bytes(h, "big") % len(succs)


class ScriptedPolicy(SchedulePolicy):
    """Follows an explicit list of successor indices."""

    def __init__(self, choices: Iterable[int], d_grid: Optional[float] = None):
        self.choices = list(choices)
        self.d_grid = d_grid
        self.cursor = 0

    def choose(self, succs, step_idx):
        if self.cursor >= len(self.choices):
            raise HcspRuntimeError("schedule script exhausted at step %d"
                                   % step_idx)
        idx = self.choices[self.cursor]
        self.cursor += 1
        if not 0 <= idx < len(succs):
            raise HcspRuntimeError("script choice %d out of range (%d options)"
                                   % (idx, len(succs)))
        return idx


def run_trace(c0: Config, policy: SchedulePolicy, horizon: float,
              h_ref: float = DEFAULT_H_REF, max_steps: int = 100000) -> Trace:
    """Runs until termination, deadlock, blocked-forever wait, or the time
    horizon; every step is chosen by the policy."""
    steps = []
    c = c0
    for idx in range(max_steps):
        if c.clock >= horizon - 1e-12:
            return Trace(c0, steps, "horizon")
        if is_terminated(c):
            return Trace(c0, steps, "terminated")
        succs = par_successors(c, d_grid=policy.d_grid, h_ref=h_ref,
                               budget=horizon - c.clock)
        if not succs:
            verdict = "horizon-stop" if has_stop(c) else "deadlock"
            return Trace(c0, steps, verdict)
        blocked = [s for s in succs if s.kind == "blocked"]
        if len(blocked) == len(succs):
            steps.append((blocked[0].event, c))
            return Trace(c0, steps, "blocked")
        succs = [s for s in succs if s.kind != "blocked"]
        pick = succs[policy.choose(succs, idx)]
        steps.append((pick.event, pick.config))
        c = pick.config
    return Trace(c0, steps, "budget")


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------

def fmt17(v: float) -> str:
    return "%.17g" % v


def trace_to_csv(tr: Trace, obs: Optional[list] = None) -> str:
    obs = obs if obs is not None else sorted(tr.initial.hstate)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "event_kind", "channel", "value", "duration",
                "ready_set", "clock"] + list(obs))
    rows = [(0, None, tr.initial)] + [
        (i + 1, ev, cfg) for i, (ev, cfg) in enumerate(tr.steps)]
    for idx, ev, cfg in rows:
        kind, chan, value, duration, rdy = "init", "", "", "", ""
        if isinstance(ev, Tau):
            kind = "tau"
        elif isinstance(ev, Comm):
            kind, chan = "comm", ev.chan
            value = fmt17(ev.value) if ev.value is not None else ""
        elif isinstance(ev, WaitEvt):
            kind = "wait"
            duration = fmt17(ev.duration)
            rdy = " ".join(sorted("%s%s" % cd for cd in ev.rdy))
        state = cfg.hstate
        w.writerow([idx, kind, chan, value, duration, rdy,
                    fmt17(cfg.clock)] + [fmt17(state[v]) for v in obs])
    return buf.getvalue()
