"""Deterministic virtual machine for the multi-threaded C subset.

One rule fires per step: Assign, Funcr, FunEnd, Ret, Ret', SeqT/SeqF,
IfT/IfF, WhileT/WhileF, For, Nondet, Create, Lock, Unlock, WaitF, WaitT,
Signal, Join.  Function calls push a fresh frame and append a
frame-restoring marker; `return` sets the per-frame ret flag, after which
statements are discarded until the marker runs.  Condition variables are
persistent flags consumed by WaitT, exactly as in the rule set.

Scheduling is external: a step scheduler picks one enabled thread per
rule application; a block scheduler runs a chosen thread through a whole
atomic block (up to its next unlock or condition-variable block).  The
projector records the abstract machine row (program tags, local times,
thread states, the global clock, and the channel table) at every unlock
or cwait boundary, deduplicating consecutive identical rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from .cprog import (
    CArr, CAssign, CBin, CCall, CConst, CCreate, CEps, CFor, CIf, CJoin,
    CLock, CNondet, CProgram, CReturn, CRetMarker, CSeq, CSignal, CStmt,
    CUn, CUnlock, CVar, CWaitCV, CCWaitCV, CWhile, FuncDecl, cseq,
)

# thread state encoding shared with generated C
STOPPED = -5
WAITING = -4
AVAILABLE = -3
WAITING_AVAILABLE = -2
RUNNING = -1

DBL_MAX = 1.7976931348623157e308

_MASK64 = (1 << 64) - 1
_LCG_MUL = 6364136223846793005
_LCG_INC = 1442695040888963407


class VmError(Exception):
    pass


class NotEnabled(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def fmt17(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return "%.17g" % v


# ---------------------------------------------------------------------------
# Machine state
# ---------------------------------------------------------------------------

@dataclass
class VMState:
    funcs: dict                  # name -> FuncDecl
    T: dict                      # tid -> CStmt
    G: dict                      # global name -> value or list
    Es: dict                     # tid -> frame dict (vars + __ret/__retv)
    lcg: int
    meta: dict

    @staticmethod
    def boot(prog: CProgram, seed: int = 0) -> "VMState":
        g = {}
        for decl in prog.globals:
            if decl.type == "mutex":
                g[decl.name] = None
            elif decl.type.endswith("[]"):
                g[decl.name] = list(decl.init)
            else:
                g[decl.name] = decl.init
        main_tid = prog.meta.get("main_tid", prog.meta.get("n_threads", 0))
        lcg = (seed * 2654435761 + 1) & _MASK64
        return VMState(prog.function_table(),
                       {main_tid: CCall(None, prog.main.name, ())},
                       g, {main_tid: {"__ret": 0, "__retv": 0}},
                       lcg, dict(prog.meta))

    def clone(self) -> "VMState":
        return VMState(self.funcs, dict(self.T),
                       {k: (list(v) if isinstance(v, list) else v)
                        for k, v in self.G.items()},
                       {tid: dict(fr) for tid, fr in self.Es.items()},
                       self.lcg, self.meta)

    def done(self, tid) -> bool:
        return isinstance(self.T[tid], CEps)

    def all_done(self) -> bool:
        return all(isinstance(s, CEps) for s in self.T.values())

    def digest(self) -> str:
        parts = []
        for tid in sorted(self.T):
            parts.append("%s=%r" % (tid, self.T[tid]))
        for name in sorted(self.G):
            parts.append("%s=%r" % (name, self.G[name]))
        for tid in sorted(self.Es):
            parts.append("%s:%r" % (tid, sorted(self.Es[tid].items())))
        parts.append(str(self.lcg))
        return hashlib.blake2b("|".join(parts).encode(),
                               digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------

def eval_cexpr(e, G: dict, frame: dict):
    if isinstance(e, CConst):
        return e.value
    if isinstance(e, CVar):
        if e.name in frame:
            return frame[e.name]
        if e.name in G:
            return G[e.name]
        raise VmError("undeclared variable %r" % e.name)
    if isinstance(e, CArr):
        arr = G.get(e.name)
        if not isinstance(arr, list):
            raise VmError("not an array: %r" % e.name)
        idx = int(eval_cexpr(e.index, G, frame))
        if not 0 <= idx < len(arr):
            raise VmError("index %d out of range for %s[%d]"
                          % (idx, e.name, len(arr)))
        return arr[idx]
    if isinstance(e, CUn):
        v = eval_cexpr(e.operand, G, frame)
        return -v if e.op == "-" else (0 if v else 1)
    if isinstance(e, CBin):
        l = eval_cexpr(e.left, G, frame)
        if e.op == "&&":
            return 1 if (l and eval_cexpr(e.right, G, frame)) else 0
        if e.op == "||":
            return 1 if (l or eval_cexpr(e.right, G, frame)) else 0
        r = eval_cexpr(e.right, G, frame)
        if e.op == "+":
            return l + r
        if e.op == "-":
            return l - r
        if e.op == "*":
            return l * r
        if e.op == "/":
            if r == 0:
                raise VmError("division by zero")
            return l / r
        if e.op == "<":
            return 1 if l < r else 0
        if e.op == "<=":
            return 1 if l <= r else 0
        if e.op == "==":
            return 1 if l == r else 0
        if e.op == "!=":
            return 1 if l != r else 0
        if e.op == ">=":
            return 1 if l >= r else 0
        if e.op == ">":
            return 1 if l > r else 0
        raise VmError("unknown operator %r" % e.op)
    raise VmError("bad expression %r" % (e,))


# ---------------------------------------------------------------------------
# Single-thread stepping
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    stmt: CStmt
    rule: str
    updates: list       # effect ops, applied after computation


def _default_for(typ: str):
    return 0.0 if typ == "double" else 0


def _step_stmt(st: VMState, tid: int, stmt: CStmt, frame: dict) -> StepResult:
    """Computes one rule application; raises NotEnabled when no rule fires."""
    G = st.G
    ret = frame["__ret"]

    if isinstance(stmt, CSeq):
        if isinstance(stmt.first, CEps):
            return StepResult(stmt.second, "SeqF", [])
        sub = _step_stmt(st, tid, stmt.first, frame)
        return StepResult(cseq(sub.stmt, stmt.second) if
                          isinstance(sub.stmt, CEps) else
                          CSeq(sub.stmt, stmt.second), sub.rule, sub.updates)

    if isinstance(stmt, CRetMarker):
        if ret != 1:
            raise NotEnabled("marker before return completed")
        restored = dict(stmt.saved)
        restored["__ret"] = 0
        updates = [("Fset", restored)]
        if stmt.target is not None:
            updates.append(("assign-in", stmt.target, frame["__retv"],
                            restored))
        return StepResult(CEps(), "FunEnd", updates)

    if ret == 1:
        # everything except seq descent and the marker is discarded
        return StepResult(CEps(), "Ret'", [])

    if isinstance(stmt, CAssign):
        val = eval_cexpr(stmt.expr, G, frame)
        return StepResult(CEps(), "Assign",
                          [("assign", stmt.lhs, val)])

    if isinstance(stmt, CNondet):
        k = int(eval_cexpr(stmt.k, G, frame))
        if k <= 0:
            raise VmError("nondet over empty range")
        nxt = (st.lcg * _LCG_MUL + _LCG_INC) & _MASK64
        val = (nxt >> 33) % k
        return StepResult(CEps(), "Nondet",
                          [("lcg", nxt), ("assign", stmt.target, val)])

    if isinstance(stmt, CCall):
        fn = st.funcs.get(stmt.func)
        if fn is None:
            raise VmError("call to unknown function %r" % stmt.func)
        args = [eval_cexpr(a, G, frame) for a in stmt.args]
        if len(args) != len(fn.params):
            raise VmError("arity mismatch calling %s" % stmt.func)
        new_frame = {"__ret": 0, "__retv": 0}
        for (typ, name), v in zip(fn.params, args):
            new_frame[name] = int(v) if typ == "int" else v
        for typ, name in fn.locals:
            new_frame[name] = _default_for(typ)
        saved = tuple(sorted(frame.items()))
        cont = CSeq(fn.body, CSeq(CReturn(CConst(0)),
                                  CRetMarker(stmt.target, saved)))
        return StepResult(cont, "Funcr", [("Fset", new_frame)])

    if isinstance(stmt, CReturn):
        val = eval_cexpr(stmt.expr, G, frame) if stmt.expr is not None else 0
        return StepResult(CEps(), "Ret",
                          [("F", "__retv", val), ("F", "__ret", 1)])

    if isinstance(stmt, CIf):
        if eval_cexpr(stmt.cond, G, frame):
            return StepResult(stmt.then, "IfT", [])
        return StepResult(stmt.els if stmt.els is not None else CEps(),
                          "IfF", [])

    if isinstance(stmt, CWhile):
        if eval_cexpr(stmt.cond, G, frame):
            sub = _step_stmt(st, tid, stmt.body, frame)
            cont = CSeq(sub.stmt, stmt) if not isinstance(sub.stmt, CEps) \
                else CSeq(CEps(), stmt)
            return StepResult(cont, "WhileT", sub.updates)
        return StepResult(CEps(), "WhileF", [])

    if isinstance(stmt, CFor):
        body = CSeq(stmt.body, stmt.post) if stmt.post is not None \
            else stmt.body
        loop = CWhile(stmt.cond, body)
        cont = CSeq(stmt.init, loop) if stmt.init is not None else loop
        return StepResult(cont, "For", [])

    if isinstance(stmt, CCreate):
        if stmt.tid in st.T:
            raise VmError("thread %d already exists" % stmt.tid)
        fn = st.funcs.get(stmt.func)
        if fn is None:
            raise VmError("create of unknown function %r" % stmt.func)
        args = tuple(CConst(eval_cexpr(a, G, frame)) for a in stmt.args)
        return StepResult(CEps(), "Create",
                          [("spawn", stmt.tid, CCall(None, stmt.func, args),
                            dict(frame))])

    if isinstance(stmt, CLock):
        if G.get(stmt.name) is not None:
            raise NotEnabled("mutex %s held by %s"
                             % (stmt.name, G.get(stmt.name)))
        return StepResult(CEps(), "Lock", [("G", stmt.name, tid)])

    if isinstance(stmt, CUnlock):
        if G.get(stmt.name) != tid:
            raise VmError("unlock of %s by non-holder %d" % (stmt.name, tid))
        return StepResult(CEps(), "Unlock", [("G", stmt.name, None)])

    if isinstance(stmt, CWaitCV):
        if G.get(stmt.lock) != tid:
            raise VmError("wait without holding %s" % stmt.lock)
        cv = eval_cexpr(CArr(stmt.cv_array, stmt.cv_index), G, frame)
        if cv != 0:
            raise NotEnabled("wait with pending signal on %s" % stmt.cv_array)
        return StepResult(CCWaitCV(stmt.cv_array, stmt.cv_index, stmt.lock),
                          "WaitF", [("G", stmt.lock, None)])

    if isinstance(stmt, CCWaitCV):
        cv = eval_cexpr(CArr(stmt.cv_array, stmt.cv_index), G, frame)
        if cv != 1:
            raise NotEnabled("waiting on %s[%s]" % (stmt.cv_array,
                                                    stmt.cv_index))
        if G.get(stmt.lock) == tid:
            raise NotEnabled("cwait while holding the lock")
        idx = int(eval_cexpr(stmt.cv_index, G, frame))
        return StepResult(CLock(stmt.lock), "WaitT",
                          [("Garr", stmt.cv_array, idx, 0)])

    if isinstance(stmt, CSignal):
        idx = int(eval_cexpr(stmt.cv_index, G, frame))
        return StepResult(CEps(), "Signal", [("Garr", stmt.cv_array, idx, 1)])

    if isinstance(stmt, CJoin):
        if stmt.tid not in st.T:
            raise VmError("join on unknown thread %d" % stmt.tid)
        if not isinstance(st.T[stmt.tid], CEps):
            raise NotEnabled("join waiting for thread %d" % stmt.tid)
        return StepResult(CEps(), "Join", [])

    raise VmError("no rule for statement %r" % (stmt,))


def _apply(st: VMState, tid: int, res: StepResult):
    frame = st.Es[tid]
    for op in res.updates:
        kind = op[0]
        if kind == "assign":
            _, lhs, val = op
            _write(st, frame, lhs, val)
        elif kind == "assign-in":
            _, lhs, val, target_frame = op
            _write(st, target_frame, lhs, val)
        elif kind == "F":
            frame[op[1]] = op[2]
        elif kind == "Fset":
            st.Es[tid] = op[1]
            frame = op[1]
        elif kind == "G":
            st.G[op[1]] = op[2]
        elif kind == "Garr":
            st.G[op[1]][op[2]] = op[3]
        elif kind == "spawn":
            st.T[op[1]] = op[2]
            st.Es[op[1]] = op[3]
        elif kind == "lcg":
            st.lcg = op[1]
        else:
            raise VmError("bad update %r" % (op,))
    st.T[tid] = res.stmt


def _write(st: VMState, frame: dict, lhs, val):
    if isinstance(lhs, CVar):
        if lhs.name in frame:
            frame[lhs.name] = val
        elif lhs.name in st.G:
            st.G[lhs.name] = val
        else:
            raise VmError("undeclared variable %r" % lhs.name)
    elif isinstance(lhs, CArr):
        arr = st.G.get(lhs.name)
        if not isinstance(arr, list):
            raise VmError("not an array: %r" % lhs.name)
        idx = int(eval_cexpr(lhs.index, st.G, frame))
        if not 0 <= idx < len(arr):
            raise VmError("index out of range writing %s[%d]"
                          % (lhs.name, idx))
        arr[idx] = val
    else:
        raise VmError("bad assignment target %r" % (lhs,))


def step_thread(st: VMState, tid: int) -> str:
    """Applies the unique enabled rule for tid's head statement; returns
    the rule name.  Raises NotEnabled or VmError."""
    if tid not in st.T:
        raise VmError("no such thread %d" % tid)
    if st.done(tid):
        raise NotEnabled("thread finished")
    res = _step_stmt(st, tid, st.T[tid], st.Es[tid])
    _apply(st, tid, res)
    return res.rule


def peek_rule(st: VMState, tid: int) -> Optional[str]:
    """Rule that would fire for tid, or None when blocked/done."""
    if st.done(tid):
        return None
    try:
        return _step_stmt(st, tid, st.T[tid], st.Es[tid]).rule
    except NotEnabled:
        return None


def blocked_reason(st: VMState, tid: int) -> Optional[str]:
    if st.done(tid):
        return None
    try:
        _step_stmt(st, tid, st.T[tid], st.Es[tid])
        return None
    except NotEnabled as exc:
        return exc.reason


def enabled_tids(st: VMState) -> list:
    return [tid for tid in sorted(st.T) if peek_rule(st, tid) is not None]


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

def check_invariants(st: VMState):
    """Mutex holders are live threads; cv flags are 0/1; a thread blocked
    at cwait does not hold its lock."""
    for name, val in st.G.items():
        if name == st.meta.get("mutex_name", "mutex"):
            if val is not None and val not in st.T:
                raise VmError("mutex holder %r is not a live thread" % val)
        if name == st.meta.get("cond_name", "cond"):
            if any(v not in (0, 1) for v in val):
                raise VmError("condition flag out of range: %r" % val)
    for tid, stmt in st.T.items():
        head = _head(stmt)
        if isinstance(head, CCWaitCV) and st.G.get(head.lock) == tid:
            raise VmError("thread %d blocked at cwait while holding %s"
                          % (tid, head.lock))


def _head(stmt: CStmt) -> CStmt:
    while isinstance(stmt, CSeq):
        stmt = stmt.first
    return stmt


def thread_blocked_at_cwait(st: VMState, tid: int) -> bool:
    return isinstance(_head(st.T[tid]), CCWaitCV)


# ---------------------------------------------------------------------------
# Abstract rows and the projector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Row:
    kind: str            # init | unlock | cwait
    tid: int             # acting thread (-1 for the initial row)
    label: str           # block label from instrumentation, or ""
    ct: float
    threads: tuple       # per worker: (tag, lt, st_sym, pw, blocked)
    channels: tuple      # per channel: (in_tid, out_tid, value or None)

    def state_key(self):
        return (fmt17(self.ct),
                tuple(t[:4] for t in self.threads),
                tuple((c[0], c[1],
                       fmt17(c[2]) if c[2] is not None else "null")
                      for c in self.channels))

    def render(self) -> str:
        cols = [fmt17(self.ct)]
        for tag, lt, sym, pw, _ in self.threads:
            cols.append("%s|%s|%s|%d" % (tag, fmt17(lt), sym, pw))
        for cin, cout, val in self.channels:
            cols.append("%d|%d|%s" % (cin, cout,
                                      fmt17(val) if val is not None
                                      else "null"))
        return ",".join(cols)


_STATE_SYMS = {RUNNING: "R", WAITING: "W", AVAILABLE: "A",
               WAITING_AVAILABLE: "WA", STOPPED: "S"}


class Projector:
    """Builds abstract rows at unlock/cwait boundaries.

    Shows the last finite local time for threads whose localTime holds the
    infinite-wait sentinel, with the permanent-wait flag set, and shows a
    channel's content only while its output side is registered.
    """

    def __init__(self, meta: dict):
        self.n = meta.get("n_threads", 0)
        self.channels = meta.get("channels", [])
        self.tags = meta.get("tag_names", [])
        self.labels = meta.get("label_names", [])
        self.shadow_lt = [0.0] * self.n
        self.rows: list[Row] = []
        self._last_key = None

    def tag_name(self, code: int) -> str:
        if 0 <= code < len(self.tags):
            return self.tags[code]
        return "?"

    def label_name(self, code: int) -> str:
        if 0 <= code < len(self.labels):
            return self.labels[code]
        return "?"

    def snapshot(self, st: VMState, kind: str, tid: int) -> Row:
        g = st.G
        threads = []
        for i in range(self.n):
            lt = g["localTime"][i]
            pw = 1 if lt >= DBL_MAX else 0
            if not pw:
                self.shadow_lt[i] = lt
            raw = g["threadState"][i]
            sym = _STATE_SYMS.get(raw)
            if sym is None:
                sym = self.channels[raw] if 0 <= raw < len(self.channels) \
                    else str(raw)
            tag = self.tag_name(g["progTag"][i]) if "progTag" in g else "?"
            blocked = i in st.T and thread_blocked_at_cwait(st, i)
            threads.append((tag, self.shadow_lt[i], sym, pw, blocked))
        chans = []
        for k in range(len(self.channels)):
            cin = g["channelInput"][k]
            cout = g["channelOutput"][k]
            val = g["channelContent"][k] if cout != -1 else None
            chans.append((cin, cout, val))
        label = ""
        if kind != "init" and "blockTag" in g and 0 <= tid < self.n:
            label = self.label_name(g["blockTag"][tid])
        return Row(kind, tid, label, g["currentTime"], tuple(threads),
                   tuple(chans))

    def record(self, st: VMState, kind: str, tid: int) -> Row:
        row = self.snapshot(st, kind, tid)
        key = row.state_key()
        if key != self._last_key:
            self.rows.append(row)
            self._last_key = key
        return row


# ---------------------------------------------------------------------------
# Traces and drivers
# ---------------------------------------------------------------------------

@dataclass
class VMTrace:
    steps: list              # [(idx, tid, rule)]
    rows: list               # deduplicated projection rows
    blocks: list             # [(tid, label, row_index)] one per boundary
    verdict: str             # terminated | deadlock | fuel | script-exhausted
    final: VMState
    blocked: dict = field(default_factory=dict)

    def rows_rendered(self) -> list:
        return [r.render() for r in self.rows]


class StepScheduler:
    """Picks one enabled thread per rule application, deterministically
    from (seed, step index, enabled set)."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def pick(self, enabled: list, idx: int) -> int:
        key = "%d:%d:%s" % (self.seed, idx, ",".join(map(str, enabled)))
        h = hashlib.blake2b(key.encode(), digest_size=8).digest()
        return enabled[int.from_bytes(h, "big") % len(enabled)]


class BlockScript:
    """Runs threads one atomic block at a time, in scripted order; the
    main thread is drained whenever it can run (it takes no locks)."""

    def __init__(self, turns: list, auto_main: bool = True):
        self.turns = list(turns)
        self.auto_main = auto_main


def _run_turn(st: VMState, tid: int, projector: Projector,
              steps: list, blocks: list, fuel: int = 10000,
              invariants: bool = True) -> str:
    """Runs tid until it completes an atomic block (unlock plus trailing
    non-critical statements), blocks at a condition variable, becomes
    otherwise disabled, or finishes.  Returns one of 'done', 'blocked',
    'yield', 'fuel'."""
    unlocked = False
    for _ in range(fuel):
        if st.done(tid):
            return "done"
        try:
            res = _step_stmt(st, tid, st.T[tid], st.Es[tid])
        except NotEnabled:
            return "blocked"
        if unlocked and res.rule in ("Lock", "WaitT"):
            return "yield"
        _apply(st, tid, res)
        steps.append((len(steps), tid, res.rule))
        if invariants:
            check_invariants(st)
        if res.rule == "Unlock":
            unlocked = True
            row = projector.record(st, "unlock", tid)
            blocks.append((tid, row.label, len(projector.rows) - 1))
        elif res.rule == "WaitF":
            row = projector.record(st, "cwait", tid)
            blocks.append((tid, row.label, len(projector.rows) - 1))
            return "yield"
    return "fuel"


def run_vm(prog: CProgram, scheduler, fuel: int = 200000,
           seed: int = 0, invariants: bool = True) -> VMTrace:
    """Steps the program to completion, deadlock, or fuel exhaustion.

    `scheduler` is a StepScheduler (per-rule interleaving) or a BlockScript
    (per-atomic-block scripted order).
    """
    st = VMState.boot(prog, seed=seed)
    projector = Projector(prog.meta)
    projector.record(st, "init", -1)
    steps: list = []
    blocks: list = []

    if isinstance(scheduler, BlockScript):
        return _run_blocks(st, scheduler, projector, steps, blocks, fuel,
                           invariants)

    for idx in range(fuel):
        if st.all_done():
            return VMTrace(steps, projector.rows, blocks, "terminated", st)
        enabled = enabled_tids(st)
        if not enabled:
            reasons = {tid: blocked_reason(st, tid) for tid in sorted(st.T)
                       if not st.done(tid)}
            return VMTrace(steps, projector.rows, blocks, "deadlock", st,
                           blocked=reasons)
        tid = scheduler.pick(enabled, idx)
        rule = step_thread(st, tid)
        steps.append((idx, tid, rule))
        if invariants:
            check_invariants(st)
        if rule == "Unlock":
            row = projector.record(st, "unlock", tid)
            blocks.append((tid, row.label, len(projector.rows) - 1))
        elif rule == "WaitF":
            row = projector.record(st, "cwait", tid)
            blocks.append((tid, row.label, len(projector.rows) - 1))
    return VMTrace(steps, projector.rows, blocks, "fuel", st)


def _drain_main(st: VMState, main_tid: int, steps: list,
                invariants: bool, fuel: int = 10000):
    for _ in range(fuel):
        if main_tid not in st.T or st.done(main_tid):
            return
        if peek_rule(st, main_tid) is None:
            return
        rule = step_thread(st, main_tid)
        steps.append((len(steps), main_tid, rule))
        if invariants:
            check_invariants(st)


def _run_blocks(st: VMState, script: BlockScript, projector: Projector,
                steps: list, blocks: list, fuel: int,
                invariants: bool) -> VMTrace:
    main_tid = st.meta.get("main_tid", -1)
    for tid in script.turns:
        if script.auto_main:
            _drain_main(st, main_tid, steps, invariants)
        if tid not in st.T:
            return VMTrace(steps, projector.rows, blocks,
                           "script-exhausted", st,
                           blocked={tid: "not yet created"})
        outcome = _run_turn(st, tid, projector, steps, blocks,
                            invariants=invariants)
        if outcome == "fuel":
            return VMTrace(steps, projector.rows, blocks, "fuel", st)
    if script.auto_main:
        _drain_main(st, main_tid, steps, invariants)
    if st.all_done():
        return VMTrace(steps, projector.rows, blocks, "terminated", st)
    reasons = {tid: blocked_reason(st, tid) for tid in sorted(st.T)
               if not st.done(tid)}
    verdict = "deadlock" if not enabled_tids(st) else "script-exhausted"
    return VMTrace(steps, projector.rows, blocks, verdict, st,
                   blocked=reasons)


# ---------------------------------------------------------------------------
# Exhaustive block-level exploration
# ---------------------------------------------------------------------------

@dataclass
class Terminal:
    verdict: str          # terminated | deadlock | bound
    path: tuple           # thread turn order
    globals: dict         # final global store (arrays as tuples)
    blocked: dict = field(default_factory=dict)


def enumerate_interleavings(prog: CProgram, depth: int = 60,
                            dedup: bool = True, seed: int = 0,
                            max_nodes: int = 200000) -> list:
    """DFS over scheduler choices at atomic-block granularity.

    Every decision point offers each enabled thread one whole atomic block
    (the mutex, when taken, is always released again within a block).
    State-hash deduplication prunes joins of commuting schedules; all
    terminal states within the depth bound are returned, tagged
    terminated, deadlock, or bound.
    """
    boot = VMState.boot(prog, seed=seed)
    seen: set = set()
    out: list[Terminal] = []
    nodes = 0

    def final_globals(st: VMState) -> dict:
        return {k: (tuple(v) if isinstance(v, list) else v)
                for k, v in st.G.items()}

    def visit(st: VMState, path: tuple, depth_left: int):
        nonlocal nodes
        nodes += 1
        if nodes > max_nodes:
            raise VmError("exploration node budget exhausted")
        if st.all_done():
            out.append(Terminal("terminated", path, final_globals(st)))
            return
        enabled = enabled_tids(st)
        if not enabled:
            reasons = {tid: blocked_reason(st, tid) for tid in sorted(st.T)
                       if not st.done(tid)}
            out.append(Terminal("deadlock", path, final_globals(st),
                                reasons))
            return
        if depth_left <= 0:
            out.append(Terminal("bound", path, final_globals(st)))
            return
        for tid in enabled:
            child = st.clone()
            projector = Projector(prog.meta)
            _run_turn(child, tid, projector, [], [], invariants=True)
            if dedup:
                key = (child.digest(), depth_left - 1)
                if key in seen:
                    continue
                seen.add(key)
            visit(child, path + (tid,), depth_left - 1)

    visit(boot, (), depth)
    return out


def replay_block_path(prog: CProgram, path, seed: int = 0) -> VMTrace:
    """Reruns one explored interleaving with full projection, for checking."""
    return run_vm(prog, BlockScript(list(path), auto_main=False), seed=seed)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def vmtrace_to_csv(tr: VMTrace) -> str:
    lines = ["step,tid,rule"]
    for idx, tid, rule in tr.steps:
        lines.append("%d,%s,%s" % (idx, tid, rule))
    lines.append("--rows--")
    for row in tr.rows:
        lines.append(row.render())
    return "\n".join(lines) + "\n"
