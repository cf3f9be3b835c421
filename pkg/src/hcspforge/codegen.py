"""Translation of discrete HCSP into the multi-threaded C subset.

Each parallel branch becomes one thread function; the runtime library is
generated alongside: a shared mutex, one condition variable per thread,
local/global clocks with `delay` and `updateCurrentTime`, per-endpoint
`input`/`output` functions, per-signature `wait_comm` (deadline plus a
set of communications, returning the matched index or -1), per-field RK4
step helpers, and the `threadStop` epilogue.

Thread-state encoding: STOPPED, WAITING, AVAILABLE, WAITING_AVAILABLE,
RUNNING as negative constants, and a channel number >= 0 while a
communication on that channel is being completed.

In instrumented mode the code maintains `progTag` (remaining-program tag
per thread) and `blockTag`/`blockArm` (label of the atomic block being
closed), which the VM projector and the emitted trace hooks read at every
unlock/cwait boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .core import (
    IN, OUT, Assign, Binary, BoolLit, CommDir, Const, Expr, Guarded,
    HorizonStop, IChoice, Input, Interrupt, NextGuard, Ode, OdeSpec, Output,
    Parallel, Process, Repeat, RkStep, Seq, Skip, Unary, Var, Wait,
    free_vars, pretty, pretty_expr, fmt_num,
)
from .cprog import (
    CArr, CAssign, CBin, CCall, CConst, CCreate, CEps, CFor, CIf, CJoin,
    CLock, CNondet, CProgram, CReturn, CSeq, CSignal, CStmt, CUn, CUnlock,
    CVar, CWaitCV, CCWaitCV, CWhile, FuncDecl, GlobalDecl, cseq,
    validate_program, walk_stmts,
)
from .vm import (AVAILABLE, DBL_MAX, RUNNING, STOPPED, WAITING,
                 WAITING_AVAILABLE)

LABELS = ["init", "delay", "input", "input_a", "input_b", "output",
          "output_a", "output_b", "wait_comm", "wait_comm_a",
          "wait_comm_b", "stop"]
_L = {name: i for i, name in enumerate(LABELS)}


class CodegenError(Exception):
    pass


def translate_expr(e: Expr, rename: Optional[dict] = None):
    if isinstance(e, Const):
        return CConst(e.value)
    if isinstance(e, Var):
        name = rename.get(e.name, e.name) if rename else e.name
        return CVar(name)
    if isinstance(e, BoolLit):
        return CConst(1 if e.value else 0)
    if isinstance(e, Unary):
        return CUn(e.op, translate_expr(e.operand, rename))
    if isinstance(e, Binary):
        op = "==" if e.op == "=" else e.op
        return CBin(op, translate_expr(e.left, rename),
                    translate_expr(e.right, rename))
    if isinstance(e, NextGuard):
        raise CodegenError("next-step guard outside a guard position")
    raise CodegenError("untranslatable expression %r" % (e,))


# ---------------------------------------------------------------------------
# Compact program-point rendering (figure style)
# ---------------------------------------------------------------------------

def render_stmt(p: Process) -> str:
    if isinstance(p, Wait):
        return "delay(%s)" % pretty_expr(p.duration, 2)
    if isinstance(p, Input):
        return "input(%s)" % p.chan
    if isinstance(p, Output):
        return "output(%s)" % p.chan
    if isinstance(p, Interrupt) and is_comm_window(p):
        arms = ", ".join("%s%s" % (cd.chan, cd.dir) for cd, _ in p.arms)
        h = pretty_expr(p.spec.domain.right, 2)
        return "wait_comm(%s, [%s])" % (h, arms)
    if isinstance(p, HorizonStop):
        return "stop"
    if isinstance(p, Repeat):
        suffix = "*" if p.count is None else "*%d" % p.count
        return "(...)%s" % suffix
    if isinstance(p, Guarded):
        return "%s -> ..." % pretty_expr(p.cond, 2)
    return pretty(p)


def render_rest(stmts: list, kont: tuple) -> str:
    pieces = [render_stmt(s) for s in stmts] + list(kont)
    return "; ".join(pieces) if pieces else "skip"


def is_comm_window(p: Process) -> bool:
    """The polling window emitted for interrupts: a unit-rate clock with a
    closed step-bound domain whose arms only record the taken index."""
    if not isinstance(p, Interrupt) or len(p.spec.vars) != 1:
        return False
    spec = p.spec
    if spec.rhs != (Const(1.0),):
        return False
    dom = spec.domain
    if not (isinstance(dom, Binary) and dom.op == "<="
            and dom.left == Var(spec.vars[0])):
        return False
    return all(isinstance(cont, Assign) and isinstance(cont.expr, Const)
               for _, cont in p.arms)


def flatten_seq(p: Process) -> list:
    if isinstance(p, Seq):
        return flatten_seq(p.first) + flatten_seq(p.second)
    if isinstance(p, Skip):
        return []
    return [p]


# ---------------------------------------------------------------------------
# The generator
# ---------------------------------------------------------------------------

@dataclass
class ChannelTable:
    names: list                      # channel name by number
    numbers: dict                    # name -> number

    @staticmethod
    def build(pc: Process) -> "ChannelTable":
        from .core import channel_dirs
        names = sorted({ch for ch, _ in channel_dirs(pc)})
        return ChannelTable(names, {n: i for i, n in enumerate(names)})


class CodeGenerator:
    def __init__(self, pc: Process, horizon: float, h: Optional[float] = None,
                 instrumented: bool = True, name: str = "model"):
        self.pc = pc
        self.branches = list(pc.branches) if isinstance(pc, Parallel) else [pc]
        self.n = len(self.branches)
        self.horizon = horizon
        self.h = h
        self.instrumented = instrumented
        self.name = name
        self.channels = ChannelTable.build(pc)
        self.tags: list[str] = []
        self._tag_index: dict = {}
        self.functions: list[FuncDecl] = []
        self._fn_names: set = set()
        self._endpoint_funcs: dict = {}
        self._wc_funcs: dict = {}
        self._rk_funcs: dict = {}
        self._next_funcs: dict = {}
        self.sites: list[dict] = []
        self.hvars = sorted(free_vars(pc))
        self._local_counter = 0

    # -- small utilities ---------------------------------------------------

    def tag(self, text: str) -> int:
        if text not in self._tag_index:
            self._tag_index[text] = len(self.tags)
            self.tags.append(text)
        return self._tag_index[text]

    def add_function(self, fn: FuncDecl):
        if fn.name in self._fn_names:
            raise CodegenError("duplicate function %s" % fn.name)
        self._fn_names.add(fn.name)
        self.functions.append(fn)

    def _set_block(self, tid, label: str, arm: Optional[int] = None) -> list:
        if not self.instrumented:
            return []
        out = [CAssign(CArr("blockTag", tid), CConst(_L[label]))]
        if arm is not None:
            out.append(CAssign(CArr("blockArm", tid), CConst(arm)))
        return out

    # -- runtime library ----------------------------------------------------

    def gen_update_current_time(self) -> FuncDecl:
        tid = CVar("tid")
        i = CVar("i")
        body = cseq(
            CAssign(CVar("minLocal"), CVar("DBL_MAX")),
            CFor(CAssign(i, CConst(0)),
                 CBin("<", i, CVar("numThread")),
                 CAssign(i, CBin("+", i, CConst(1))),
                 CIf(CBin("&&",
                          CBin("!=", CArr("threadState", i), CVar("STOPPED")),
                          CBin("<", CArr("localTime", i), CVar("minLocal"))),
                     CAssign(CVar("minLocal"), CArr("localTime", i)))),
            # keep the clock put when no live thread bounds it (all stopped
            # or all waiting on communication only)
            CIf(CBin("&&", CBin("<", CVar("currentTime"), CVar("minLocal")),
                     CBin("<", CVar("minLocal"), CVar("DBL_MAX"))),
                CAssign(CVar("currentTime"), CVar("minLocal"))),
            CFor(CAssign(i, CConst(0)),
                 CBin("<", i, CVar("numThread")),
                 CAssign(i, CBin("+", i, CConst(1))),
                 cseq(
                     CIf(CBin("&&", CBin("!=", i, tid),
                              CBin("&&",
                                   CBin("==", CArr("localTime", i),
                                        CVar("currentTime")),
                                   CBin("==", CArr("threadState", i),
                                        CVar("WAITING")))),
                         cseq(CAssign(CArr("threadState", i), CVar("RUNNING")),
                              CSignal("cond", i))),
                     CIf(CBin("&&", CBin("!=", i, tid),
                              CBin("&&",
                                   CBin("==", CArr("localTime", i),
                                        CVar("currentTime")),
                                   CBin("==", CArr("threadState", i),
                                        CVar("WAITING_AVAILABLE")))),
                         cseq(CAssign(CArr("threadState", i),
                                      CVar("AVAILABLE")),
                              CSignal("cond", i))))))
        return FuncDecl("void", "updateCurrentTime", (("int", "tid"),),
                        (("double", "minLocal"), ("int", "i")), body)

    def gen_delay(self) -> FuncDecl:
        tid = CVar("tid")
        params = [("int", "tid"), ("double", "secs")]
        tag_stmts = []
        if self.instrumented:
            params.append(("int", "tagRest"))
            tag_stmts = [CAssign(CArr("progTag", tid), CVar("tagRest"))]
        body = cseq(
            CLock("mutex"),
            CAssign(CArr("localTime", tid),
                    CBin("+", CArr("localTime", tid), CVar("secs"))),
            CCall(None, "updateCurrentTime", (tid,)),
            *tag_stmts,
            *self._set_block(tid, "delay"),
            CIf(CBin(">", CArr("localTime", tid), CVar("currentTime")),
                cseq(CAssign(CArr("threadState", tid), CVar("WAITING")),
                     CWaitCV("cond", tid, "mutex"))),
            CUnlock("mutex"))
        return FuncDecl("void", "delay", tuple(params), (), body)

    def gen_thread_stop(self) -> FuncDecl:
        tid = CVar("tid")
        body = cseq(
            CLock("mutex"),
            *self._set_block(tid, "stop"),
            CAssign(CArr("threadState", tid), CVar("STOPPED")),
            CCall(None, "updateCurrentTime", (tid,)),
            CUnlock("mutex"))
        return FuncDecl("void", "threadStop", (("int", "tid"),), (), body)

    def endpoint_fn(self, kind: str, chan: str, payload) -> str:
        """input/output function specialized to one channel endpoint."""
        key = (kind, chan, payload if isinstance(payload, str)
               else pretty_expr(payload))
        if key in self._endpoint_funcs:
            return self._endpoint_funcs[key]
        idx = len(self._endpoint_funcs)
        name = "%s_%d" % (kind, idx)
        self._endpoint_funcs[key] = name
        cno = CConst(self.channels.numbers[chan])
        tid, i = CVar("tid"), CVar("i")
        params = [("int", "tid")]
        if self.instrumented:
            params += [("int", "tagA"), ("int", "tagB"), ("int", "tagRest")]

        def tag(which) -> list:
            if not self.instrumented:
                return []
            return [CAssign(CArr("progTag", tid), CVar(which))]

        partner_ready = CBin(
            "&&", CBin("!=", i, CConst(-1)),
            CBin("||", CBin("==", CArr("threadState", i), CVar("AVAILABLE")),
                 CBin("==", CArr("threadState", i),
                      CVar("WAITING_AVAILABLE"))))
        if kind == "input":
            register = [CAssign(CArr("channelInput", cno), tid)]
            read_partner = CAssign(i, CArr("channelOutput", cno))
            copy = [CAssign(CVar(payload), CArr("channelContent", cno))]
            unregister = CAssign(CArr("channelInput", cno), CConst(-1))
            lbl = "input"
        else:
            register = [CAssign(CArr("channelOutput", cno), tid),
                        CAssign(CArr("channelContent", cno),
                                translate_expr(payload))]
            read_partner = CAssign(i, CArr("channelInput", cno))
            copy = []
            unregister = CAssign(CArr("channelOutput", cno), CConst(-1))
            lbl = "output"

        ready_branch = cseq(
            CAssign(CArr("threadState", i), cno),
            *copy,
            CSignal("cond", i),
            *tag("tagA"),
            *self._set_block(tid, lbl),
            CWaitCV("cond", tid, "mutex"),
            unregister,
            *tag("tagRest"),
            *self._set_block(tid, lbl + "_a"))
        wait_branch = cseq(
            CAssign(CArr("threadState", tid), CVar("AVAILABLE")),
            CAssign(CArr("localTime", tid), CVar("DBL_MAX")),
            CCall(None, "updateCurrentTime", (tid,)),
            *tag("tagB"),
            *self._set_block(tid, lbl),
            CWaitCV("cond", tid, "mutex"),
            *copy,
            CAssign(CArr("threadState", tid), CVar("RUNNING")),
            # reread the partner: it was unknown when this side registered
            read_partner,
            CAssign(CArr("localTime", tid), CArr("localTime", i)),
            unregister,
            CSignal("cond", i),
            *tag("tagRest"),
            *self._set_block(tid, lbl + "_b"))
        body = cseq(
            CLock("mutex"),
            *register,
            read_partner,
            CIf(partner_ready, ready_branch, wait_branch),
            CUnlock("mutex"))
        self.add_function(FuncDecl("void", name, tuple(params),
                                   (("int", "i"),), body))
        return name

    def wait_comm_fn(self, duration: Expr, arms: list) -> str:
        """wait_comm specialized to a deadline expression and arm list;
        arms are (CommDir, arm_index_value) pairs in order."""
        key = (pretty_expr(duration),
               tuple((cd.chan, cd.dir,
                      cd.var if cd.dir == IN else pretty_expr(cd.expr))
                     for cd in arms))
        if key in self._wc_funcs:
            return self._wc_funcs[key]
        idx = len(self._wc_funcs)
        name = "waitComm_%d" % idx
        self._wc_funcs[key] = name

        tid = CVar("tid")
        m, u, k, cnt = CVar("m"), CVar("u"), CVar("k"), CVar("cnt")
        res = CVar("res")
        params = [("int", "tid")]
        if self.instrumented:
            params += [("int", "tagPendB"), ("int", "tagRest")]
            params += [("int", "tagA%d" % a) for a in range(len(arms))]

        def tag(which) -> list:
            if not self.instrumented:
                return []
            return [CAssign(CArr("progTag", tid), CVar(which))]

        def cno(cd) -> CConst:
            return CConst(self.channels.numbers[cd.chan])

        register, clear = [], []
        for cd in arms:
            if cd.dir == IN:
                register.append(CAssign(CArr("channelInput", cno(cd)), tid))
                clear.append(CAssign(CArr("channelInput", cno(cd)),
                                     CConst(-1)))
            else:
                register.append(CAssign(CArr("channelOutput", cno(cd)), tid))
                register.append(CAssign(CArr("channelContent", cno(cd)),
                                        translate_expr(cd.expr)))
                clear.append(CAssign(CArr("channelOutput", cno(cd)),
                                     CConst(-1)))

        def partner_of(cd):
            arr = "channelOutput" if cd.dir == IN else "channelInput"
            return CArr(arr, cno(cd))

        def ready(cd):
            return CBin(
                "&&", CBin("!=", partner_of(cd), CConst(-1)),
                CBin("||",
                     CBin("==", CArr("threadState", partner_of(cd)),
                          CVar("AVAILABLE")),
                     CBin("==", CArr("threadState", partner_of(cd)),
                          CVar("WAITING_AVAILABLE"))))

        count = [CAssign(k, CConst(0))]
        for cd in arms:
            count.append(CIf(ready(cd), CAssign(k, CBin("+", k, CConst(1)))))

        # reserve the u-th ready arm: set the partner's state to the channel
        # number, copy the value on an input arm, handshake, clean up
        pick = [CNondet(u, k), CAssign(cnt, CConst(0))]
        for a, cd in enumerate(arms):
            reserve = [CAssign(m, partner_of(cd)),
                       CAssign(CArr("threadState", m), cno(cd))]
            if cd.dir == IN:
                reserve.append(CAssign(CVar(cd.var),
                                       CArr("channelContent", cno(cd))))
            reserve += [
                CSignal("cond", m),
                *tag("tagA%d" % a),
                *self._set_block(tid, "wait_comm", arm=a),
                CWaitCV("cond", tid, "mutex"),
                CAssign(res, CConst(a)),
                *self._set_block(tid, "wait_comm_a", arm=a),
            ]
            pick.append(CIf(ready(cd), cseq(
                CIf(CBin("==", cnt, u), cseq(*reserve)),
                CAssign(cnt, CBin("+", cnt, CConst(1))))))

        # completion after a communication arrived during the wait: the
        # thread state holds the channel number of the matched arm
        resolve = [CAssign(CVar("cur"), CArr("threadState", tid))]
        for a, cd in enumerate(arms):
            hit = [CAssign(res, CConst(a))]
            if cd.dir == IN:
                hit.append(CAssign(CVar(cd.var),
                                   CArr("channelContent", cno(cd))))
            hit.append(CAssign(m, partner_of(cd)))
            if self.instrumented:
                hit.append(CAssign(CArr("blockArm", tid), CConst(a)))
            resolve.append(CIf(CBin("==", CVar("cur"), cno(cd)), cseq(*hit)))
        resolve += [
            CAssign(CArr("localTime", tid), CArr("localTime", m)),
            CAssign(CArr("threadState", tid), CVar("RUNNING")),
            *clear,
            CSignal("cond", m),
            *tag("tagRest"),
        ]
        if self.instrumented:
            resolve.append(CAssign(CArr("blockTag", tid),
                                   CConst(_L["wait_comm_b"])))

        timeout_after_block = cseq(
            CAssign(CArr("threadState", tid), CVar("RUNNING")),
            *clear,
            *tag("tagRest"),
            *self._set_block(tid, "wait_comm"))
        blocked_wait = cseq(
            CAssign(CArr("threadState", tid), CVar("WAITING_AVAILABLE")),
            *tag("tagPendB"),
            *self._set_block(tid, "wait_comm"),
            CWaitCV("cond", tid, "mutex"),
            CIf(CBin("==", CArr("threadState", tid), CVar("AVAILABLE")),
                timeout_after_block,
                cseq(*resolve)))
        immediate_timeout = cseq(*clear, *tag("tagRest"),
                                 *self._set_block(tid, "wait_comm"))
        no_partner = cseq(
            CAssign(CArr("localTime", tid),
                    CBin("+", CArr("localTime", tid),
                         translate_expr(duration))),
            CCall(None, "updateCurrentTime", (tid,)),
            CIf(CBin(">", CArr("localTime", tid), CVar("currentTime")),
                blocked_wait,
                immediate_timeout))

        body = cseq(
            CLock("mutex"),
            *register,
            *count,
            CAssign(res, CConst(-1)),
            CIf(CBin(">", k, CConst(0)),
                cseq(*pick, *clear, *tag("tagRest")),
                no_partner),
            CUnlock("mutex"),
            CReturn(res))
        locals_ = (("int", "m"), ("int", "u"), ("int", "k"), ("int", "cnt"),
                   ("int", "res"), ("int", "cur"))
        self.add_function(FuncDecl("int", name, tuple(params), locals_, body))
        return name

    # -- RK4 helpers ---------------------------------------------------------

    def rk_fn(self, vars_: tuple, rhs: tuple, probe: bool) -> str:
        key = (vars_, tuple(pretty_expr(r) for r in rhs))
        table = self._next_funcs if probe else self._rk_funcs
        if key in table:
            return table[key]
        idx = len(table)
        name = ("next_%d" if probe else "rk4_%d") % idx
        table[key] = name
        s = CVar("s")
        locals_ = []
        stmts = []
        stage_env: dict = {}
        for stage, scale in (("k1", None), ("k2", 0.5), ("k3", 0.5),
                             ("k4", 1.0)):
            prev = {v: CVar("%s_%s" % (prev_stage(stage), v)) for v in vars_}
            rename_env = {}
            for v in vars_:
                if stage == "k1":
                    rename_env[v] = CVar(v)
                else:
                    factor = CBin("*", CConst(scale), s) if scale != 1.0 \
                        else s
                    rename_env[v] = CBin("+", CVar(v),
                                         CBin("*", factor, prev[v]))
            for v, r in zip(vars_, rhs):
                kv = "%s_%s" % (stage, v)
                locals_.append(("double", kv))
                stmts.append(CAssign(CVar(kv),
                                     _subst_cexpr(r, rename_env)))
        for v in vars_:
            phi = CBin("/",
                       CBin("+",
                            CBin("+",
                                 CBin("+", CVar("k1_%s" % v),
                                      CBin("*", CConst(2.0),
                                           CVar("k2_%s" % v))),
                                 CBin("*", CConst(2.0), CVar("k3_%s" % v))),
                            CVar("k4_%s" % v)),
                       CConst(6.0))
            target = CVar(v + "__nx") if probe else CVar(v)
            stmts.append(CAssign(target,
                                 CBin("+", CVar(v), CBin("*", s, phi))))
        self.add_function(FuncDecl("void", name, (("double", "s"),),
                                   tuple(locals_), cseq(*stmts)))
        return name

    # -- guard translation ----------------------------------------------------

    def translate_guard(self, cond: Expr, tid_expr) -> tuple:
        """Returns (prelude statements, condition CExpr); next-step guards
        become probe calls writing `<var>__nx` globals."""
        preludes: list[CStmt] = []
        seen_probe: dict = {}

        def go(e: Expr):
            if isinstance(e, NextGuard):
                key = (e.vars, tuple(pretty_expr(r) for r in e.rhs),
                       pretty_expr(e.step))
                if key not in seen_probe:
                    fn = self.rk_fn(e.vars, e.rhs, probe=True)
                    preludes.append(CCall(None, fn,
                                          (translate_expr(e.step),)))
                    seen_probe[key] = fn
                rename = {v: v + "__nx" for v in e.vars}
                return translate_expr(e.inner, rename)
            if isinstance(e, Binary):
                op = "==" if e.op == "=" else e.op
                return CBin(op, go(e.left), go(e.right))
            if isinstance(e, Unary):
                return CUn(e.op, go(e.operand))
            return translate_expr(e)
        return preludes, go(cond)

    # -- branch translation -----------------------------------------------

    def translate_branch(self, branch_idx: int, branch: Process) -> FuncDecl:
        tid = CConst(branch_idx)
        self._local_counter = 0
        locals_: list = [("double", "__rec")]
        stmts = self._translate_stmts(branch_idx, flatten_seq(branch), (),
                                      locals_)
        body = cseq(*stmts, CCall(None, "threadStop", (tid,)))
        used = set()
        for node in walk_stmts(body):
            from .cprog import _stmt_exprs, walk_expr_vars
            for e in _stmt_exprs(node):
                used.update(walk_expr_vars(e))
        kept = tuple(l for l in locals_ if l[1] in used)
        return FuncDecl("void", "th%d" % branch_idx, (("int", "tid"),),
                        kept, body)

    def _fresh_local(self, locals_: list, base: str, typ: str = "int") -> str:
        name = "%s%d" % (base, self._local_counter)
        self._local_counter += 1
        locals_.append((typ, name))
        return name

    def _translate_stmts(self, bi: int, stmts: list, kont: tuple,
                         locals_: list) -> list:
        out: list[CStmt] = []
        for i, p in enumerate(stmts):
            rest = stmts[i + 1:]
            out.extend(self._translate_one(bi, p, rest, kont, locals_))
        return out

    def _translate_one(self, bi: int, p: Process, rest: list, kont: tuple,
                       locals_: list) -> list:
        tid = CConst(bi)
        rest_tag = self.tag(render_rest(rest, kont))

        if isinstance(p, Skip):
            return []
        if isinstance(p, Assign):
            return [CAssign(CVar(p.var), translate_expr(p.expr))]
        if isinstance(p, Wait):
            args = [tid, translate_expr(p.duration)]
            if self.instrumented:
                args.append(CConst(rest_tag))
            self.sites.append({"branch": bi, "kind": "delay",
                               "render": render_stmt(p)})
            return [CCall(None, "delay", tuple(args))]
        if isinstance(p, Input) or isinstance(p, Output):
            kind = "input" if isinstance(p, Input) else "output"
            payload = p.var if isinstance(p, Input) else p.expr
            fn = self.endpoint_fn(kind, p.chan, payload)
            args = [tid]
            if self.instrumented:
                pend_a = self.tag(render_rest(
                    [], ("%s_a(%s)" % (kind, p.chan),) +
                        tuple(render_stmt(s) for s in rest) + kont))
                pend_b = self.tag(render_rest(
                    [], ("%s_b(%s)" % (kind, p.chan),) +
                        tuple(render_stmt(s) for s in rest) + kont))
                args += [CConst(pend_a), CConst(pend_b), CConst(rest_tag)]
            self.sites.append({"branch": bi, "kind": kind, "chan": p.chan,
                               "render": render_stmt(p)})
            return [CCall(None, fn, tuple(args))]
        if isinstance(p, Seq):
            return self._translate_stmts(
                bi, flatten_seq(p),
                tuple(render_stmt(s) for s in rest) + kont, locals_)
        if isinstance(p, Guarded):
            prelude, cond = self.translate_guard(p.cond, tid)
            inner = self._translate_stmts(
                bi, flatten_seq(p.body),
                tuple([render_stmt(s) for s in rest]) + kont, locals_)
            return prelude + [CIf(cond, cseq(*inner))]
        if isinstance(p, IChoice):
            ch = self._fresh_local(locals_, "__ch")
            left = self._translate_stmts(
                bi, flatten_seq(p.left),
                tuple([render_stmt(s) for s in rest]) + kont, locals_)
            right = self._translate_stmts(
                bi, flatten_seq(p.right),
                tuple([render_stmt(s) for s in rest]) + kont, locals_)
            return [CNondet(CVar(ch), CConst(2)),
                    CIf(CBin("==", CVar(ch), CConst(0)),
                        cseq(*left), cseq(*right))]
        if isinstance(p, Repeat):
            inner_kont = (render_stmt(p),) + \
                tuple([render_stmt(s) for s in rest]) + kont
            body = self._translate_stmts(bi, flatten_seq(p.body), inner_kont,
                                         locals_)
            if p.count is not None:
                r = self._fresh_local(locals_, "__r")
                return [CFor(CAssign(CVar(r), CConst(0)),
                             CBin("<", CVar(r), CConst(p.count)),
                             CAssign(CVar(r), CBin("+", CVar(r), CConst(1))),
                             cseq(*body))]
            # unbounded repetition: seeded exit choice plus the horizon cap
            flag = self._fresh_local(locals_, "__r")
            ch = self._fresh_local(locals_, "__ch")
            loop_body = cseq(
                CIf(CBin(">=", CVar("currentTime"), CConst(self.horizon)),
                    CAssign(CVar(flag), CConst(0)),
                    cseq(CNondet(CVar(ch), CConst(2)),
                         CIf(CBin("==", CVar(ch), CConst(0)),
                             CAssign(CVar(flag), CConst(0)),
                             cseq(*body)))))
            return [CAssign(CVar(flag), CConst(1)),
                    CWhile(CBin("==", CVar(flag), CConst(1)), loop_body)]
        if isinstance(p, RkStep):
            fn = self.rk_fn(p.vars, p.rhs, probe=False)
            return [CCall(None, fn, (translate_expr(p.step),))]
        if isinstance(p, Interrupt) and is_comm_window(p):
            arms = [cd for cd, _ in p.arms]
            targets = [cont.var for _, cont in p.arms]
            if len(set(targets)) != 1:
                raise CodegenError("polling window arms must share a target")
            j2 = targets[0]
            h_expr = p.spec.domain.right
            fn = self.wait_comm_fn(h_expr, arms)
            args = [tid]
            if self.instrumented:
                pend_b = self.tag(render_rest(
                    [], ("wait_comm_b",) +
                        tuple(render_stmt(s) for s in rest) + kont))
                args += [CConst(pend_b), CConst(rest_tag)]
                for a in range(len(arms)):
                    pend_a = self.tag(render_rest(
                        [], ("wait_comm_a_%d" % a,) +
                            tuple(render_stmt(s) for s in rest) + kont))
                    args.append(CConst(pend_a))
            self.sites.append({
                "branch": bi, "kind": "wait_comm",
                "chans": [(cd.chan, cd.dir) for cd in arms],
                "render": render_stmt(p)})
            return [
                CAssign(CVar("__rec"), CArr("localTime", tid)),
                CCall(CVar(j2), fn, tuple(args)),
                CAssign(CVar(p.spec.vars[0]),
                        CBin("-", CArr("localTime", tid), CVar("__rec"))),
            ]
        if isinstance(p, HorizonStop):
            return [CAssign(CArr("stopFlag", tid), CConst(1)),
                    CCall(None, "threadStop", (tid,)),
                    CReturn(None)]
        if isinstance(p, (Ode, Interrupt)):
            raise CodegenError(
                "residual continuous construct; discretize first: %s"
                % pretty(p))
        if isinstance(p, Parallel):
            raise CodegenError("nested parallel composition")
        raise CodegenError("untranslatable process %r" % (p,))

    # -- whole program -------------------------------------------------------

    def generate(self) -> CProgram:
        self.add_function(self.gen_update_current_time())
        self.add_function(self.gen_delay())
        self.add_function(self.gen_thread_stop())
        thread_fns = []
        initial_tags = []
        for i, b in enumerate(self.branches):
            initial_tags.append(self.tag(render_rest(flatten_seq(b), ())))
            thread_fns.append(self.translate_branch(i, b))
        for fn in thread_fns:
            self.add_function(fn)

        n, m = self.n, max(1, len(self.channels.names))
        globals_: list[GlobalDecl] = [
            GlobalDecl("mutex", "mutex", None),
            GlobalDecl("int", "numThread", n),
            GlobalDecl("double", "DBL_MAX", DBL_MAX),
            GlobalDecl("int", "STOPPED", STOPPED),
            GlobalDecl("int", "WAITING", WAITING),
            GlobalDecl("int", "AVAILABLE", AVAILABLE),
            GlobalDecl("int", "WAITING_AVAILABLE", WAITING_AVAILABLE),
            GlobalDecl("int", "RUNNING", RUNNING),
            GlobalDecl("int[]", "cond", [0] * n),
            GlobalDecl("int[]", "threadState", [RUNNING] * n),
            GlobalDecl("double[]", "localTime", [0.0] * n),
            GlobalDecl("double", "currentTime", 0.0),
            GlobalDecl("int[]", "channelInput", [-1] * m),
            GlobalDecl("int[]", "channelOutput", [-1] * m),
            GlobalDecl("double[]", "channelContent", [0.0] * m),
            GlobalDecl("int[]", "stopFlag", [0] * n),
        ]
        for v in self.hvars:
            globals_.append(GlobalDecl("double", v, 0.0))
        probe_vars = sorted({"%s__nx" % v
                             for (vars_, _) in self._next_funcs
                             for v in vars_})
        for v in probe_vars:
            globals_.append(GlobalDecl("double", v, 0.0))
        if self.instrumented:
            globals_.append(GlobalDecl("int[]", "progTag",
                                       list(initial_tags)))
            globals_.append(GlobalDecl("int[]", "blockTag", [0] * n))
            globals_.append(GlobalDecl("int[]", "blockArm", [-1] * n))

        main_stmts = [CCreate(i, "th%d" % i, (CConst(i),)) for i in range(n)]
        main_stmts += [CJoin(i) for i in range(n)]
        main = FuncDecl("void", "main", (), (), cseq(*main_stmts))

        meta = {
            "name": self.name,
            "n_threads": n,
            "main_tid": n,
            "channels": list(self.channels.names),
            "tag_names": list(self.tags),
            "label_names": list(LABELS),
            "initial_tags": list(initial_tags),
            "obs": list(self.hvars),
            "instrumented": self.instrumented,
            "mutex_name": "mutex",
            "cond_name": "cond",
            "horizon": self.horizon,
            "h": self.h,
            "branch_sources": [pretty(b) for b in self.branches],
            "sites": self.sites,
        }
        prog = CProgram(globals_, self.functions, main, meta)
        validate_program(prog)
        return prog


def prev_stage(stage: str) -> str:
    return {"k2": "k1", "k3": "k2", "k4": "k3"}.get(stage, "k1")


def _subst_cexpr(e: Expr, rename: dict):
    """HCSP expression to CExpr with variables replaced by CExpr terms."""
    if isinstance(e, Const):
        return CConst(e.value)
    if isinstance(e, Var):
        return rename.get(e.name, CVar(e.name))
    if isinstance(e, BoolLit):
        return CConst(1 if e.value else 0)
    if isinstance(e, Unary):
        return CUn(e.op, _subst_cexpr(e.operand, rename))
    if isinstance(e, Binary):
        op = "==" if e.op == "=" else e.op
        return CBin(op, _subst_cexpr(e.left, rename),
                    _subst_cexpr(e.right, rename))
    raise CodegenError("untranslatable expression in vector field %r" % (e,))


def htoc(pc: Process, horizon: float, h: Optional[float] = None,
         instrumented: bool = True, name: str = "model") -> CProgram:
    """One thread per parallel branch plus the paper-shaped runtime; the
    result executes on the VM and emits to C."""
    return CodeGenerator(pc, horizon, h=h, instrumented=instrumented,
                         name=name).generate()


# ---------------------------------------------------------------------------
# Lock-discipline static check
# ---------------------------------------------------------------------------

def check_lock_discipline(fn: FuncDecl) -> None:
    """Every path through the body balances lock/unlock with no nesting;
    loops are lock-neutral; cwait only occurs while holding the mutex."""

    def walk(s: CStmt, depth: int) -> int:
        if isinstance(s, CSeq):
            return walk(s.second, walk(s.first, depth))
        if isinstance(s, CLock):
            if depth != 0:
                raise CodegenError("nested lock in %s" % fn.name)
            return 1
        if isinstance(s, CUnlock):
            if depth != 1:
                raise CodegenError("unlock without lock in %s" % fn.name)
            return 0
        if isinstance(s, (CWaitCV, CCWaitCV)):
            if depth != 1:
                raise CodegenError("wait outside the critical section in %s"
                                   % fn.name)
            return depth
        if isinstance(s, CIf):
            d1 = walk(s.then, depth)
            d2 = walk(s.els, depth) if s.els is not None else depth
            if d1 != d2:
                raise CodegenError("branch-dependent lock depth in %s"
                                   % fn.name)
            return d1
        if isinstance(s, CWhile):
            if walk(s.body, depth) != depth:
                raise CodegenError("lock depth changes across loop in %s"
                                   % fn.name)
            return depth
        if isinstance(s, CFor):
            if walk(s.body, depth) != depth:
                raise CodegenError("lock depth changes across loop in %s"
                                   % fn.name)
            return depth
        if isinstance(s, CReturn):
            if depth != 0:
                raise CodegenError("return inside the critical section in %s"
                                   % fn.name)
            return depth
        return depth

    if walk(fn.body, 0) != 0:
        raise CodegenError("unbalanced lock in %s" % fn.name)
