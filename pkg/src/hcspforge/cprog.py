"""Abstract syntax for the multi-threaded C subset.

Expressions cover constants, variables, array elements and the usual
arithmetic/boolean operators; the return plumbing (`ret`, `retv`, and the
frame-restoring marker populated during function calls) lives in
per-thread frames managed by the VM.  Statements include the thread
primitives create/lock/unlock/wait/cwait/signal/join.

Programs serialize to JSON so generated code can be rerun by the VM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union


# -- expressions -------------------------------------------------------------

class CExpr:
    __slots__ = ()


@dataclass(frozen=True)
class CConst(CExpr):
    value: float


@dataclass(frozen=True)
class CVar(CExpr):
    name: str


@dataclass(frozen=True)
class CArr(CExpr):
    name: str
    index: CExpr


@dataclass(frozen=True)
class CUn(CExpr):
    op: str  # '-' or '!'
    operand: CExpr


@dataclass(frozen=True)
class CBin(CExpr):
    op: str  # + - * /  < <= == != >= >  && ||
    left: CExpr
    right: CExpr


Lhs = Union[CVar, CArr]


# -- statements --------------------------------------------------------------

class CStmt:
    __slots__ = ()


@dataclass(frozen=True)
class CEps(CStmt):
    pass


@dataclass(frozen=True)
class CAssign(CStmt):
    lhs: Lhs
    expr: CExpr


@dataclass(frozen=True)
class CCall(CStmt):
    target: Optional[Lhs]
    func: str
    args: tuple


@dataclass(frozen=True)
class CNondet(CStmt):
    """target = nondet(0..k-1), drawn from the scheduler seed."""

    target: Lhs
    k: CExpr


@dataclass(frozen=True)
class CSeq(CStmt):
    first: CStmt
    second: CStmt


@dataclass(frozen=True)
class CIf(CStmt):
    cond: CExpr
    then: CStmt
    els: Optional[CStmt] = None


@dataclass(frozen=True)
class CWhile(CStmt):
    cond: CExpr
    body: CStmt


@dataclass(frozen=True)
class CFor(CStmt):
    init: Optional[CStmt]
    cond: CExpr
    post: Optional[CStmt]
    body: CStmt


@dataclass(frozen=True)
class CReturn(CStmt):
    expr: Optional[CExpr]


@dataclass(frozen=True)
class CCreate(CStmt):
    tid: int
    func: str
    args: tuple


@dataclass(frozen=True)
class CLock(CStmt):
    name: str


@dataclass(frozen=True)
class CUnlock(CStmt):
    name: str


@dataclass(frozen=True)
class CWaitCV(CStmt):
    """wait cv l: release l and start waiting for cv."""

    cv_array: str
    cv_index: CExpr
    lock: str


@dataclass(frozen=True)
class CCWaitCV(CStmt):
    """cwait cv l: the blocked form; consumes the signal and reacquires."""

    cv_array: str
    cv_index: CExpr
    lock: str


@dataclass(frozen=True)
class CSignal(CStmt):
    cv_array: str
    cv_index: CExpr


@dataclass(frozen=True)
class CJoin(CStmt):
    tid: int


@dataclass(frozen=True)
class CRetMarker(CStmt):
    """Runtime-introduced frame-restore marker; never in source programs."""

    target: Optional[Lhs]
    saved: tuple  # ((name, value), ...)


def cseq(*stmts: CStmt) -> CStmt:
    chain: Optional[CStmt] = None
    for s in reversed(stmts):
        if isinstance(s, CEps):
            continue
        chain = s if chain is None else CSeq(s, chain)
    return chain if chain is not None else CEps()


# -- declarations ------------------------------------------------------------

@dataclass(frozen=True)
class FuncDecl:
    ret_type: str      # 'void' | 'int' | 'double'
    name: str
    params: tuple      # ((type, name), ...)
    locals: tuple      # ((type, name), ...)
    body: CStmt


@dataclass
class GlobalDecl:
    type: str          # 'int' | 'double' | 'int[]' | 'double[]' | 'mutex'
    name: str
    init: object       # scalar, list, or None for mutex


@dataclass
class CProgram:
    globals: list      # [GlobalDecl]
    functions: list    # [FuncDecl]
    main: FuncDecl
    meta: dict = field(default_factory=dict)

    def function_table(self) -> dict:
        table = {f.name: f for f in self.functions}
        table[self.main.name] = self.main
        return table


# -- validation ---------------------------------------------------------------

class CProgramError(Exception):
    pass


def validate_program(prog: CProgram) -> None:
    """Called functions are declared, locals cover every function body's
    plain variables, and no marker statements appear in source."""
    table = prog.function_table()
    gnames = {g.name for g in prog.globals}
    for fn in list(prog.functions) + [prog.main]:
        declared = gnames | {n for _, n in fn.params} | {n for _, n in fn.locals}
        for node in walk_stmts(fn.body):
            if isinstance(node, CRetMarker):
                raise CProgramError("marker statement in source program: %s"
                                    % fn.name)
            if isinstance(node, (CCall,)) and node.func not in table:
                raise CProgramError("call to undeclared function %r in %s"
                                    % (node.func, fn.name))
            if isinstance(node, CCreate) and node.func not in table:
                raise CProgramError("create of undeclared function %r"
                                    % node.func)
            for e in _stmt_exprs(node):
                for v in walk_expr_vars(e):
                    if v not in declared:
                        raise CProgramError("undeclared variable %r in %s"
                                            % (v, fn.name))


def walk_stmts(s: CStmt):
    yield s
    if isinstance(s, CSeq):
        yield from walk_stmts(s.first)
        yield from walk_stmts(s.second)
    elif isinstance(s, CIf):
        yield from walk_stmts(s.then)
        if s.els is not None:
            yield from walk_stmts(s.els)
    elif isinstance(s, (CWhile,)):
        yield from walk_stmts(s.body)
    elif isinstance(s, CFor):
        if s.init is not None:
            yield from walk_stmts(s.init)
        if s.post is not None:
            yield from walk_stmts(s.post)
        yield from walk_stmts(s.body)


def _stmt_exprs(s: CStmt):
    if isinstance(s, CAssign):
        return [s.lhs, s.expr]
    if isinstance(s, CCall):
        out = list(s.args)
        if s.target is not None:
            out.append(s.target)
        return out
    if isinstance(s, CNondet):
        return [s.target, s.k]
    if isinstance(s, (CIf, CWhile)):
        return [s.cond]
    if isinstance(s, CFor):
        return [s.cond]
    if isinstance(s, CReturn):
        return [s.expr] if s.expr is not None else []
    if isinstance(s, (CWaitCV, CCWaitCV)):
        return [s.cv_index]
    if isinstance(s, CSignal):
        return [s.cv_index]
    if isinstance(s, CCreate):
        return list(s.args)
    return []


def walk_expr_vars(e: CExpr):
    if isinstance(e, CVar):
        yield e.name
    elif isinstance(e, CArr):
        yield e.name
        yield from walk_expr_vars(e.index)
    elif isinstance(e, CUn):
        yield from walk_expr_vars(e.operand)
    elif isinstance(e, CBin):
        yield from walk_expr_vars(e.left)
        yield from walk_expr_vars(e.right)


# -- JSON serialization -------------------------------------------------------

def expr_to_json(e: CExpr):
    if isinstance(e, CConst):
        return ["const", e.value]
    if isinstance(e, CVar):
        return ["var", e.name]
    if isinstance(e, CArr):
        return ["arr", e.name, expr_to_json(e.index)]
    if isinstance(e, CUn):
        return ["un", e.op, expr_to_json(e.operand)]
    if isinstance(e, CBin):
        return ["bin", e.op, expr_to_json(e.left), expr_to_json(e.right)]
    raise CProgramError("unserializable expression %r" % (e,))


def expr_from_json(j) -> CExpr:
    tag = j[0]
    if tag == "const":
        return CConst(j[1])
    if tag == "var":
        return CVar(j[1])
    if tag == "arr":
        return CArr(j[1], expr_from_json(j[2]))
    if tag == "un":
        return CUn(j[1], expr_from_json(j[2]))
    if tag == "bin":
        return CBin(j[1], expr_from_json(j[2]), expr_from_json(j[3]))
    raise CProgramError("bad expression json %r" % (j,))


def stmt_to_json(s: CStmt):
    if isinstance(s, CEps):
        return ["eps"]
    if isinstance(s, CAssign):
        return ["assign", expr_to_json(s.lhs), expr_to_json(s.expr)]
    if isinstance(s, CCall):
        return ["call", expr_to_json(s.target) if s.target else None,
                s.func, [expr_to_json(a) for a in s.args]]
    if isinstance(s, CNondet):
        return ["nondet", expr_to_json(s.target), expr_to_json(s.k)]
    if isinstance(s, CSeq):
        return ["seq", stmt_to_json(s.first), stmt_to_json(s.second)]
    if isinstance(s, CIf):
        return ["if", expr_to_json(s.cond), stmt_to_json(s.then),
                stmt_to_json(s.els) if s.els is not None else None]
    if isinstance(s, CWhile):
        return ["while", expr_to_json(s.cond), stmt_to_json(s.body)]
    if isinstance(s, CFor):
        return ["for", stmt_to_json(s.init) if s.init else None,
                expr_to_json(s.cond),
                stmt_to_json(s.post) if s.post else None,
                stmt_to_json(s.body)]
    if isinstance(s, CReturn):
        return ["return", expr_to_json(s.expr) if s.expr else None]
    if isinstance(s, CCreate):
        return ["create", s.tid, s.func, [expr_to_json(a) for a in s.args]]
    if isinstance(s, CLock):
        return ["lock", s.name]
    if isinstance(s, CUnlock):
        return ["unlock", s.name]
    if isinstance(s, CWaitCV):
        return ["wait", s.cv_array, expr_to_json(s.cv_index), s.lock]
    if isinstance(s, CCWaitCV):
        return ["cwait", s.cv_array, expr_to_json(s.cv_index), s.lock]
    if isinstance(s, CSignal):
        return ["signal", s.cv_array, expr_to_json(s.cv_index)]
    if isinstance(s, CJoin):
        return ["join", s.tid]
    raise CProgramError("unserializable statement %r" % (s,))


def stmt_from_json(j) -> CStmt:
    tag = j[0]
    if tag == "eps":
        return CEps()
    if tag == "assign":
        return CAssign(expr_from_json(j[1]), expr_from_json(j[2]))
    if tag == "call":
        return CCall(expr_from_json(j[1]) if j[1] else None, j[2],
                     tuple(expr_from_json(a) for a in j[3]))
    if tag == "nondet":
        return CNondet(expr_from_json(j[1]), expr_from_json(j[2]))
    if tag == "seq":
        return CSeq(stmt_from_json(j[1]), stmt_from_json(j[2]))
    if tag == "if":
        return CIf(expr_from_json(j[1]), stmt_from_json(j[2]),
                   stmt_from_json(j[3]) if j[3] is not None else None)
    if tag == "while":
        return CWhile(expr_from_json(j[1]), stmt_from_json(j[2]))
    if tag == "for":
        return CFor(stmt_from_json(j[1]) if j[1] else None,
                    expr_from_json(j[2]),
                    stmt_from_json(j[3]) if j[3] else None,
                    stmt_from_json(j[4]))
    if tag == "return":
        return CReturn(expr_from_json(j[1]) if j[1] else None)
    if tag == "create":
        return CCreate(j[1], j[2], tuple(expr_from_json(a) for a in j[3]))
    if tag == "lock":
        return CLock(j[1])
    if tag == "unlock":
        return CUnlock(j[1])
    if tag == "wait":
        return CWaitCV(j[1], expr_from_json(j[2]), j[3])
    if tag == "cwait":
        return CCWaitCV(j[1], expr_from_json(j[2]), j[3])
    if tag == "signal":
        return CSignal(j[1], expr_from_json(j[2]))
    if tag == "join":
        return CJoin(j[1])
    raise CProgramError("bad statement json %r" % (j,))


def func_to_json(f: FuncDecl):
    return {"ret": f.ret_type, "name": f.name,
            "params": [list(p) for p in f.params],
            "locals": [list(l) for l in f.locals],
            "body": stmt_to_json(f.body)}


def func_from_json(j) -> FuncDecl:
    return FuncDecl(j["ret"], j["name"],
                    tuple(tuple(p) for p in j["params"]),
                    tuple(tuple(l) for l in j["locals"]),
                    stmt_from_json(j["body"]))


def program_to_json(p: CProgram) -> dict:
    return {
        "globals": [{"type": g.type, "name": g.name, "init": g.init}
                    for g in p.globals],
        "functions": [func_to_json(f) for f in p.functions],
        "main": func_to_json(p.main),
        "meta": p.meta,
    }


def program_from_json(j) -> CProgram:
    return CProgram(
        globals=[GlobalDecl(g["type"], g["name"], g["init"])
                 for g in j["globals"]],
        functions=[func_from_json(f) for f in j["functions"]],
        main=func_from_json(j["main"]),
        meta=j.get("meta", {}),
    )
