"""Recursive-descent parser for the concrete HCSP grammar.

Source files are UTF-8 with `#` line comments.  The grammar mirrors the
abstract syntax one-to-one:

    par    := choice ('||' choice)*
    choice := seq ('[++]' seq)*
    seq    := item (';' item)*
    item   := bexpr '->' item | atom
    atom   := 'skip' | 'stop' | 'wait' expr
            | NAME ':=' expr | NAME '?' NAME | NAME '!' expr
            | '<' field '&' bexpr '>' interrupt-tail?
            | 'rk4step' '(' field ';' expr ')'
            | '(' par ')' repeat-suffix?
    field  := NAME '_dot' '=' expr (',' NAME '_dot' '=' expr)*

`parse_process(pretty(p))` returns a structurally equal AST.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import (
    IN, OUT, Assign, Binary, BoolLit, CommDir, Const, Expr, Guarded,
    HorizonStop, IChoice, Input, Interrupt, NextGuard, Ode, OdeSpec,
    Output, Parallel, Process, Repeat, RkStep, Seq, Skip, Unary, Var, Wait,
)


class HcspSyntaxError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__("%d:%d: %s" % (line, col, message))
        self.line = line
        self.col = col


class HcspTypeError(Exception):
    pass


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\|\>|\[\+\+\]|\|\||:=|<=|>=|&&|->|[-+*/<>=!?;,&()\[\]*])
""", re.VERBOSE)

KEYWORDS = {"skip", "stop", "wait", "true", "false", "rk4step", "nextstep"}


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, col, pos = 1, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise HcspSyntaxError("unexpected character %r" % text[pos], line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind not in ("ws", "comment"):
            if kind == "name" and tok in KEYWORDS:
                kind = tok
            tokens.append(Token(kind, tok, line, col))
        newlines = tok.count("\n")
        if newlines:
            line += newlines
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


class Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    # -- token plumbing ----------------------------------------------------

    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def accept(self, kind: str, text: str | None = None) -> Token | None:
        tok = self.peek()
        if tok.kind == kind and (text is None or tok.text == text):
            return self.next()
        return None

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.accept(kind, text)
        if tok is None:
            got = self.peek()
            want = text if text is not None else kind
            raise HcspSyntaxError("expected %r, got %r" % (want, got.text or "eof"),
                                  got.line, got.col)
        return tok

    def fail(self, message: str):
        tok = self.peek()
        raise HcspSyntaxError(message, tok.line, tok.col)

    # -- processes ---------------------------------------------------------

    def parse_par(self) -> Process:
        branches = [self.parse_choice()]
        while self.accept("op", "||"):
            branches.append(self.parse_choice())
        if len(branches) == 1:
            return branches[0]
        return Parallel(tuple(branches))

    def parse_choice(self) -> Process:
        p = self.parse_seq()
        while self.accept("op", "[++]"):
            p = IChoice(p, self.parse_seq())
        return p

    def parse_seq(self) -> Process:
        items = [self.parse_item()]
        while self.accept("op", ";"):
            items.append(self.parse_item())
        p = items[-1]
        for q in reversed(items[:-1]):
            p = Seq(q, p)
        return p

    def parse_item(self) -> Process:
        # A guard `B -> p` starts with an expression; statements starting
        # with a name followed by := ? ! are atoms.  Otherwise try the
        # expression route with backtracking.
        tok = self.peek()
        if tok.kind == "name" and self.peek(1).text in (":=", "?", "!"):
            return self.parse_atom()
        if tok.kind in ("skip", "stop", "wait", "rk4step") or \
                (tok.kind == "op" and tok.text == "<"):
            return self.parse_atom()
        save = self.pos
        try:
            cond = self.parse_expr()
            self.expect("op", "->")
            return Guarded(cond, self.parse_item())
        except HcspSyntaxError:
            self.pos = save
            return self.parse_atom()

    def parse_atom(self) -> Process:
        if self.accept("skip"):
            return Skip()
        if self.accept("stop"):
            return HorizonStop()
        if self.accept("wait"):
            return Wait(self.parse_expr())
        if self.accept("rk4step"):
            self.expect("op", "(")
            names, rhs = self.parse_field()
            self.expect("op", ";")
            step = self.parse_expr()
            self.expect("op", ")")
            return RkStep(tuple(names), tuple(rhs), step)
        if self.peek().text == "<":
            return self.parse_ode()
        if self.peek().text == "(":
            self.next()
            p = self.parse_par()
            self.expect("op", ")")
            return self.parse_repeat_suffix(p)
        name = self.expect("name").text
        if self.accept("op", ":="):
            return Assign(name, self.parse_expr())
        if self.accept("op", "?"):
            target = self.expect("name").text
            return Input(name, target)
        if self.accept("op", "!"):
            return Output(name, self.parse_add())
        self.fail("expected a statement")

    def parse_repeat_suffix(self, p: Process) -> Process:
        if self.peek().text == "*":
            # `(p)*` or `(p)*N`; a following number is the bound
            self.next()
            if self.peek().kind == "num":
                n = self.next()
                count = int(float(n.text))
                return Repeat(p, count)
            return Repeat(p, None)
        return p

    def parse_field(self) -> tuple[list[str], list[Expr]]:
        names, rhs = [], []
        while True:
            raw = self.expect("name").text
            if not raw.endswith("_dot"):
                self.fail("expected derivative name ending in _dot")
            names.append(raw[:-4])
            self.expect("op", "=")
            rhs.append(self.parse_expr())
            if not self.accept("op", ","):
                break
        return names, rhs

    def parse_ode(self) -> Process:
        self.expect("op", "<")
        names, rhs = self.parse_field()
        self.expect("op", "&")
        domain = self.parse_expr()
        self.expect("op", ">")
        spec = OdeSpec(tuple(names), tuple(rhs), domain)
        if self.accept("op", "|>"):
            self.expect("op", "[")
            self.expect("op", "]")
            self.expect("op", "(")
            arms = []
            while True:
                chan = self.expect("name").text
                if self.accept("op", "?"):
                    comm = CommDir(chan, IN, var=self.expect("name").text)
                elif self.accept("op", "!"):
                    comm = CommDir(chan, OUT, expr=self.parse_add())
                else:
                    self.fail("expected ? or ! in interrupt arm")
                self.expect("op", "->")
                arms.append((comm, self.parse_item()))
                if not self.accept("op", ","):
                    break
            self.expect("op", ")")
            return Interrupt(spec, tuple(arms))
        return Ode(spec)

    # -- expressions ---------------------------------------------------------
    #
    # `||` doubles as parallel composition, so disjunction is only parsed
    # inside parentheses; the pretty printer emits those parentheses.

    def parse_expr(self) -> Expr:
        return self.parse_and()

    def parse_or(self) -> Expr:
        e = self.parse_and()
        while self.peek().kind == "op" and self.peek().text == "||":
            self.next()
            e = Binary("||", e, self.parse_and())
        return e

    def parse_and(self) -> Expr:
        e = self.parse_cmp()
        while self.accept("op", "&&"):
            e = Binary("&&", e, self.parse_cmp())
        return e

    def parse_cmp(self) -> Expr:
        e = self.parse_add()
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("<", "<=", "=", ">=", ">"):
            # `>` may be the closing bracket of an ODE; backtrack if no
            # right-hand side follows.
            save = self.pos
            self.next()
            try:
                return Binary(tok.text, e, self.parse_add())
            except HcspSyntaxError:
                if tok.text == ">":
                    self.pos = save
                    return e
                raise
        return e

    def parse_add(self) -> Expr:
        e = self.parse_mul()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.text in ("+", "-"):
                self.next()
                e = Binary(tok.text, e, self.parse_mul())
            else:
                return e

    def parse_mul(self) -> Expr:
        e = self.parse_unary()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.text in ("*", "/"):
                # `*` followed by a statement boundary is a repeat suffix,
                # which never occurs inside an expression context.
                self.next()
                e = Binary(tok.text, e, self.parse_unary())
            else:
                return e

    def parse_unary(self) -> Expr:
        if self.accept("op", "-"):
            return Unary("-", self.parse_unary())
        if self.accept("op", "!"):
            return Unary("!", self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.next()
            return Const(float(tok.text))
        if tok.kind == "true":
            self.next()
            return BoolLit(True)
        if tok.kind == "false":
            self.next()
            return BoolLit(False)
        if tok.kind == "nextstep":
            self.next()
            self.expect("op", "(")
            names, rhs = self.parse_field()
            self.expect("op", ";")
            step = self.parse_expr()
            self.expect("op", ";")
            inner = self.parse_expr()
            self.expect("op", ")")
            return NextGuard(tuple(names), tuple(rhs), step, inner)
        if tok.kind == "name":
            self.next()
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.next()
            e = self.parse_or()
            self.expect("op", ")")
            return e
        self.fail("expected an expression")


def parse_process(text: str) -> Process:
    """Parses a full process; raises HcspSyntaxError with line/column or
    HcspTypeError for ill-typed expressions."""
    parser = Parser(text)
    p = parser.parse_par()
    parser.expect("eof")
    _typecheck(p)
    return p


def parse_expr(text: str) -> Expr:
    parser = Parser(text)
    e = parser.parse_expr()
    parser.expect("eof")
    return e


def _typecheck(p: Process):
    from .core import Diagnostic, expr_type, walk

    for node in walk(p):
        try:
            if isinstance(node, Guarded):
                if expr_type(node.cond) != "bool":
                    raise HcspTypeError("guard must be boolean: %s" % (node.cond,))
            elif isinstance(node, (Ode, Interrupt)):
                if expr_type(node.spec.domain) != "bool":
                    raise HcspTypeError("ODE domain must be boolean")
            elif isinstance(node, Assign):
                if expr_type(node.expr) != "real":
                    raise HcspTypeError("assignment of a boolean value")
            elif isinstance(node, (Wait, Output)):
                e = node.duration if isinstance(node, Wait) else node.expr
                if expr_type(e) != "real":
                    raise HcspTypeError("expected arithmetic expression")
        except TypeError as exc:
            raise HcspTypeError(str(exc)) from None


def parse_file(path: str) -> Process:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_process(fh.read())
