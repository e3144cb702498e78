"""Toy language family: one shared abstract syntax, six concrete surfaces.

The target surface is a Python-like language serialized with explicit
NEWLINE/INDENT/DEDENT markers; the five source surfaces (cpp, csharp, js,
java, php) use braces and semicolons. csharp and java are deliberately
near-identical: they differ only in the print keyword, so programs without
a print statement are textually indistinguishable.

All surfaces tokenize by whitespace. Every renderer emits a single-space
separated token string; the parsers below invert the renderers exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

SOURCE_LANGS = ["cpp", "csharp", "js", "java", "php"]
ALL_LANGS = SOURCE_LANGS + ["py"]


class ToyParseError(ValueError):
    """Raised when a token stream does not conform to a surface grammar."""


class ToyRuntimeError(RuntimeError):
    pass


# -- abstract syntax ---------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * < > ==
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


@dataclass(frozen=True)
class Assign:
    name: str
    expr: object
    decl: bool = False  # first binding of the name (sources emit a type keyword)


@dataclass(frozen=True)
class Print:
    expr: object


@dataclass(frozen=True)
class If:
    cond: object
    then_body: tuple
    else_body: tuple = ()


@dataclass(frozen=True)
class While:
    cond: object
    body: tuple


@dataclass(frozen=True)
class Return:
    expr: object


@dataclass(frozen=True)
class FuncDef:
    name: str
    params: tuple
    body: tuple


@dataclass(frozen=True)
class Program:
    body: tuple


# -- rendering ---------------------------------------------------------------

CMP_OPS = ("<", ">", "==")
ARITH_OPS = ("+", "-", "*")


def _render_expr(e, var):
    if isinstance(e, Num):
        return [str(e.value)]
    if isinstance(e, Var):
        return [var(e.name)]
    if isinstance(e, BinOp):
        return ["("] + _render_expr(e.left, var) + [e.op] + _render_expr(e.right, var) + [")"]
    if isinstance(e, Call):
        toks = [e.name, "("]
        for i, a in enumerate(e.args):
            if i:
                toks.append(",")
            toks += _render_expr(a, var)
        toks.append(")")
        return toks
    raise TypeError(f"unknown expression node {e!r}")


def render_python(program: Program) -> str:
    """Serialize to the Python-like target with NEWLINE/INDENT/DEDENT markers."""
    out = []

    def var(name):
        return name

    def stmt(s):
        if isinstance(s, Assign):
            return [s.name, "="] + _render_expr(s.expr, var) + ["NEWLINE"]
        if isinstance(s, Print):
            return ["print", "("] + _render_expr(s.expr, var) + [")", "NEWLINE"]
        if isinstance(s, Return):
            return ["return"] + _render_expr(s.expr, var) + ["NEWLINE"]
        if isinstance(s, If):
            toks = ["if"] + _render_expr(s.cond, var) + [":", "NEWLINE", "INDENT"]
            toks += block(s.then_body) + ["DEDENT"]
            if s.else_body:
                toks += ["else", ":", "NEWLINE", "INDENT"] + block(s.else_body) + ["DEDENT"]
            return toks
        if isinstance(s, While):
            return (["while"] + _render_expr(s.cond, var) + [":", "NEWLINE", "INDENT"]
                    + block(s.body) + ["DEDENT"])
        if isinstance(s, FuncDef):
            toks = ["def", s.name, "("]
            for i, p in enumerate(s.params):
                if i:
                    toks.append(",")
                toks.append(p)
            toks += [")", ":", "NEWLINE", "INDENT"] + block(s.body) + ["DEDENT"]
            return toks
        raise TypeError(f"unknown statement node {s!r}")

    def block(body):
        toks = []
        for s in body:
            toks += stmt(s)
        return toks

    return " ".join(block(program.body))


@dataclass(frozen=True)
class SourceSyntax:
    """Surface parameters shared by the five brace-style source renderers."""

    decl_kw: str            # keyword opening a first assignment
    print_open: list        # tokens before the printed expression
    print_close: list       # tokens after it
    func_head: list         # tokens before the function name
    param_prefix: list      # tokens before each parameter name
    var_sigil: str          # prefix glued onto variable names ("" or "$")
    header: list            # program prologue tokens
    footer: list            # program epilogue tokens
    stmt_end: tuple = (";",)  # assignment/return terminator


SOURCE_SYNTAX = {
    "cpp": SourceSyntax(
        decl_kw="int", print_open=["cout", "<<"], print_close=["<<", "endl", ";"],
        func_head=["int"], param_prefix=["int"], var_sigil="",
        header=["#include", "<iostream>", "using", "namespace", "std", ";"],
        footer=[]),
    # csharp and java differ only in their print idiom, by design
    "csharp": SourceSyntax(
        decl_kw="var", print_open=["Console", ".", "WriteLine", "("],
        print_close=[")", ";"],
        func_head=["static", "int"], param_prefix=["int"], var_sigil="",
        header=[], footer=[]),
    "java": SourceSyntax(
        decl_kw="var", print_open=["System", ".", "out", ".", "println", "("],
        print_close=[")", ";"],
        func_head=["static", "int"], param_prefix=["int"], var_sigil="",
        header=[], footer=[]),
    # toy js writes no statement terminators (semicolons elided)
    "js": SourceSyntax(
        decl_kw="let", print_open=["console.log", "("], print_close=[")"],
        func_head=["function"], param_prefix=[], var_sigil="",
        header=[], footer=[], stmt_end=()),
    "php": SourceSyntax(
        decl_kw="", print_open=["echo"], print_close=[";"],
        func_head=["function"], param_prefix=[], var_sigil="$",
        header=["<?php"], footer=["?>"]),
}


def render_source(program: Program, lang: str) -> str:
    """Serialize to one of the brace-style source surfaces."""
    syn = SOURCE_SYNTAX[lang]

    def var(name):
        return syn.var_sigil + name

    def stmt(s):
        if isinstance(s, Assign):
            toks = []
            if s.decl and syn.decl_kw:
                toks.append(syn.decl_kw)
            return toks + [var(s.name), "="] + _render_expr(s.expr, var) + list(syn.stmt_end)
        if isinstance(s, Print):
            return list(syn.print_open) + _render_expr(s.expr, var) + list(syn.print_close)
        if isinstance(s, Return):
            return ["return"] + _render_expr(s.expr, var) + list(syn.stmt_end)
        if isinstance(s, If):
            toks = ["if", "("] + _render_expr(s.cond, var) + [")", "{"] + block(s.then_body) + ["}"]
            if s.else_body:
                toks += ["else", "{"] + block(s.else_body) + ["}"]
            return toks
        if isinstance(s, While):
            return ["while", "("] + _render_expr(s.cond, var) + [")", "{"] + block(s.body) + ["}"]
        if isinstance(s, FuncDef):
            toks = list(syn.func_head) + [s.name, "("]
            for i, p in enumerate(s.params):
                if i:
                    toks.append(",")
                toks += list(syn.param_prefix) + [var(p)]
            toks += [")", "{"] + block(s.body) + ["}"]
            return toks
        raise TypeError(f"unknown statement node {s!r}")

    def block(body):
        toks = []
        for s in body:
            toks += stmt(s)
        return toks

    return " ".join(list(syn.header) + block(program.body) + list(syn.footer))


def render(program: Program, lang: str) -> str:
    if lang == "py":
        return render_python(program)
    return render_source(program, lang)


# -- parsing -----------------------------------------------------------------


class _TokenStream:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise ToyParseError("unexpected end of input")
        self.pos += 1
        return tok

    def expect(self, tok):
        got = self.next()
        if got != tok:
            raise ToyParseError(f"expected {tok!r}, got {got!r} at position {self.pos - 1}")
        return got

    def done(self):
        return self.pos >= len(self.tokens)


def _is_name(tok):
    return tok is not None and tok.isidentifier()


def _is_num(tok):
    return tok is not None and (tok.isdigit() or (tok.startswith("-") and tok[1:].isdigit()))


def _parse_expr(ts, var_name):
    """expr := atom | ( expr op expr ); atom := num | name | call"""
    tok = ts.peek()
    if tok == "(":
        ts.next()
        left = _parse_expr(ts, var_name)
        op = ts.next()
        if op not in CMP_OPS + ARITH_OPS:
            raise ToyParseError(f"unknown operator {op!r}")
        right = _parse_expr(ts, var_name)
        ts.expect(")")
        return BinOp(op, left, right)
    if _is_num(tok):
        return Num(int(ts.next()))
    raw = ts.next()
    if ts.peek() == "(" and _is_name(raw):
        # function names carry no sigil in any surface
        ts.next()
        args = []
        if ts.peek() != ")":
            args.append(_parse_expr(ts, var_name))
            while ts.peek() == ",":
                ts.next()
                args.append(_parse_expr(ts, var_name))
        ts.expect(")")
        return Call(raw, tuple(args))
    return Var(var_name(raw))


def parse_python(text: str) -> Program:
    """Recursive-descent parser for the marker-serialized Python-like surface."""
    ts = _TokenStream(text.split())

    def var_name(tok):
        if not _is_name(tok):
            raise ToyParseError(f"expected a name, got {tok!r}")
        return tok

    def parse_block():
        body = []
        while ts.peek() not in (None, "DEDENT"):
            body.append(parse_stmt())
        return tuple(body)

    def parse_suite():
        ts.expect(":")
        ts.expect("NEWLINE")
        ts.expect("INDENT")
        body = parse_block()
        ts.expect("DEDENT")
        return body

    def parse_stmt():
        tok = ts.peek()
        if tok == "print":
            ts.next()
            ts.expect("(")
            e = _parse_expr(ts, var_name)
            ts.expect(")")
            ts.expect("NEWLINE")
            return Print(e)
        if tok == "return":
            ts.next()
            e = _parse_expr(ts, var_name)
            ts.expect("NEWLINE")
            return Return(e)
        if tok == "if":
            ts.next()
            cond = _parse_expr(ts, var_name)
            then_body = parse_suite()
            else_body = ()
            if ts.peek() == "else":
                ts.next()
                else_body = parse_suite()
            return If(cond, then_body, else_body)
        if tok == "while":
            ts.next()
            cond = _parse_expr(ts, var_name)
            return While(cond, parse_suite())
        if tok == "def":
            ts.next()
            name = var_name(ts.next())
            ts.expect("(")
            params = []
            if ts.peek() != ")":
                params.append(var_name(ts.next()))
                while ts.peek() == ",":
                    ts.next()
                    params.append(var_name(ts.next()))
            ts.expect(")")
            return FuncDef(name, tuple(params), parse_suite())
        if _is_name(tok):
            name = var_name(ts.next())
            ts.expect("=")
            e = _parse_expr(ts, var_name)
            ts.expect("NEWLINE")
            return Assign(name, e)
        raise ToyParseError(f"unexpected token {tok!r}")

    body = parse_block()
    if not ts.done():
        raise ToyParseError(f"trailing tokens starting at {ts.peek()!r}")
    return Program(tuple(body))


def parse_source(text: str, lang: str) -> Program:
    """Parser for one of the brace-style source surfaces."""
    syn = SOURCE_SYNTAX[lang]
    ts = _TokenStream(text.split())
    declared = set()

    def var_name(tok):
        if syn.var_sigil:
            if not tok.startswith(syn.var_sigil):
                raise ToyParseError(f"expected a {syn.var_sigil}-prefixed name, got {tok!r}")
            base = tok[len(syn.var_sigil):]
        else:
            base = tok
        if not _is_name(base):
            raise ToyParseError(f"expected a name, got {tok!r}")
        return base

    def parse_expr():
        return _parse_expr(ts, var_name)

    def parse_block():
        body = []
        while ts.peek() not in (None, "}"):
            body.append(parse_stmt())
        return tuple(body)

    def parse_braced():
        ts.expect("{")
        body = parse_block()
        ts.expect("}")
        return body

    def parse_stmt():
        tok = ts.peek()
        if syn.print_open and tok == syn.print_open[0]:
            for t in syn.print_open:
                ts.expect(t)
            e = parse_expr()
            for t in syn.print_close:
                ts.expect(t)
            return Print(e)
        if tok == "return":
            ts.next()
            e = parse_expr()
            for t in syn.stmt_end:
                ts.expect(t)
            return Return(e)
        if tok == "if":
            ts.next()
            ts.expect("(")
            cond = parse_expr()
            ts.expect(")")
            then_body = parse_braced()
            else_body = ()
            if ts.peek() == "else":
                ts.next()
                else_body = parse_braced()
            return If(cond, then_body, else_body)
        if tok == "while":
            ts.next()
            ts.expect("(")
            cond = parse_expr()
            ts.expect(")")
            return While(cond, parse_braced())
        if syn.func_head and tok == syn.func_head[0] and ts.tokens[ts.pos:ts.pos + len(syn.func_head)] == list(syn.func_head):
            lookahead = ts.pos + len(syn.func_head)
            # cpp/csharp/java reuse the decl keyword in the function head; a
            # function definition is recognized by "name (" after the head.
            if (lookahead + 1 < len(ts.tokens) and _is_name(ts.tokens[lookahead])
                    and ts.tokens[lookahead + 1] == "("):
                for t in syn.func_head:
                    ts.expect(t)
                name = ts.next()
                if not _is_name(name):
                    raise ToyParseError(f"expected a function name, got {name!r}")
                ts.expect("(")
                params = []
                while ts.peek() != ")":
                    if params:
                        ts.expect(",")
                    for t in syn.param_prefix:
                        ts.expect(t)
                    params.append(var_name(ts.next()))
                ts.expect(")")
                declared.update(params)
                return FuncDef(name, tuple(params), parse_braced())
        if syn.decl_kw and tok == syn.decl_kw:
            ts.next()
            name = var_name(ts.next())
            ts.expect("=")
            e = parse_expr()
            for t in syn.stmt_end:
                ts.expect(t)
            declared.add(name)
            return Assign(name, e, decl=True)
        # sigil languages mark declarations implicitly: first sight of a name
        name = var_name(ts.next())
        ts.expect("=")
        e = parse_expr()
        for t in syn.stmt_end:
            ts.expect(t)
        decl = name not in declared if not syn.decl_kw else False
        declared.add(name)
        return Assign(name, e, decl=decl)

    for t in syn.header:
        ts.expect(t)
    body = []
    stop = syn.footer[0] if syn.footer else None
    while ts.peek() is not None and ts.peek() != stop:
        body.append(parse_stmt())
    for t in syn.footer:
        ts.expect(t)
    if not ts.done():
        raise ToyParseError(f"trailing tokens starting at {ts.peek()!r}")
    return Program(tuple(body))


def parse(text: str, lang: str) -> Program:
    if lang == "py":
        return parse_python(text)
    return parse_source(text, lang)


# -- reference interpreter ---------------------------------------------------

_STEP_LIMIT = 10_000


class _ReturnSignal(Exception):
    def __init__(self, value):
        self.value = value


@dataclass
class _Frame:
    env: dict = field(default_factory=dict)


def run_program(program: Program) -> list:
    """Execute a shared-AST program; returns the list of printed values."""
    output = []
    functions = {}
    steps = [0]

    def tick():
        steps[0] += 1
        if steps[0] > _STEP_LIMIT:
            raise ToyRuntimeError("step limit exceeded")

    def eval_expr(e, frame):
        tick()
        if isinstance(e, Num):
            return e.value
        if isinstance(e, Var):
            if e.name not in frame.env:
                raise ToyRuntimeError(f"undefined variable {e.name!r}")
            return frame.env[e.name]
        if isinstance(e, BinOp):
            a = eval_expr(e.left, frame)
            b = eval_expr(e.right, frame)
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            if e.op == "<":
                return 1 if a < b else 0
            if e.op == ">":
                return 1 if a > b else 0
            if e.op == "==":
                return 1 if a == b else 0
            raise ToyRuntimeError(f"unknown operator {e.op!r}")
        if isinstance(e, Call):
            fn = functions.get(e.name)
            if fn is None:
                raise ToyRuntimeError(f"undefined function {e.name!r}")
            args = [eval_expr(a, frame) for a in e.args]
            if len(args) != len(fn.params):
                raise ToyRuntimeError(f"arity mismatch calling {e.name!r}")
            inner = _Frame(dict(zip(fn.params, args)))
            try:
                exec_block(fn.body, inner)
            except _ReturnSignal as r:
                return r.value
            return 0
        raise ToyRuntimeError(f"unknown expression {e!r}")

    def exec_stmt(s, frame):
        tick()
        if isinstance(s, Assign):
            frame.env[s.name] = eval_expr(s.expr, frame)
        elif isinstance(s, Print):
            output.append(eval_expr(s.expr, frame))
        elif isinstance(s, Return):
            raise _ReturnSignal(eval_expr(s.expr, frame))
        elif isinstance(s, If):
            if eval_expr(s.cond, frame):
                exec_block(s.then_body, frame)
            elif s.else_body:
                exec_block(s.else_body, frame)
        elif isinstance(s, While):
            while eval_expr(s.cond, frame):
                exec_block(s.body, frame)
        elif isinstance(s, FuncDef):
            functions[s.name] = s
        else:
            raise ToyRuntimeError(f"unknown statement {s!r}")

    def exec_block(body, frame):
        for s in body:
            exec_stmt(s, frame)

    exec_block(program.body, _Frame())
    return output


def run_text(text: str, lang: str) -> list:
    return run_program(parse(text, lang))
