"""Parser for velocity-field component expressions.

A field source is a comma separated list of component expressions over the
variables ``x1 .. xd``, e.g. ``"-x2, x1"``.  Each component is compiled to a
small postfix program (opcode + argument arrays) so the same compiled form can
be evaluated point-wise inside jitted kernels and array-wise in the numpy
fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Opcodes. Arguments: PUSH_CONST uses arg as the literal, PUSH_VAR uses arg as
# the 0-based axis index. The remaining ops ignore arg.
OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_SIN = 7
OP_COS = 8

_FUNCTIONS = {"sin": OP_SIN, "cos": OP_COS}


class ExprError(ValueError):
    """Parse failure; carries the character position of the offending token."""

    def __init__(self, message: str, source: str, pos: int):
        self.pos = pos
        marker = " " * pos + "^"
        super().__init__(f"{message} at position {pos}\n  {source}\n  {marker}")


@dataclass(frozen=True)
class Program:
    """Postfix program for one field component."""

    ops: np.ndarray      # int64
    args: np.ndarray     # float64
    stack_need: int
    source: str

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on points ``x`` of shape (n, d); returns shape (n,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        stack: list[np.ndarray] = []
        for op, arg in zip(self.ops, self.args):
            if op == OP_CONST:
                stack.append(np.full(x.shape[0], arg))
            elif op == OP_VAR:
                stack.append(x[:, int(arg)].copy())
            elif op == OP_NEG:
                stack[-1] = -stack[-1]
            elif op == OP_SIN:
                stack[-1] = np.sin(stack[-1])
            elif op == OP_COS:
                stack[-1] = np.cos(stack[-1])
            else:
                b = stack.pop()
                a = stack.pop()
                if op == OP_ADD:
                    stack.append(a + b)
                elif op == OP_SUB:
                    stack.append(a - b)
                elif op == OP_MUL:
                    stack.append(a * b)
                else:
                    with np.errstate(divide="ignore", invalid="ignore"):
                        stack.append(a / b)
        return stack[0]


class _Tokenizer:
    def __init__(self, source: str):
        self.source = source
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.source) and self.source[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str | None:
        self._skip_ws()
        if self.pos >= len(self.source):
            return None
        return self.source[self.pos]

    def take_number(self) -> float:
        self._skip_ws()
        start = self.pos
        s = self.source
        n = len(s)
        while self.pos < n and (s[self.pos].isdigit() or s[self.pos] == "."):
            self.pos += 1
        if self.pos < n and s[self.pos] in "eE":
            mark = self.pos
            self.pos += 1
            if self.pos < n and s[self.pos] in "+-":
                self.pos += 1
            if self.pos < n and s[self.pos].isdigit():
                while self.pos < n and s[self.pos].isdigit():
                    self.pos += 1
            else:
                self.pos = mark
        text = s[start:self.pos]
        try:
            return float(text)
        except ValueError:
            raise ExprError(f"invalid numeric literal '{text}'", s, start) from None

    def take_ident(self) -> tuple[str, int]:
        self._skip_ws()
        start = self.pos
        s = self.source
        while self.pos < len(s) and (s[self.pos].isalnum() or s[self.pos] == "_"):
            self.pos += 1
        return s[start:self.pos], start


class _Parser:
    """Recursive descent over: expr := term (('+'|'-') term)*,
    term := factor (('*'|'/') factor)*, factor := '-'* atom,
    atom := number | var | func '(' expr ')' | '(' expr ')'."""

    def __init__(self, source: str, dims: int):
        self.tk = _Tokenizer(source)
        self.dims = dims
        self.ops: list[int] = []
        self.args: list[float] = []

    def emit(self, op: int, arg: float = 0.0) -> None:
        self.ops.append(op)
        self.args.append(arg)

    def parse(self) -> Program:
        self.expr()
        ch = self.tk.peek()
        if ch is not None:
            raise ExprError(f"unexpected character '{ch}'", self.tk.source, self.tk.pos)
        ops = np.asarray(self.ops, dtype=np.int64)
        args = np.asarray(self.args, dtype=np.float64)
        depth = need = 0
        for op in self.ops:
            if op in (OP_CONST, OP_VAR):
                depth += 1
            elif op in (OP_ADD, OP_SUB, OP_MUL, OP_DIV):
                depth -= 1
            need = max(need, depth)
        return Program(ops, args, need, self.tk.source)

    def expr(self) -> None:
        self.term()
        while (ch := self.tk.peek()) in ("+", "-"):
            self.tk.pos += 1
            self.term()
            self.emit(OP_ADD if ch == "+" else OP_SUB)

    def term(self) -> None:
        self.factor()
        while (ch := self.tk.peek()) in ("*", "/"):
            self.tk.pos += 1
            self.factor()
            self.emit(OP_MUL if ch == "*" else OP_DIV)

    def factor(self) -> None:
        negate = False
        while self.tk.peek() == "-":
            self.tk.pos += 1
            negate = not negate
        self.atom()
        if negate:
            self.emit(OP_NEG)

    def atom(self) -> None:
        ch = self.tk.peek()
        if ch is None:
            raise ExprError("unexpected end of expression", self.tk.source, self.tk.pos)
        if ch == "(":
            self.tk.pos += 1
            self.expr()
            if self.tk.peek() != ")":
                raise ExprError("expected ')'", self.tk.source, self.tk.pos)
            self.tk.pos += 1
            return
        if ch.isdigit() or ch == ".":
            self.emit(OP_CONST, self.tk.take_number())
            return
        if ch.isalpha():
            name, start = self.tk.take_ident()
            if name in _FUNCTIONS:
                if self.tk.peek() != "(":
                    raise ExprError(f"'{name}' requires parentheses", self.tk.source, self.tk.pos)
                self.tk.pos += 1
                self.expr()
                if self.tk.peek() != ")":
                    raise ExprError("expected ')'", self.tk.source, self.tk.pos)
                self.tk.pos += 1
                self.emit(_FUNCTIONS[name])
                return
            if name.startswith("x") and name[1:].isdigit():
                axis = int(name[1:])
                if not 1 <= axis <= self.dims:
                    raise ExprError(
                        f"variable '{name}' out of range for dimension {self.dims}",
                        self.tk.source, start)
                self.emit(OP_VAR, float(axis - 1))
                return
            raise ExprError(f"unknown identifier '{name}'", self.tk.source, start)
        raise ExprError(f"unexpected character '{ch}'", self.tk.source, self.tk.pos)


def _split_components(source: str) -> list[str]:
    parts: list[str] = []
    depth = 0
    start = 0
    for i, ch in enumerate(source):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(source[start:i])
            start = i + 1
    parts.append(source[start:])
    return parts


def parse_field_expression(source: str, dims: int) -> list[Program]:
    """Compile a comma separated field source into one program per component.

    Raises ExprError (with character position) on malformed input, and
    ValueError when the component count does not match ``dims``.
    """
    parts = _split_components(source)
    if len(parts) != dims:
        raise ValueError(
            f"field expression has {len(parts)} component(s), expected {dims}: {source!r}")
    programs = []
    offset = 0
    for part in parts:
        if not part.strip():
            raise ExprError("empty component", source, offset)
        try:
            programs.append(_Parser(part, dims).parse())
        except ExprError as e:
            # re-anchor position in the full source string
            raise ExprError(str(e).splitlines()[0].rsplit(" at position", 1)[0],
                            source, offset + e.pos) from None
        offset += len(part) + 1
    return programs


def pack_programs(programs: list[Program]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Stack per-component programs into rectangular arrays for the kernels.

    Returns (ops[d, m], args[d, m], lengths[d], stack_need).
    """
    d = len(programs)
    m = max(len(p.ops) for p in programs)
    ops = np.zeros((d, m), dtype=np.int64)
    args = np.zeros((d, m), dtype=np.float64)
    lengths = np.zeros(d, dtype=np.int64)
    for i, p in enumerate(programs):
        ops[i, :len(p.ops)] = p.ops
        args[i, :len(p.args)] = p.args
        lengths[i] = len(p.ops)
    need = max(max(p.stack_need for p in programs), 1)
    return ops, args, lengths, need
