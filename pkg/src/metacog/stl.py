"""Signal temporal logic on sampled trajectories.

Formulas are parsed from a small text grammar::

    f ::= T | e < e | e > e | e <= e | e >= e | !f | f & f | f | f
        | G[a,b](f) | F[a,b](f) | (f U[a,b] f)

where ``e`` is an arithmetic expression over signal names, numeric
literals and the functions ``abs``, ``min``, ``max`` and ``norm2``.
A comparison ``lhs < rhs`` becomes the predicate function ``rhs - lhs``
and ``lhs > rhs`` becomes ``lhs - rhs``; strict and non-strict forms are
identical quantitatively.

Quantitative robustness is evaluated on the trajectory grid. Temporal
windows are truncated to the samples where the operand is defined, and a
window left empty by truncation makes the result undefined (an error when
queried).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .trajectory import Trajectory

__all__ = [
    "StlSyntaxError",
    "EmptyWindowError",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "TrueF",
    "Pred",
    "Not",
    "And",
    "Or",
    "Always",
    "Eventually",
    "Until",
    "parse_formula",
    "parse_predicate",
    "to_text",
    "robustness",
    "robustness_signal",
    "satisfies",
    "PredicateStack",
    "robustness_vector",
    "robustness_matrix",
    "smooth_conjunction",
]


class StlSyntaxError(ValueError):
    """Malformed formula text; carries 1-based line and column."""

    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.col = col


class EmptyWindowError(ValueError):
    """Robustness requested where a temporal window has no samples."""


# ---------------------------------------------------------------- expressions


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: Tuple["Expr", ...]


Expr = Union[Num, Var, Neg, BinOp, Call]

_FUNCS = {"abs": (1, 1), "min": (1, None), "max": (1, None), "norm2": (1, None)}


def _eval_expr(e: Expr, env: Mapping[str, np.ndarray]):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, Neg):
        return -_eval_expr(e.arg, env)
    if isinstance(e, BinOp):
        a = _eval_expr(e.left, env)
        b = _eval_expr(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        return a / b
    args = [_eval_expr(a, env) for a in e.args]
    if e.fn == "abs":
        return np.abs(args[0])
    if e.fn == "min":
        out = args[0]
        for a in args[1:]:
            out = np.minimum(out, a)
        return out
    if e.fn == "max":
        out = args[0]
        for a in args[1:]:
            out = np.maximum(out, a)
        return out
    acc = args[0] * args[0]
    for a in args[1:]:
        acc = acc + a * a
    return np.sqrt(acc)


def _expr_vars(e: Expr) -> set:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return _expr_vars(e.arg)
    if isinstance(e, BinOp):
        return _expr_vars(e.left) | _expr_vars(e.right)
    if isinstance(e, Call):
        out = set()
        for a in e.args:
            out |= _expr_vars(a)
        return out
    return set()


# ------------------------------------------------------------------- formulas


@dataclass(frozen=True)
class TrueF:
    pass


@dataclass(frozen=True)
class Pred:
    """Atomic predicate ``lhs op rhs`` with predicate function z."""

    lhs: Expr
    op: str
    rhs: Expr

    @property
    def name(self) -> str:
        return to_text(self)

    def value(self, env: Mapping[str, np.ndarray]):
        """Predicate function z evaluated on named signals."""
        a = _eval_expr(self.lhs, env)
        b = _eval_expr(self.rhs, env)
        if self.op in ("<", "<="):
            return b - a
        return a - b

    def variables(self) -> set:
        return _expr_vars(self.lhs) | _expr_vars(self.rhs)


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Always:
    a: float
    b: float
    arg: "Formula"


@dataclass(frozen=True)
class Eventually:
    a: float
    b: float
    arg: "Formula"


@dataclass(frozen=True)
class Until:
    a: float
    b: float
    left: "Formula"
    right: "Formula"


Formula = Union[TrueF, Pred, Not, And, Or, Always, Eventually, Until]


# -------------------------------------------------------------------- printing


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _expr_text(e: Expr, parent: int = 0, right: bool = False) -> str:
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 and parent > 0 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        s = "-" + _expr_text(e.arg, 3)
        return f"({s})" if parent > 0 else s
    if isinstance(e, Call):
        return f"{e.fn}(" + ", ".join(_expr_text(a) for a in e.args) + ")"
    p = _PREC[e.op]
    s = f"{_expr_text(e.left, p)} {e.op} {_expr_text(e.right, p, True)}"
    if p < parent or (right and p == parent):
        return f"({s})"
    return s


def to_text(f: Formula) -> str:
    """Canonical text of a formula; ``parse_formula`` inverts it."""
    if isinstance(f, TrueF):
        return "T"
    if isinstance(f, Pred):
        return f"{_expr_text(f.lhs)} {f.op} {_expr_text(f.rhs)}"
    if isinstance(f, Not):
        inner = to_text(f.arg)
        if isinstance(f.arg, (TrueF, Not, Always, Eventually, Until)):
            return "!" + inner
        return f"!({inner})"
    if isinstance(f, (And, Or)):
        atoms = (TrueF, Not, Always, Eventually, Until)
        if isinstance(f, And):
            sym, left_ok, right_ok = "&", atoms + (And,), atoms
        else:
            sym, left_ok, right_ok = "|", atoms + (And, Or), atoms + (And,)
        left = to_text(f.left)
        right = to_text(f.right)
        if not isinstance(f.left, left_ok):
            left = f"({left})"
        if not isinstance(f.right, right_ok):
            right = f"({right})"
        return f"{left} {sym} {right}"
    iv = f"[{_fmt_num(f.a)},{_fmt_num(f.b)}]"
    if isinstance(f, Always):
        return f"G{iv}({to_text(f.arg)})"
    if isinstance(f, Eventually):
        return f"F{iv}({to_text(f.arg)})"
    return f"({to_text(f.left)} U{iv} {to_text(f.right)})"


# --------------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|[<>!&|()\[\],+\-*/]))"
)
_KEYWORDS = {"T", "G", "F", "U"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> List[_Tok]:
    toks = []
    pos = 0
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def where(p):
        ln = max(i for i, s in enumerate(line_starts) if s <= p)
        return ln + 1, p - line_starts[ln] + 1

    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            p = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise StlSyntaxError(f"unexpected character {text[p]!r}", *where(p))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), *where(start)))
        pos = m.end()
    end = where(len(text))
    toks.append(_Tok("eof", "", *end))
    return toks


class _Parser:
    def __init__(self, text: str, schema: Optional[Sequence[str]]):
        self.toks = _tokenize(text)
        self.i = 0
        self.schema = None if schema is None else set(schema)

    # helpers
    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.cur
        raise StlSyntaxError(msg, tok.line, tok.col)

    def accept(self, text: str) -> bool:
        if self.cur.kind in ("op", "id") and self.cur.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str):
        if not self.accept(text):
            found = self.cur.text or "end of input"
            self.error(f"expected {text!r}, found {found!r}")

    # formula grammar
    def formula(self) -> Formula:
        f = self.conj()
        while self.accept("|"):
            f = Or(f, self.conj())
        return f

    def conj(self) -> Formula:
        f = self.unary()
        while self.accept("&"):
            f = And(f, self.unary())
        return f

    def interval(self) -> Tuple[float, float]:
        tok = self.cur
        self.expect("[")
        a = self.number()
        self.expect(",")
        b = self.number()
        self.expect("]")
        if a < 0 or b < 0:
            self.error("negative interval bound", tok)
        if a > b:
            self.error(f"inverted interval [{_fmt_num(a)},{_fmt_num(b)}]", tok)
        return a, b

    def number(self) -> float:
        neg = self.accept("-")
        tok = self.cur
        if tok.kind != "num":
            self.error(f"expected a number, found {tok.text or 'end of input'!r}")
        self.i += 1
        v = float(tok.text)
        return -v if neg else v

    def unary(self) -> Formula:
        tok = self.cur
        if self.accept("!"):
            return Not(self.unary())
        if tok.kind == "id" and tok.text in ("G", "F"):
            self.i += 1
            a, b = self.interval()
            self.expect("(")
            f = self.formula()
            self.expect(")")
            return Always(a, b, f) if tok.text == "G" else Eventually(a, b, f)
        if tok.kind == "id" and tok.text == "T":
            self.i += 1
            return TrueF()
        start = self.i
        try:
            return self.predicate()
        except StlSyntaxError as err:
            if tok.text != "(":
                raise
            pred_err = err
        self.i = start
        self.expect("(")
        f = self.formula()
        if self.cur.kind == "id" and self.cur.text == "U":
            self.i += 1
            a, b = self.interval()
            g = self.formula()
            self.expect(")")
            return Until(a, b, f, g)
        if self.cur.text != ")":
            raise pred_err
        self.expect(")")
        return f

    def predicate(self) -> Pred:
        lhs = self.expr()
        tok = self.cur
        if tok.kind != "op" or tok.text not in ("<", ">", "<=", ">="):
            self.error(f"expected a comparison, found {tok.text or 'end of input'!r}")
        self.i += 1
        rhs = self.expr()
        return Pred(lhs, tok.text, rhs)

    # expression grammar
    def expr(self) -> Expr:
        e = self.term()
        while self.cur.kind == "op" and self.cur.text in ("+", "-"):
            op = self.cur.text
            self.i += 1
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.cur.kind == "op" and self.cur.text in ("*", "/"):
            op = self.cur.text
            self.i += 1
            e = BinOp(op, e, self.factor())
        return e

    def factor(self) -> Expr:
        tok = self.cur
        if self.accept("-"):
            arg = self.factor()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "id":
            if tok.text in _KEYWORDS:
                self.error(f"keyword {tok.text!r} used as a signal name")
            self.i += 1
            if tok.text in _FUNCS:
                self.expect("(")
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                self.expect(")")
                lo, hi = _FUNCS[tok.text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    self.error(f"wrong number of arguments to {tok.text}", tok)
                return Call(tok.text, tuple(args))
            if self.schema is not None and tok.text not in self.schema:
                self.error(f"unknown signal component {tok.text!r}", tok)
            return Var(tok.text)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        self.error(f"unexpected token {tok.text or 'end of input'!r}")


def parse_formula(text: str, schema: Optional[Sequence[str]] = None) -> Formula:
    """Parse formula text.

    Parameters
    ----------
    text : str
        Formula in the grammar described in the module docstring.
    schema : sequence of str, optional
        Allowed signal names. ``None`` accepts any identifier.

    Raises
    ------
    StlSyntaxError
        On malformed text, unknown signals or bad intervals.
    """
    if not text or not text.strip():
        raise StlSyntaxError("empty formula", 1, 1)
    p = _Parser(text, schema)
    f = p.formula()
    if p.cur.kind != "eof":
        p.error(f"unexpected trailing input {p.cur.text!r}")
    return f


def parse_predicate(text: str, schema: Optional[Sequence[str]] = None) -> Pred:
    f = parse_formula(text, schema)
    if not isinstance(f, Pred):
        raise StlSyntaxError("expected a single comparison", 1, 1)
    return f


# ------------------------------------------------------------------ semantics


def _steps(x: float, dt: float, up: bool) -> int:
    s = x / dt
    r = round(s)
    if abs(s - r) < 1e-9 * max(1.0, abs(s)):
        return int(r)
    return int(math.ceil(s)) if up else int(math.floor(s))


def _sliding(x: np.ndarray, w: int, op) -> np.ndarray:
    """``op``-reduction over the windows ``x[j:j+w]`` (van Herk / Gil-Werman).

    Positions past the end act as the identity of ``op``.
    """
    n = len(x)
    ident = np.inf if op is np.minimum else -np.inf
    nb = -(-(n + w) // w)
    pad = np.full(nb * w, ident)
    pad[:n] = x
    blocks = pad.reshape(nb, w)
    g = op.accumulate(blocks, axis=1).ravel()
    h = op.accumulate(blocks[:, ::-1], axis=1)[:, ::-1].ravel()
    return op(h[:n], g[w - 1 : w - 1 + n])


def _signal(f: Formula, env: Mapping[str, np.ndarray], L: int, dt: float) -> np.ndarray:
    """Robustness at every grid index where it is defined (a prefix)."""
    if isinstance(f, TrueF):
        return np.full(L, np.inf)
    if isinstance(f, Pred):
        return np.broadcast_to(np.asarray(f.value(env), dtype=float), (L,)).copy()
    if isinstance(f, Not):
        return -_signal(f.arg, env, L, dt)
    if isinstance(f, (And, Or)):
        a = _signal(f.left, env, L, dt)
        b = _signal(f.right, env, L, dt)
        k = min(len(a), len(b))
        op = np.minimum if isinstance(f, And) else np.maximum
        return op(a[:k], b[:k])
    ia = _steps(f.a, dt, True)
    ib = _steps(f.b, dt, False)
    if isinstance(f, (Always, Eventually)):
        sub = _signal(f.arg, env, L, dt)
        k = len(sub)
        if ia >= k or ib < ia:
            return np.empty(0)
        op = np.minimum if isinstance(f, Always) else np.maximum
        return _sliding(sub[ia:], ib - ia + 1, op)
    phi = _signal(f.left, env, L, dt)
    psi = _signal(f.right, env, L, dt)
    k = min(len(phi), len(psi))
    if ia >= k or ib < ia:
        return np.empty(0)
    out = np.empty(k - ia)
    for i in range(k - ia):
        hi = min(i + ib, k - 1)
        run = np.minimum.accumulate(phi[i : hi + 1])
        out[i] = np.max(np.minimum(psi[i + ia : hi + 1], run[ia:]))
    return out


def robustness_signal(f: Formula, traj: Trajectory) -> np.ndarray:
    """Robustness of ``f`` at every grid time where it is defined.

    Returns an array whose entry ``i`` is the robustness at sample ``i``;
    its length is the number of leading samples with a non-empty window.
    """
    return _signal(f, traj.channels(), len(traj), traj.dt)


def robustness(f: Formula, traj: Trajectory, t: float = None) -> float:
    """Spatial robustness of ``f`` on ``traj`` at time ``t`` (default t0).

    Raises
    ------
    EmptyWindowError
        If truncation leaves a temporal window without samples.
    """
    i = 0 if t is None else traj.index_of(t)
    sig = robustness_signal(f, traj)
    if i >= len(sig):
        raise EmptyWindowError(f"empty evaluation window at t = {traj.t0 + i * traj.dt}")
    return float(sig[i])


def _bool_signal(f: Formula, env, L: int, dt: float) -> np.ndarray:
    if isinstance(f, TrueF):
        return np.ones(L, dtype=bool)
    if isinstance(f, Pred):
        return np.broadcast_to(np.asarray(f.value(env)) > 0, (L,)).copy()
    if isinstance(f, Not):
        return ~_bool_signal(f.arg, env, L, dt)
    if isinstance(f, (And, Or)):
        a = _bool_signal(f.left, env, L, dt)
        b = _bool_signal(f.right, env, L, dt)
        k = min(len(a), len(b))
        return (a[:k] & b[:k]) if isinstance(f, And) else (a[:k] | b[:k])
    ia = _steps(f.a, dt, True)
    ib = _steps(f.b, dt, False)
    if isinstance(f, (Always, Eventually)):
        sub = _bool_signal(f.arg, env, L, dt)
        k = len(sub)
        out = np.zeros(max(k - ia, 0), dtype=bool)
        for i in range(len(out)):
            win = sub[i + ia : min(i + ib, k - 1) + 1]
            out[i] = win.all() if isinstance(f, Always) else win.any()
        return out
    phi = _bool_signal(f.left, env, L, dt)
    psi = _bool_signal(f.right, env, L, dt)
    k = min(len(phi), len(psi))
    out = np.zeros(max(k - ia, 0), dtype=bool)
    for i in range(len(out)):
        for j in range(i + ia, min(i + ib, k - 1) + 1):
            if psi[j] and phi[i : j + 1].all():
                out[i] = True
                break
    return out


def satisfies(f: Formula, traj: Trajectory, t: float = None) -> bool:
    """Qualitative (Boolean) satisfaction of ``f`` at time ``t``."""
    i = 0 if t is None else traj.index_of(t)
    sig = _bool_signal(f, traj.channels(), len(traj), traj.dt)
    if i >= len(sig):
        raise EmptyWindowError(f"empty evaluation window at t = {traj.t0 + i * traj.dt}")
    return bool(sig[i])


# ------------------------------------------------------------ predicate stack


@dataclass(frozen=True)
class PredicateStack:
    """Safety predicates plus the tracking (liveness) predicate.

    The liveness component is ``eps - ||x - setpoint||``.
    """

    safety: Tuple[Pred, ...]
    eps: float
    setpoint: np.ndarray = field(compare=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "safety", tuple(self.safety))
        object.__setattr__(self, "setpoint", np.asarray(self.setpoint, dtype=float).ravel())

    @property
    def size(self) -> int:
        return len(self.safety) + 1

    def with_setpoint(self, r) -> "PredicateStack":
        return PredicateStack(self.safety, self.eps, np.asarray(r, dtype=float))


def _state_env(states: np.ndarray, setpoints: np.ndarray) -> Dict[str, np.ndarray]:
    env = {f"x{j + 1}": states[..., j] for j in range(states.shape[-1])}
    for j in range(setpoints.shape[-1]):
        env[f"r{j + 1}"] = setpoints[..., j]
    env["r"] = setpoints[..., 0]
    return env


def robustness_matrix(stack: PredicateStack, states, setpoints=None) -> np.ndarray:
    """Predicate values for many states, shape (L, N + 1).

    ``setpoints`` (L, n) overrides the stack setpoint per sample.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    R = np.broadcast_to(stack.setpoint if setpoints is None else np.asarray(setpoints, float), X.shape)
    env = _state_env(X, R)
    cols = [np.broadcast_to(np.asarray(p.value(env), float), (X.shape[0],)) for p in stack.safety]
    cols.append(stack.eps - np.linalg.norm(X - R, axis=1))
    return np.column_stack(cols)


def robustness_vector(stack: PredicateStack, x, setpoint=None) -> np.ndarray:
    """Safety predicate values of state ``x`` followed by the liveness margin."""
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    if len(stack.setpoint) and len(x) != len(stack.setpoint):
        raise ValueError("state dimension does not match the setpoint")
    sp = None if setpoint is None else np.asarray(setpoint, float)[None, :]
    return robustness_matrix(stack, x[None, :], sp)[0]


def smooth_conjunction(rhos) -> Union[float, np.ndarray]:
    """Soft minimum ``-log(sum(exp(-rho)))`` along the last axis.

    The minimum is subtracted before exponentiating, so large margins do
    not overflow. The result never exceeds ``min(rho)`` and lies within
    ``log(k)`` of it.
    """
    r = np.asarray(rhos, dtype=float)
    if r.size == 0 or r.shape[-1] == 0:
        raise ValueError("smooth_conjunction needs at least one value")
    m = np.min(r, axis=-1, keepdims=True)
    out = m[..., 0] - np.log(np.sum(np.exp(-(r - m)), axis=-1))
    return float(out) if out.ndim == 0 else out
