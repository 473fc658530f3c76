"""Formula mini-languages.

Three small dialects configure the package:

* transform formulas describe how survival data becomes piece-wise
  exponential data, e.g. ``Surv(days, status) ~ . | concurrent(bili, tz_var
  = "day")`` or ``Surv(time, status) ~ . | cumulative(latency(tz), z.tz,
  tz_var = "tz", ll_fun = window(0, 12))``
* model formulas describe the additive predictor of a hazard model, e.g.
  ``ped_status ~ s(tend) + x1 + te(tz_latency, z.tz, by = LL)``
* hazard expressions describe log-hazards for simulation, e.g.
  ``~ -3.5 + f0(t) - 0.5 * x1 + sqrt(x2)``

All three share one tokenizer and recursive-descent machinery.  Errors carry
the 0-based character offset of the offending token (``len(text)`` for an
unexpected end of input).  Every parsed object pretty-prints back to a
canonical string that reparses to an equal value.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateTzVarError,
    FormulaSyntaxError,
    UnknownColumnError,
    UnknownFunctionError,
    UnknownSpecialError,
)

__all__ = [
    "LagLeadSpec",
    "DefaultLagLead",
    "LaggedLagLead",
    "WindowLagLead",
    "CumulativeComponent",
    "ConcurrentSpec",
    "CumulativeSpec",
    "TransformSpec",
    "LinearTerm",
    "InterceptTerm",
    "SmoothTerm",
    "TensorTerm",
    "ModelSpec",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "CumulativeNode",
    "HazardSpec",
    "parse_transform_formula",
    "parse_model_formula",
    "parse_hazard_expression",
    "parse_lag_lead",
    "evaluate_expression",
    "EXPRESSION_FUNCTIONS",
]


# --------------------------------------------------------------------------
# lag-lead window specifications

class LagLeadSpec:
    """Base class for lag-lead window rules.

    A lag-lead rule decides, for a follow-up interval ``(tstart, tend]`` and
    an exposure time ``tz``, whether the exposure contributes to the hazard
    in that interval.
    """

    def active(self, tstart, tend, tz):
        raise NotImplementedError


@dataclass(frozen=True)
class DefaultLagLead(LagLeadSpec):
    """Exposure contributes from the first interval starting at or after tz."""

    def active(self, tstart, tend, tz):
        return np.asarray(tstart) >= np.asarray(tz)

    def __str__(self):
        return "default"


@dataclass(frozen=True)
class LaggedLagLead(LagLeadSpec):
    """Exposure starts contributing ``lag`` time units after tz."""

    lag: float

    def active(self, tstart, tend, tz):
        return np.asarray(tstart) >= np.asarray(tz) + self.lag

    def __str__(self):
        return f"lagged({_fmt_num(self.lag)})"


@dataclass(frozen=True)
class WindowLagLead(LagLeadSpec):
    """Exposure contributes on intervals inside ``[tz + lag, tz + lag + lead]``.

    An interval is active when it starts no earlier than ``tz + lag`` and
    ends no later than ``tz + lag + lead``.
    """

    lag: float
    lead: float

    def active(self, tstart, tend, tz):
        tz = np.asarray(tz)
        lo = np.asarray(tstart) >= tz + self.lag
        hi = np.asarray(tend) <= tz + self.lag + self.lead
        return lo & hi

    def __str__(self):
        return f"window({_fmt_num(self.lag)}, {_fmt_num(self.lead)})"


# --------------------------------------------------------------------------
# transform formulas

@dataclass(frozen=True)
class CumulativeComponent:
    """One variable inside a cumulative(...) term.

    ``latency=True`` means the variable enters as time since exposure
    (``tend - tz``) rather than on its own scale.
    """

    name: str
    latency: bool = False

    def __str__(self):
        return f"latency({self.name})" if self.latency else self.name


@dataclass(frozen=True)
class ConcurrentSpec:
    """Time-dependent covariates merged onto intervals by last value carried
    forward."""

    columns: tuple[str, ...]
    tz_var: str

    def __str__(self):
        inner = ", ".join(self.columns)
        return f'concurrent({inner}, tz_var = "{self.tz_var}")'


@dataclass(frozen=True)
class CumulativeSpec:
    """A cumulative-effect term: matrix covariates over an exposure grid."""

    components: tuple[CumulativeComponent, ...]
    tz_var: str
    ll: LagLeadSpec = field(default_factory=DefaultLagLead)

    def __str__(self):
        parts = [str(c) for c in self.components]
        parts.append(f'tz_var = "{self.tz_var}"')
        parts.append(f"ll_fun = {self.ll}")
        return f"cumulative({', '.join(parts)})"


@dataclass(frozen=True)
class TransformSpec:
    """Parsed form of ``Surv(time, status) ~ rhs``.

    ``keep=None`` stands for ``.``: carry along every non-structural column.
    """

    time_col: str
    status_col: str
    keep: tuple[str, ...] | None = None
    concurrent: tuple[ConcurrentSpec, ...] = ()
    cumulative: tuple[CumulativeSpec, ...] = ()

    def __str__(self):
        rhs = "." if self.keep is None else " + ".join(self.keep)
        specials = [str(s) for s in self.concurrent] + [
            str(s) for s in self.cumulative
        ]
        out = f"Surv({self.time_col}, {self.status_col}) ~ {rhs}"
        if specials:
            out += " | " + " + ".join(specials)
        return out


# --------------------------------------------------------------------------
# model formulas

@dataclass(frozen=True)
class InterceptTerm:
    """The literal ``1``; the intercept is always included anyway."""

    def __str__(self):
        return "1"

    @property
    def label(self):
        return "1"


@dataclass(frozen=True)
class LinearTerm:
    """A parametric column, optionally multiplied with a second one (x:t)."""

    name: str
    times: str | None = None

    def __str__(self):
        return self.name if self.times is None else f"{self.name}:{self.times}"

    @property
    def label(self):
        return str(self)


def _by_str(by: tuple[str, ...]) -> str:
    return " * ".join(by)


@dataclass(frozen=True)
class SmoothTerm:
    """A univariate smooth ``s(var)`` with optional by-variable and basis
    dimension."""

    var: str
    by: tuple[str, ...] = ()
    k: int = 10

    def __str__(self):
        parts = [self.var]
        if self.by:
            parts.append(f"by = {_by_str(self.by)}")
        if self.k != 10:
            parts.append(f"k = {self.k}")
        return f"s({', '.join(parts)})"

    @property
    def label(self):
        base = f"s({self.var})"
        if self.by:
            base += ":" + "*".join(self.by)
        return base


@dataclass(frozen=True)
class TensorTerm:
    """A tensor-product smooth ``te(a, b)`` with optional by-variable."""

    vars: tuple[str, ...]
    by: tuple[str, ...] = ()
    k: tuple[int, ...] = (10, 10)

    def __str__(self):
        parts = list(self.vars)
        if self.by:
            parts.append(f"by = {_by_str(self.by)}")
        if any(kk != 10 for kk in self.k):
            parts.append(f"k = c({', '.join(str(v) for v in self.k)})")
        return f"te({', '.join(parts)})"

    @property
    def label(self):
        base = f"te({','.join(self.vars)})"
        if self.by:
            base += ":" + "*".join(self.by)
        return base


ModelTerm = InterceptTerm | LinearTerm | SmoothTerm | TensorTerm


@dataclass(frozen=True)
class ModelSpec:
    """Parsed form of ``response ~ term + term + ...``."""

    response: str
    terms: tuple[ModelTerm, ...]

    def __str__(self):
        rhs = " + ".join(str(t) for t in self.terms) if self.terms else "1"
        return f"{self.response} ~ {rhs}"


# --------------------------------------------------------------------------
# hazard expressions

@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self):
        return _fmt_num(self.value)


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: "Expr"

    def __str__(self):
        return f"-{_paren(self.arg, 25)}"


_PRECEDENCE = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self):
        prec = _PRECEDENCE[self.op]
        if self.op == "^":
            # right-associative
            left = _paren(self.left, prec + 1)
            right = _paren(self.right, prec)
        else:
            left = _paren(self.left, prec)
            right = _paren(self.right, prec + 1)
        return f"{left} {self.op} {right}"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]

    def __str__(self):
        return f"{self.func}({', '.join(str(a) for a in self.args)})"


Expr = Num | Var | Neg | BinOp | Call


def _expr_prec(e) -> int:
    if isinstance(e, BinOp):
        return _PRECEDENCE[e.op]
    if isinstance(e, Neg):
        return 15
    return 100


def _paren(e, minimum: int) -> str:
    s = str(e)
    return f"({s})" if _expr_prec(e) < minimum else s


@dataclass(frozen=True)
class CumulativeNode:
    """A simulated cumulative effect: ``fcumu(t, tz, z, f_xyz = ..., ll_fun
    = ...)``."""

    builtin: str
    tz_var: str
    z_var: str
    ll: LagLeadSpec = field(default_factory=DefaultLagLead)

    def __str__(self):
        return (
            f"fcumu(t, {self.tz_var}, {self.z_var}, "
            f"f_xyz = {self.builtin}, ll_fun = {self.ll})"
        )


@dataclass(frozen=True)
class HazardSpec:
    """Parsed form of ``~ expr | fcumu(...) + fcumu(...)``."""

    expr: Expr
    cumulative: tuple[CumulativeNode, ...] = ()

    def __str__(self):
        out = f"~ {self.expr}"
        if self.cumulative:
            out += " | " + " + ".join(str(c) for c in self.cumulative)
        return out


# --------------------------------------------------------------------------
# tokenizer

class TokenType(enum.Enum):
    NAME = "name"
    NUMBER = "number"
    STRING = "string"
    OP = "op"
    EOF = "end of input"


@dataclass(frozen=True)
class Token:
    type: TokenType
    value: str
    start: int
    end: int

    def describe(self) -> str:
        if self.type is TokenType.EOF:
            return "end of input"
        return repr(self.value)


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<string>"[^"]*"|'[^']*')
  | (?P<op>\*\*|[~+\-*/^(),=|:.])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(
                f"unexpected character {text[pos]!r}", position=pos
            )
        pos = m.end()
        kind = m.lastgroup
        if kind == "ws":
            continue
        value = m.group()
        if kind == "number":
            tokens.append(Token(TokenType.NUMBER, value, m.start(), m.end()))
        elif kind == "name":
            tokens.append(Token(TokenType.NAME, value, m.start(), m.end()))
        elif kind == "string":
            tokens.append(Token(TokenType.STRING, value, m.start(), m.end()))
        else:
            op = "^" if value == "**" else value
            tokens.append(Token(TokenType.OP, op, m.start(), m.end()))
    tokens.append(Token(TokenType.EOF, "", n, n))
    return tokens


class _Parser:
    """Shared token-stream helpers for the three dialect parsers."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tok
        if t.type is not TokenType.EOF:
            self.i += 1
        return t

    def at_op(self, *ops: str) -> bool:
        return self.tok.type is TokenType.OP and self.tok.value in ops

    def accept_op(self, *ops: str) -> Token | None:
        if self.at_op(*ops):
            return self.advance()
        return None

    def fail(self, expected: str, token: Token | None = None):
        t = token if token is not None else self.tok
        raise FormulaSyntaxError(
            f"unexpected {t.describe()}", position=t.start, expected=expected
        )

    def expect_op(self, op: str) -> Token:
        if not self.at_op(op):
            self.fail(f"'{op}'")
        return self.advance()

    def expect_name(self, what: str = "a name") -> Token:
        if self.tok.type is not TokenType.NAME:
            self.fail(what)
        return self.advance()

    def expect_number(self) -> tuple[float, Token]:
        sign = 1.0
        start = self.tok
        if self.accept_op("-"):
            sign = -1.0
        if self.tok.type is not TokenType.NUMBER:
            self.fail("a number", start if sign < 0 else None)
        t = self.advance()
        return sign * float(t.value), t

    def expect_eof(self):
        if self.tok.type is not TokenType.EOF:
            self.fail("end of formula")


def _fmt_num(v: float) -> str:
    f = float(v)
    if f == int(f) and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


# --------------------------------------------------------------------------
# lag-lead parsing (shared between dialects)

def _parse_lag_lead(p: _Parser) -> LagLeadSpec:
    name_tok = p.expect_name("a lag-lead rule (default, lagged, window)")
    name = name_tok.value
    if name == "default":
        return DefaultLagLead()
    if name == "lagged":
        p.expect_op("(")
        lag, _ = p.expect_number()
        p.expect_op(")")
        return LaggedLagLead(lag)
    if name == "window":
        p.expect_op("(")
        lag, _ = p.expect_number()
        p.expect_op(",")
        lead, _ = p.expect_number()
        p.expect_op(")")
        return WindowLagLead(lag, lead)
    raise FormulaSyntaxError(
        f"unknown lag-lead rule {name!r}",
        position=name_tok.start,
        expected="default, lagged(lag) or window(lag, lead)",
    )


def parse_lag_lead(text: str) -> LagLeadSpec:
    """Parse a lag-lead rule on its own, e.g. ``window(2, 5)``."""
    p = _Parser(text)
    ll = _parse_lag_lead(p)
    p.expect_eof()
    return ll


# --------------------------------------------------------------------------
# transform formula parser

def parse_transform_formula(text: str) -> TransformSpec:
    """Parse ``Surv(time, status) ~ rhs [| specials]``.

    The right-hand side is either ``.`` (keep all non-structural columns) or
    a ``+``-separated list of column names.  Specials are ``concurrent(...)``
    and ``cumulative(...)`` terms, each naming its exposure time variable via
    ``tz_var = "..."``.
    """
    p = _Parser(text)
    surv = p.expect_name("'Surv'")
    if surv.value != "Surv":
        p.fail("'Surv'", surv)
    p.expect_op("(")
    time_tok = p.expect_name("the follow-up time column")
    p.expect_op(",")
    status_tok = p.expect_name("the status column")
    p.expect_op(")")
    if status_tok.value == time_tok.value:
        raise FormulaSyntaxError(
            "status column must differ from the time column",
            position=status_tok.start,
        )
    p.expect_op("~")

    keep: tuple[str, ...] | None
    if p.accept_op("."):
        keep = None
    else:
        names = [p.expect_name("'.' or a column name").value]
        while p.accept_op("+"):
            names.append(p.expect_name("a column name").value)
        keep = tuple(names)

    concurrent: list[ConcurrentSpec] = []
    cumulative: list[CumulativeSpec] = []
    seen_tz: dict[str, Token] = {}
    if p.accept_op("|"):
        while True:
            _parse_special(p, time_tok.value, concurrent, cumulative, seen_tz)
            if not p.accept_op("+"):
                break
    p.expect_eof()
    return TransformSpec(
        time_col=time_tok.value,
        status_col=status_tok.value,
        keep=keep,
        concurrent=tuple(concurrent),
        cumulative=tuple(cumulative),
    )


def _parse_special(p, time_col, concurrent, cumulative, seen_tz):
    name_tok = p.expect_name("'concurrent' or 'cumulative'")
    if name_tok.value not in ("concurrent", "cumulative"):
        raise UnknownSpecialError(
            f"unknown special {name_tok.value!r}",
            position=name_tok.start,
            expected="'concurrent' or 'cumulative'",
        )
    p.expect_op("(")
    components: list[CumulativeComponent] = []
    component_toks: list[Token] = []
    tz_var: str | None = None
    tz_tok: Token | None = None
    ll: LagLeadSpec | None = None
    while True:
        if p.tok.type is not TokenType.NAME:
            p.fail("a variable name or keyword argument")
        if _peek_is_kwarg(p):
            key_tok = p.advance()
            p.expect_op("=")
            if key_tok.value == "tz_var":
                if p.tok.type is not TokenType.STRING:
                    p.fail('a quoted column name, e.g. tz_var = "day"')
                val_tok = p.advance()
                if tz_var is not None:
                    raise FormulaSyntaxError(
                        "tz_var given twice", position=val_tok.start
                    )
                tz_var = val_tok.value[1:-1]
                tz_tok = val_tok
            elif key_tok.value == "ll_fun":
                if name_tok.value != "cumulative":
                    raise FormulaSyntaxError(
                        "ll_fun only applies to cumulative terms",
                        position=key_tok.start,
                    )
                if ll is not None:
                    raise FormulaSyntaxError(
                        "ll_fun given twice", position=key_tok.start
                    )
                ll = _parse_lag_lead(p)
            else:
                raise FormulaSyntaxError(
                    f"unknown argument {key_tok.value!r}",
                    position=key_tok.start,
                    expected="tz_var or ll_fun",
                )
        else:
            comp_tok = p.tok
            if p.tok.value == "latency":
                p.advance()
                p.expect_op("(")
                inner = p.expect_name("a variable name")
                p.expect_op(")")
                components.append(CumulativeComponent(inner.value, latency=True))
                component_toks.append(inner)
            else:
                components.append(CumulativeComponent(p.advance().value))
                component_toks.append(comp_tok)
        if p.accept_op(","):
            continue
        p.expect_op(")")
        break

    if tz_var is None:
        raise FormulaSyntaxError(
            f"{name_tok.value} term needs tz_var = \"...\"",
            position=name_tok.start,
        )
    if tz_var in seen_tz:
        raise DuplicateTzVarError(
            f"tz_var {tz_var!r} used by more than one term",
            position=tz_tok.start,
        )
    seen_tz[tz_var] = tz_tok

    if name_tok.value == "concurrent":
        if any(c.latency for c in components):
            raise FormulaSyntaxError(
                "latency() only applies inside cumulative terms",
                position=name_tok.start,
            )
        if not components:
            p.fail("at least one column name")
        concurrent.append(
            ConcurrentSpec(tuple(c.name for c in components), tz_var)
        )
    else:
        if not components:
            raise FormulaSyntaxError(
                "cumulative needs at least one variable",
                position=name_tok.start,
            )
        n_time = 0
        for comp, tok in zip(components, component_toks):
            if comp.latency and comp.name != tz_var:
                raise FormulaSyntaxError(
                    f"latency({comp.name}) must reference the term's tz_var "
                    f"{tz_var!r}",
                    position=tok.start,
                )
            if not comp.latency and comp.name == time_col:
                n_time += 1
                if n_time > 1:
                    raise FormulaSyntaxError(
                        "only one component may be the follow-up time",
                        position=tok.start,
                    )
        cumulative.append(
            CumulativeSpec(
                tuple(components), tz_var, ll if ll is not None else DefaultLagLead()
            )
        )


def _peek_is_kwarg(p: _Parser) -> bool:
    nxt = p.tokens[p.i + 1] if p.i + 1 < len(p.tokens) else None
    return (
        p.tok.type is TokenType.NAME
        and nxt is not None
        and nxt.type is TokenType.OP
        and nxt.value == "="
    )


# --------------------------------------------------------------------------
# model formula parser

def parse_model_formula(text: str) -> ModelSpec:
    """Parse ``response ~ term + term + ...``.

    Terms are bare column names, ``x:t`` products, smooths ``s(x, by = ...,
    k = ...)`` and tensor products ``te(x, y, by = ..., k = c(...))``.
    """
    p = _Parser(text)
    response = p.expect_name("the response column").value
    p.expect_op("~")
    terms: list[ModelTerm] = [_parse_model_term(p)]
    while p.accept_op("+"):
        terms.append(_parse_model_term(p))
    p.expect_eof()
    return ModelSpec(response=response, terms=tuple(terms))


def _parse_model_term(p: _Parser) -> ModelTerm:
    if p.tok.type is TokenType.NUMBER:
        t = p.advance()
        if float(t.value) != 1.0:
            raise FormulaSyntaxError(
                "only the literal 1 is allowed as a term", position=t.start
            )
        return InterceptTerm()
    name_tok = p.expect_name("a term")
    if name_tok.value in ("s", "te") and p.at_op("("):
        return _parse_smooth_call(p, name_tok)
    if p.accept_op(":"):
        other = p.expect_name("a column name")
        return LinearTerm(name_tok.value, times=other.value)
    return LinearTerm(name_tok.value)


def _parse_smooth_call(p: _Parser, name_tok: Token) -> ModelTerm:
    kind = name_tok.value
    p.expect_op("(")
    margins: list[str] = []
    by: tuple[str, ...] = ()
    k_values: tuple[int, ...] | None = None
    while True:
        if p.tok.type is not TokenType.NAME:
            p.fail("a variable name or keyword argument")
        if _peek_is_kwarg(p):
            key_tok = p.advance()
            p.expect_op("=")
            if key_tok.value == "by":
                if by:
                    raise FormulaSyntaxError(
                        "by given twice", position=key_tok.start
                    )
                first = p.expect_name("a by-variable").value
                if p.accept_op("*"):
                    second = p.expect_name("a by-variable").value
                    by = (first, second)
                else:
                    by = (first,)
            elif key_tok.value == "k":
                if k_values is not None:
                    raise FormulaSyntaxError(
                        "k given twice", position=key_tok.start
                    )
                k_values = _parse_k(p)
            else:
                raise FormulaSyntaxError(
                    f"unknown argument {key_tok.value!r}",
                    position=key_tok.start,
                    expected="by or k",
                )
        else:
            margins.append(p.expect_name("a variable name").value)
        if p.accept_op(","):
            continue
        p.expect_op(")")
        break

    if kind == "s":
        if len(margins) != 1:
            p.fail("exactly one variable inside s(...)", name_tok)
        if k_values is not None and len(k_values) != 1:
            raise FormulaSyntaxError(
                "s(...) takes a single k", position=name_tok.start
            )
        return SmoothTerm(
            margins[0], by=by, k=k_values[0] if k_values else 10
        )
    if len(margins) < 2:
        p.fail("at least two variables inside te(...)", name_tok)
    if k_values is None:
        k_values = tuple(10 for _ in margins)
    elif len(k_values) != len(margins):
        raise FormulaSyntaxError(
            f"k = c(...) needs {len(margins)} entries",
            position=name_tok.start,
        )
    return TensorTerm(tuple(margins), by=by, k=k_values)


def _parse_k(p: _Parser) -> tuple[int, ...]:
    if p.tok.type is TokenType.NUMBER:
        val, tok = p.expect_number()
        return (_as_basis_dim(val, tok),)
    c_tok = p.expect_name("a number or c(...)")
    if c_tok.value != "c":
        p.fail("a number or c(...)", c_tok)
    p.expect_op("(")
    vals = []
    while True:
        val, tok = p.expect_number()
        vals.append(_as_basis_dim(val, tok))
        if p.accept_op(","):
            continue
        p.expect_op(")")
        break
    return tuple(vals)


def _as_basis_dim(val: float, tok: Token) -> int:
    if val != int(val) or val < 1:
        raise FormulaSyntaxError(
            "basis dimension k must be a positive integer", position=tok.start
        )
    return int(val)


# --------------------------------------------------------------------------
# hazard expression parser

#: functions usable in hazard expressions, with their arity
EXPRESSION_FUNCTION_ARITY = {
    "sqrt": 1,
    "log": 1,
    "exp": 1,
    "dnorm": 3,
    "dgamma": 3,
    "f0": 1,
}

#: weight functions fcumu may name; implementations live in the simulation
#: module
CUMULATIVE_FUNCTION_NAMES = ("f_wce", "f_dlnm", "f_elra")


def parse_hazard_expression(text: str) -> HazardSpec:
    """Parse ``~ expr [| fcumu(...) + fcumu(...)]``.

    The expression may use ``+ - * / ^``, parentheses, numeric literals and
    the functions sqrt, log, exp, dnorm(x, mean, sd), dgamma(x, shape, rate)
    and f0(t).
    """
    p = _Parser(text)
    p.expect_op("~")
    expr = _parse_sum(p)
    nodes: list[CumulativeNode] = []
    if p.accept_op("|"):
        while True:
            nodes.append(_parse_fcumu(p))
            if not p.accept_op("+"):
                break
    p.expect_eof()
    return HazardSpec(expr=expr, cumulative=tuple(nodes))


def _parse_sum(p: _Parser) -> Expr:
    left = _parse_product(p)
    while p.at_op("+", "-"):
        op = p.advance().value
        right = _parse_product(p)
        left = BinOp(op, left, right)
    return left


def _parse_product(p: _Parser) -> Expr:
    left = _parse_unary(p)
    while p.at_op("*", "/"):
        op = p.advance().value
        right = _parse_unary(p)
        left = BinOp(op, left, right)
    return left


def _parse_unary(p: _Parser) -> Expr:
    if p.accept_op("-"):
        return Neg(_parse_unary(p))
    return _parse_power(p)


def _parse_power(p: _Parser) -> Expr:
    base = _parse_atom(p)
    if p.accept_op("^"):
        return BinOp("^", base, _parse_unary(p))
    return base


def _parse_atom(p: _Parser) -> Expr:
    if p.tok.type is TokenType.NUMBER:
        return Num(float(p.advance().value))
    if p.accept_op("("):
        inner = _parse_sum(p)
        p.expect_op(")")
        return inner
    if p.tok.type is TokenType.NAME:
        name_tok = p.advance()
        if p.accept_op("("):
            args = [_parse_sum(p)]
            while p.accept_op(","):
                args.append(_parse_sum(p))
            p.expect_op(")")
            arity = EXPRESSION_FUNCTION_ARITY.get(name_tok.value)
            if arity is None:
                raise UnknownFunctionError(
                    f"unknown function {name_tok.value!r}",
                    position=name_tok.start,
                    expected=", ".join(sorted(EXPRESSION_FUNCTION_ARITY)),
                )
            if len(args) != arity:
                raise FormulaSyntaxError(
                    f"{name_tok.value} takes {arity} argument"
                    f"{'s' if arity != 1 else ''}, got {len(args)}",
                    position=name_tok.start,
                )
            return Call(name_tok.value, tuple(args))
        return Var(name_tok.value)
    p.fail("a number, name or '('")


def _parse_fcumu(p: _Parser) -> CumulativeNode:
    head = p.expect_name("'fcumu'")
    if head.value != "fcumu":
        p.fail("'fcumu'", head)
    p.expect_op("(")
    t_tok = p.expect_name("'t'")
    if t_tok.value != "t":
        raise FormulaSyntaxError(
            "the first fcumu argument must be the follow-up time t",
            position=t_tok.start,
        )
    p.expect_op(",")
    tz_var = p.expect_name("the exposure time variable").value
    p.expect_op(",")
    z_var = p.expect_name("the exposure value variable").value
    builtin: str | None = None
    ll: LagLeadSpec | None = None
    while p.accept_op(","):
        key_tok = p.expect_name("f_xyz or ll_fun")
        p.expect_op("=")
        if key_tok.value == "f_xyz":
            f_tok = p.expect_name("a partial-effect function name")
            if f_tok.value not in CUMULATIVE_FUNCTION_NAMES:
                raise UnknownFunctionError(
                    f"unknown cumulative weight function {f_tok.value!r}",
                    position=f_tok.start,
                    expected=" or ".join(CUMULATIVE_FUNCTION_NAMES),
                )
            builtin = f_tok.value
        elif key_tok.value == "ll_fun":
            ll = _parse_lag_lead(p)
        else:
            raise FormulaSyntaxError(
                f"unknown argument {key_tok.value!r}",
                position=key_tok.start,
                expected="f_xyz or ll_fun",
            )
    p.expect_op(")")
    if builtin is None:
        raise FormulaSyntaxError(
            "fcumu needs f_xyz = <function name>", position=head.start
        )
    return CumulativeNode(
        builtin=builtin,
        tz_var=tz_var,
        z_var=z_var,
        ll=ll if ll is not None else DefaultLagLead(),
    )


# --------------------------------------------------------------------------
# expression evaluation

def _dnorm(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * np.sqrt(2.0 * np.pi))


def _dgamma(x, shape, rate):
    # rate parameterization; density is zero at or below the origin
    from scipy.special import gammaln

    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logpdf = (
            shape * np.log(rate)
            + (shape - 1.0) * np.log(x)
            - rate * x
            - gammaln(shape)
        )
        out = np.where(x > 0, np.exp(logpdf), 0.0)
    return out


def default_baseline(t):
    """Default simulation baseline: a gamma-density bump over follow-up."""
    return _dgamma(t, 8.0, 2.0) * 6.0


#: default bindings for hazard-expression evaluation
EXPRESSION_FUNCTIONS = {
    "sqrt": np.sqrt,
    "log": np.log,
    "exp": np.exp,
    "dnorm": _dnorm,
    "dgamma": _dgamma,
    "f0": default_baseline,
}


def evaluate_expression(expr: Expr, env: dict, functions: dict | None = None):
    """Evaluate a parsed hazard expression over numpy-compatible bindings.

    ``env`` maps variable names to scalars or arrays; ``functions`` may
    override or extend the default function bindings.
    """
    funcs = EXPRESSION_FUNCTIONS if functions is None else {
        **EXPRESSION_FUNCTIONS, **functions
    }

    def ev(node):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Var):
            if node.name not in env:
                raise UnknownColumnError(
                    f"hazard expression references unknown variable "
                    f"{node.name!r}"
                )
            return env[node.name]
        if isinstance(node, Neg):
            return -ev(node.arg)
        if isinstance(node, BinOp):
            left, right = ev(node.left), ev(node.right)
            if node.op == "+":
                return left + right
            if node.op == "-":
                return left - right
            if node.op == "*":
                return left * right
            if node.op == "/":
                return np.divide(left, right)
            return np.power(left, right)
        if isinstance(node, Call):
            return funcs[node.func](*(ev(a) for a in node.args))
        raise TypeError(f"not an expression node: {node!r}")

    with np.errstate(all="ignore"):
        return ev(expr)
