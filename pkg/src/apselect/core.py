"""Symbolic almost periodic functions on the real line with values in R^d.

Expressions are immutable trees built from trigonometric polynomials, gluing
over measurable partitions, shifts, radial truncation, sign normalization,
sums, scalar products, distance-to-point compositions and additive periodic
perturbation series.  Every expression evaluates pointwise (and in vectorized
batches) to a finite real vector.

Frequency bookkeeping is exact: frequencies are integer vectors over a fixed
real basis, so module membership is decided by integer linear algebra rather
than floating-point comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------

class ApError(Exception):
    """Base class for all library errors."""


class ApConfigError(ApError):
    """Invalid configuration, schema violation or inconsistent inputs."""


class ApNumericalError(ApError):
    """A numerical stage could not produce a usable result."""


class ApCertificateError(ApError):
    """A constructed object violates one of its declared inequalities."""


# --------------------------------------------------------------------------
# Value space
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSpaceCfg:
    """Value space R^dim with the Euclidean metric or its min{1,.} cap."""

    dim: int
    metric_kind: str = "euclidean"
    base_point: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ApConfigError(f"dim must be >= 1, got {self.dim}")
        if self.metric_kind not in ("euclidean", "capped"):
            raise ApConfigError(f"unknown metric_kind {self.metric_kind!r}")
        bp = tuple(float(x) for x in self.base_point) or (0.0,) * self.dim
        if len(bp) != self.dim or not all(math.isfinite(x) for x in bp):
            raise ApConfigError("base_point must have dim finite components")
        object.__setattr__(self, "base_point", bp)

    @property
    def capped(self) -> bool:
        return self.metric_kind == "capped"

    def rho(self, x, y) -> float:
        d = float(np.linalg.norm(np.asarray(x, float) - np.asarray(y, float)))
        return min(1.0, d) if self.capped else d

    def rho_batch(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        d = np.sqrt(np.sum((xs - ys) ** 2, axis=-1))
        return np.minimum(1.0, d) if self.capped else d


# --------------------------------------------------------------------------
# Frequency bases and modules (exact integer lattice arithmetic)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyBasis:
    """Positive reals beta_1..beta_m spanning all frequencies as integer combos.

    Rational independence of the basis elements is declared, not verified;
    only pairs explicitly listed in ``known_dependent`` are rejected when the
    independence flag is set.
    """

    reals: tuple[float, ...]
    independent: bool = True
    scale: float = 1.0
    known_dependent: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        reals = tuple(float(b) for b in self.reals)
        if not reals:
            raise ApConfigError("frequency basis must be non-empty")
        if any(not math.isfinite(b) or b <= 0.0 for b in reals):
            raise ApConfigError("basis reals must be finite and positive")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ApConfigError("basis scale must be positive")
        if self.independent:
            for i, j in self.known_dependent:
                if 0 <= i < len(reals) and 0 <= j < len(reals) and i != j:
                    raise ApConfigError(
                        f"basis elements {i} and {j} are declared rationally "
                        "dependent but the independence flag is set")
        object.__setattr__(self, "reals", reals)
        object.__setattr__(self, "known_dependent",
                           tuple((int(i), int(j)) for i, j in self.known_dependent))

    @property
    def size(self) -> int:
        return len(self.reals)

    def value(self, gvec: Sequence[int]) -> float:
        """Real frequency encoded by the integer vector ``gvec``."""
        if len(gvec) != self.size:
            raise ApConfigError("frequency vector length does not match basis")
        return self.scale * float(sum(int(g) * b for g, b in zip(gvec, self.reals)))

    def key(self) -> tuple:
        return (self.reals, self.scale)


def _ext_gcd(a: int, b: int) -> tuple[int, int, int]:
    """Return (g, x, y) with g = gcd(a, b) = a*x + b*y."""
    old_r, r = a, b
    old_s, s = 1, 0
    old_t, t = 0, 1
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
        old_t, t = t, old_t - q * t
    if old_r < 0:
        old_r, old_s, old_t = -old_r, -old_s, -old_t
    return old_r, old_s, old_t


def _echelon_rows(rows: Iterable[Sequence[int]], ncols: int) -> list[tuple[int, list[int]]]:
    """Integer row echelon form of the lattice spanned by ``rows``.

    Returns [(pivot_col, row), ...] with strictly increasing pivot columns;
    all transformations are unimodular, so the row span is preserved exactly.
    """
    work = [list(int(x) for x in r) for r in rows if any(r)]
    out: list[tuple[int, list[int]]] = []
    for col in range(ncols):
        piv = None
        rest = []
        for r in work:
            if r[col] == 0:
                rest.append(r)
            elif piv is None:
                piv = r
            else:
                a, b = piv[col], r[col]
                g, x, y = _ext_gcd(a, b)
                npiv = [x * pa + y * ra for pa, ra in zip(piv, r)]
                nr = [(a // g) * ra - (b // g) * pa for pa, ra in zip(piv, r)]
                piv = npiv
                if any(nr):
                    rest.append(nr)
        if piv is not None:
            if piv[col] < 0:
                piv = [-v for v in piv]
            out.append((col, piv))
        work = rest
    return out


@dataclass(frozen=True)
class FrequencyModule:
    """Finitely generated additive group of reals, encoded over a basis."""

    basis: FrequencyBasis
    generators: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        gens = []
        for g in self.generators:
            t = tuple(int(x) for x in g)
            if len(t) != self.basis.size:
                raise ApConfigError("generator length does not match basis")
            if any(t):
                gens.append(t)
        object.__setattr__(self, "generators", tuple(gens))

    @cached_property
    def _echelon(self) -> list[tuple[int, list[int]]]:
        return _echelon_rows(self.generators, self.basis.size)

    def contains(self, lam: Sequence[int]) -> bool:
        """Exact membership of the integer vector ``lam`` in the lattice."""
        v = [int(x) for x in lam]
        if len(v) != self.basis.size:
            raise ApConfigError("query vector length does not match basis")
        for col, row in self._echelon:
            if v[col] == 0:
                continue
            if v[col] % row[col]:
                return False
            q = v[col] // row[col]
            v = [vi - q * ri for vi, ri in zip(v, row)]
        return not any(v)

    def join(self, other: "FrequencyModule") -> "FrequencyModule":
        if other.basis.key() != self.basis.key():
            raise ApConfigError("mixed frequency bases")
        return FrequencyModule(self.basis, self.generators + other.generators)

    def with_generators(self, extra: Iterable[Sequence[int]]) -> "FrequencyModule":
        return FrequencyModule(
            self.basis,
            self.generators + tuple(tuple(int(x) for x in g) for g in extra))

    @property
    def is_zero(self) -> bool:
        return not self.generators


def module_contains(module: FrequencyModule, lam: Sequence[int]) -> bool:
    """True iff ``lam`` is an integer combination of the module's generators."""
    return module.contains(lam)


# --------------------------------------------------------------------------
# Expression nodes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseCtx:
    """Exact-phase context for samples on a period-commensurate grid.

    Sample i corresponds to t = (2*(m_start+i)+1) * b/(2Q) + (integer)*b, so
    a lattice sine of multiplier n has phase pi/Q * ((n*(2m+1)) mod 2Q).
    """

    b: float
    q: int
    m_start: int


class FuncExpr:
    """Base class: a function R -> R^{value_dim}, evaluable everywhere."""

    value_dim: int

    def children(self) -> tuple["FuncExpr", ...]:
        return ()

    def _eval(self, ts: np.ndarray, ctx: Optional[PhaseCtx],
              cache: dict) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


def _as_ts(ts) -> np.ndarray:
    arr = np.asarray(ts, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ApConfigError("evaluation points must be finite")
    return arr


def eval_batch(expr: FuncExpr, ts, phase_ctx: Optional[PhaseCtx] = None,
               cache: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``expr`` at all points of ``ts``.

    Returns (values, gaps): values has shape (len(ts), value_dim); gaps marks
    samples where a glued expression fell back to its default branch.
    Identical subtrees are evaluated once per call via the shared cache.
    """
    arr = _as_ts(ts)
    if cache is None:
        cache = {}
    key = (id(expr), phase_ctx)
    hit = cache.get(key)
    if hit is None:
        hit = expr._eval(arr, phase_ctx, cache)
        cache[key] = hit
    return hit


def evaluate(expr: FuncExpr, t: float) -> np.ndarray:
    """Pointwise evaluation; returns a vector of shape (value_dim,)."""
    vals, _ = eval_batch(expr, [t])
    return vals[0]


def _child_eval(expr: FuncExpr, ts, ctx, cache):
    key = (id(expr), ctx)
    hit = cache.get(key)
    if hit is None:
        hit = expr._eval(ts, ctx, cache)
        cache[key] = hit
    return hit


@dataclass(frozen=True)
class TrigPoly(FuncExpr):
    """Trigonometric polynomial sum_k c_k e^{i w_k t} with c_k in C^dim.

    Frequencies are integer vectors over ``basis``.  A poly whose terms are
    conjugate-symmetric is real valued and evaluates exactly through its real
    cosine/sine form; otherwise evaluation takes the real projection.
    """

    basis: FrequencyBasis
    terms: tuple[tuple[tuple[int, ...], tuple[complex, ...]], ...]
    value_dim: int = 1

    def __post_init__(self):
        if self.value_dim < 1:
            raise ApConfigError("value_dim must be >= 1")
        seen = set()
        norm = []
        for g, c in self.terms:
            gt = tuple(int(x) for x in g)
            if len(gt) != self.basis.size:
                raise ApConfigError("term frequency length does not match basis")
            if gt in seen:
                raise ApConfigError(f"duplicate term frequency {gt}")
            seen.add(gt)
            cv = tuple(complex(z) for z in c)
            if len(cv) != self.value_dim:
                raise ApConfigError("coefficient vector length does not match dim")
            if any(not (math.isfinite(z.real) and math.isfinite(z.imag)) for z in cv):
                raise ApConfigError("coefficients must be finite")
            norm.append((gt, cv))
        object.__setattr__(self, "terms", tuple(norm))

    @cached_property
    def real_valued(self) -> bool:
        tbl = dict(self.terms)
        for g, c in self.terms:
            neg = tuple(-x for x in g)
            cc = tbl.get(neg)
            if cc is None:
                return False
            if any(abs(a - b.conjugate()) > 0.0 for a, b in zip(c, cc)):
                return False
        return True

    @cached_property
    def _real_form(self):
        """(const_vec, [(omega, A, B), ...]) with eval = const + A cos + B sin."""
        const = np.zeros(self.value_dim)
        rows = {}
        for g, c in self.terms:
            if not any(g):
                const = const + np.array([z.real for z in c])
                continue
            canon = g if g > tuple(-x for x in g) else tuple(-x for x in g)
            sign = 1.0 if g == canon else -1.0
            omega = self.basis.value(canon)
            A, B = rows.setdefault(canon, (np.zeros(self.value_dim),
                                           np.zeros(self.value_dim)))
            # c e^{i w t} + conj pair -> 2Re(c) cos(wt) - 2Im(c) sin(wt); the
            # pairing is accounted for by visiting both +g and -g terms.
            A = A + np.array([z.real for z in c])
            B = B + np.array([-sign * z.imag for z in c])
            rows[canon] = (A, B)
        out = [(self.basis.value(g), g, A, B) for g, (A, B) in rows.items()]
        out.sort(key=lambda r: (abs(r[0]), r[1]))
        return const, out

    def _eval(self, ts, ctx, cache):
        n = ts.shape[0]
        if self.real_valued:
            const, rows = self._real_form
            vals = np.tile(const, (n, 1))
            for omega, _g, A, B in rows:
                if omega == 0.0:
                    vals += A[None, :]
                    continue
                wt = omega * ts
                c, s = np.cos(wt), np.sin(wt)
                vals += c[:, None] * A[None, :] + s[:, None] * B[None, :]
        else:
            acc = np.zeros((n, self.value_dim), dtype=complex)
            for g, c in self.terms:
                omega = self.basis.value(g)
                e = np.exp(1j * omega * ts)
                acc += e[:, None] * np.asarray(c, dtype=complex)[None, :]
            vals = acc.real
        return vals, np.zeros(n, dtype=bool)


@dataclass(frozen=True)
class StepCompose(FuncExpr):
    """Glue branch functions along a list of sets; branch 0 is the default.

    Membership is resolved in list order; a sample contained in no set takes
    the default branch and is flagged as a gap.
    """

    partition: tuple
    branches: tuple[FuncExpr, ...]

    def __post_init__(self):
        if not self.branches or len(self.partition) != len(self.branches):
            raise ApConfigError("partition and branches must align and be non-empty")
        dims = {b.value_dim for b in self.branches}
        if len(dims) != 1:
            raise ApConfigError("all branch dims must agree")

    @property
    def value_dim(self) -> int:
        return self.branches[0].value_dim

    def children(self):
        return tuple(self.branches)

    def _eval(self, ts, ctx, cache):
        n = ts.shape[0]
        vals, gaps = _child_eval(self.branches[0], ts, ctx, cache)
        vals = vals.copy()
        gaps = gaps.copy()
        undecided = np.ones(n, dtype=bool)
        for setexpr, branch in zip(self.partition, self.branches):
            member = setexpr.contains_batch(ts, phase_ctx=ctx, cache=cache)
            take = member & undecided
            if np.any(take):
                bv, bg = _child_eval(branch, ts, ctx, cache)
                vals[take] = bv[take]
                gaps[take] = bg[take]
            undecided &= ~member
        gaps = gaps | undecided  # default branch 0 already in place
        return vals, gaps


@dataclass(frozen=True)
class Shift(FuncExpr):
    inner: FuncExpr
    tau: float

    def __post_init__(self):
        if not math.isfinite(self.tau):
            raise ApConfigError("shift tau must be finite")

    @property
    def value_dim(self) -> int:
        return self.inner.value_dim

    def children(self):
        return (self.inner,)

    def _eval(self, ts, ctx, cache):
        # shifting invalidates any lattice-grid alignment, drop the phase ctx
        shifted_ctx = None if self.tau != 0.0 else ctx
        return _child_eval(self.inner, ts + self.tau, shifted_ctx, cache)


@dataclass(frozen=True)
class Truncate(FuncExpr):
    """Radial truncation: h if ||h|| <= a, else a*h/||h||."""

    inner: FuncExpr
    a: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ApConfigError("truncation level a must be positive")

    @property
    def value_dim(self) -> int:
        return self.inner.value_dim

    def children(self):
        return (self.inner,)

    def _eval(self, ts, ctx, cache):
        vals, gaps = _child_eval(self.inner, ts, ctx, cache)
        return truncate_vectors(vals, self.a), gaps


def truncate_vectors(vals: np.ndarray, a: float) -> np.ndarray:
    norms = np.sqrt(np.sum(vals ** 2, axis=-1, keepdims=True))
    scale = np.where(norms > a, a / np.where(norms > 0, norms, 1.0), 1.0)
    return vals * scale


@dataclass(frozen=True)
class Sgn(FuncExpr):
    """Unit-vector normalization h/||h||, with sgn(0) = 0."""

    inner: FuncExpr

    @property
    def value_dim(self) -> int:
        return self.inner.value_dim

    def children(self):
        return (self.inner,)

    def _eval(self, ts, ctx, cache):
        vals, gaps = _child_eval(self.inner, ts, ctx, cache)
        norms = np.sqrt(np.sum(vals ** 2, axis=-1, keepdims=True))
        out = np.where(norms > 0, vals / np.where(norms > 0, norms, 1.0), 0.0)
        return out, gaps


@dataclass(frozen=True)
class Sum(FuncExpr):
    left: FuncExpr
    right: FuncExpr

    def __post_init__(self):
        if self.left.value_dim != self.right.value_dim:
            raise ApConfigError("sum operands must share value_dim")

    @property
    def value_dim(self) -> int:
        return self.left.value_dim

    def children(self):
        return (self.left, self.right)

    def _eval(self, ts, ctx, cache):
        lv, lg = _child_eval(self.left, ts, ctx, cache)
        rv, rg = _child_eval(self.right, ts, ctx, cache)
        return lv + rv, lg | rg


@dataclass(frozen=True)
class ScalarProd(FuncExpr):
    """Pointwise product of a scalar expression with a vector expression."""

    scalar: FuncExpr
    vector: FuncExpr

    def __post_init__(self):
        if self.scalar.value_dim != 1:
            raise ApConfigError("scalar factor must have value_dim 1")

    @property
    def value_dim(self) -> int:
        return self.vector.value_dim

    def children(self):
        return (self.scalar, self.vector)

    def _eval(self, ts, ctx, cache):
        sv, sg = _child_eval(self.scalar, ts, ctx, cache)
        vv, vg = _child_eval(self.vector, ts, ctx, cache)
        return sv * vv, sg | vg


@dataclass(frozen=True)
class DistTo(FuncExpr):
    """Scalar distance t -> rho(inner(t), point), optionally max over blocks.

    With ``block_dims`` the inner vector splits into consecutive blocks and
    the distance is the maximum of the blockwise Euclidean distances (the
    product metric used when several component functions are stacked).
    """

    inner: FuncExpr
    point: tuple[float, ...]
    block_dims: Optional[tuple[int, ...]] = None

    value_dim: int = field(default=1, init=False)

    def __post_init__(self):
        pt = tuple(float(x) for x in self.point)
        if len(pt) != self.inner.value_dim:
            raise ApConfigError("point length does not match inner dim")
        if self.block_dims is not None:
            bd = tuple(int(d) for d in self.block_dims)
            if sum(bd) != self.inner.value_dim or any(d < 1 for d in bd):
                raise ApConfigError("block_dims must partition the inner dim")
            object.__setattr__(self, "block_dims", bd)
        object.__setattr__(self, "point", pt)

    def children(self):
        return (self.inner,)

    def _eval(self, ts, ctx, cache):
        vals, gaps = _child_eval(self.inner, ts, ctx, cache)
        diff = vals - np.asarray(self.point)[None, :]
        if self.block_dims is None:
            d = np.sqrt(np.sum(diff ** 2, axis=-1))
        else:
            d = np.zeros(ts.shape[0])
            off = 0
            for w in self.block_dims:
                d = np.maximum(d, np.sqrt(np.sum(diff[:, off:off + w] ** 2, axis=-1)))
                off += w
        return d[:, None], gaps


@dataclass(frozen=True)
class Stack(FuncExpr):
    """Concatenate several expressions into one vector-valued expression."""

    parts: tuple[FuncExpr, ...]

    def __post_init__(self):
        if not self.parts:
            raise ApConfigError("stack needs at least one part")

    @property
    def value_dim(self) -> int:
        return sum(p.value_dim for p in self.parts)

    def children(self):
        return tuple(self.parts)

    def _eval(self, ts, ctx, cache):
        vals = []
        gaps = np.zeros(ts.shape[0], dtype=bool)
        for p in self.parts:
            v, g = _child_eval(p, ts, ctx, cache)
            vals.append(v)
            gaps |= g
        return np.concatenate(vals, axis=1), gaps


@dataclass(frozen=True)
class PerturbedSum(FuncExpr):
    """Scalar expression plus the periodic sine series of a perturbation."""

    inner: FuncExpr
    series: object  # PerturbationSeries (duck-typed to avoid a module cycle)

    value_dim: int = field(default=1, init=False)

    def __post_init__(self):
        if self.inner.value_dim != 1:
            raise ApConfigError("perturbed sum requires a scalar inner expression")

    def children(self):
        return (self.inner,)

    def _eval(self, ts, ctx, cache):
        iv, ig = _child_eval(self.inner, ts, ctx, cache)
        skey = ("series", id(self.series), ctx)
        g = cache.get(skey)
        if g is None:
            g = self.series.values_on(ts, phase_ctx=ctx)
            cache[skey] = g
        return iv + g[:, None], ig


# --------------------------------------------------------------------------
# Wrapper operations (spec surface)
# --------------------------------------------------------------------------

def shift(f: FuncExpr, tau: float) -> FuncExpr:
    return Shift(f, float(tau))


def truncate(f: FuncExpr, a: float) -> FuncExpr:
    return Truncate(f, float(a))


def sgn_op(f: FuncExpr) -> FuncExpr:
    return Sgn(f)


# --------------------------------------------------------------------------
# Constructors
# --------------------------------------------------------------------------

def const(values, basis: Optional[FrequencyBasis] = None) -> TrigPoly:
    """Constant function with the given vector value."""
    vec = np.atleast_1d(np.asarray(values, dtype=float))
    basis = basis or FrequencyBasis((1.0,))
    zero = (0,) * basis.size
    return TrigPoly(basis, (((zero), tuple(complex(v) for v in vec)),),
                    value_dim=len(vec))


def trig_real(basis: FrequencyBasis, terms, value_dim: int = 1,
              constant=None) -> TrigPoly:
    """Real trig polynomial from (gvec, cos_vec, sin_vec) triples.

    Each triple contributes cos_vec*cos(w t) + sin_vec*sin(w t) with
    w = basis.value(gvec); the conjugate pair is generated automatically.
    """
    cterms: dict[tuple[int, ...], np.ndarray] = {}

    def add(g, cvec):
        g = tuple(int(x) for x in g)
        cur = cterms.get(g)
        cterms[g] = (cur + cvec) if cur is not None else cvec

    if constant is not None:
        cv = np.atleast_1d(np.asarray(constant, dtype=complex))
        if len(cv) != value_dim:
            raise ApConfigError("constant length does not match dim")
        add((0,) * basis.size, cv)
    for g, a, bb in terms:
        g = tuple(int(x) for x in g)
        av = np.atleast_1d(np.asarray(a, dtype=float))
        bv = np.atleast_1d(np.asarray(bb, dtype=float))
        if len(av) != value_dim or len(bv) != value_dim:
            raise ApConfigError("coefficient vectors must match dim")
        if not any(g):
            if np.any(bv):
                raise ApConfigError("zero frequency cannot carry a sine part")
            add(g, av.astype(complex))
            continue
        add(g, (av - 1j * bv) / 2.0)
        add(tuple(-x for x in g), (av + 1j * bv) / 2.0)
    return TrigPoly(basis, tuple((g, tuple(c)) for g, c in cterms.items()),
                    value_dim=value_dim)


def sin_wave(omega: float = 1.0) -> TrigPoly:
    """Scalar sin(omega t) with a fresh one-element basis."""
    return trig_real(FrequencyBasis((float(omega),)), [((1,), [0.0], [1.0])])


def cos_wave(omega: float = 1.0) -> TrigPoly:
    return trig_real(FrequencyBasis((float(omega),)), [((1,), [1.0], [0.0])])


def circle_exp() -> TrigPoly:
    """The planar exponential t -> (cos t, sin t) in R^2."""
    return trig_real(FrequencyBasis((1.0,)),
                     [((1,), [1.0, 0.0], [0.0, 1.0])], value_dim=2)


# --------------------------------------------------------------------------
# Real spectra (for exact means, shift moduli and coefficient probes)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Real cosine/sine form of a trig-polynomial expression.

    terms maps a hashable key to (omega, A, B) with omega > 0 and A, B
    coefficient vectors: f(t) = const + sum_k A_k cos(w_k t) + B_k sin(w_k t).
    """

    dim: int
    const: tuple[float, ...]
    terms: tuple[tuple[object, float, tuple[float, ...], tuple[float, ...]], ...]

    def amplitudes_sq(self) -> np.ndarray:
        return np.array([sum(a * a for a in A) + sum(b * b for b in B)
                         for _k, _w, A, B in self.terms])

    def omegas(self) -> np.ndarray:
        return np.array([w for _k, w, _A, _B in self.terms])


def _spec_merge(dim: int, parts: list[Spectrum]) -> Spectrum:
    const = np.zeros(dim)
    acc: dict[object, tuple[float, np.ndarray, np.ndarray]] = {}
    for sp in parts:
        const += np.asarray(sp.const)
        for key, w, A, B in sp.terms:
            if key in acc:
                _, A0, B0 = acc[key]
                acc[key] = (w, A0 + np.asarray(A), B0 + np.asarray(B))
            else:
                acc[key] = (w, np.asarray(A, float).copy(), np.asarray(B, float).copy())
    terms = tuple(sorted(
        ((key, w, tuple(A), tuple(B)) for key, (w, A, B) in acc.items()),
        key=lambda r: (r[1], repr(r[0]))))
    return Spectrum(dim, tuple(const), terms)


def real_spectrum(expr: FuncExpr) -> Optional[Spectrum]:
    """Extract the exact cosine/sine form, or None if not a trig polynomial."""
    if isinstance(expr, TrigPoly):
        if not expr.real_valued:
            return None
        cconst, rows = expr._real_form
        bk = expr.basis.key()
        terms = []
        for omega, g, A, B in rows:
            if omega == 0.0:
                cconst = cconst + A
                continue
            if omega < 0.0:
                omega, B = -omega, -B
            terms.append((("g", bk, g), omega, tuple(A), tuple(B)))
        return Spectrum(expr.value_dim, tuple(cconst), tuple(terms))
    if isinstance(expr, Sum):
        l = real_spectrum(expr.left)
        r = real_spectrum(expr.right)
        if l is None or r is None:
            return None
        return _spec_merge(expr.value_dim, [l, r])
    if isinstance(expr, Shift):
        sp = real_spectrum(expr.inner)
        if sp is None:
            return None
        terms = []
        for key, w, A, B in sp.terms:
            c, s = math.cos(w * expr.tau), math.sin(w * expr.tau)
            A2 = tuple(c * a + s * b for a, b in zip(A, B))
            B2 = tuple(c * b - s * a for a, b in zip(A, B))
            terms.append((("sh", key, expr.tau), w, A2, B2))
        return Spectrum(sp.dim, sp.const, tuple(terms))
    if isinstance(expr, Stack):
        parts = [real_spectrum(p) for p in expr.parts]
        if any(p is None for p in parts):
            return None
        dim = expr.value_dim
        const = np.zeros(dim)
        terms = []
        off = 0
        for p in parts:
            const[off:off + p.dim] = p.const
            for key, w, A, B in p.terms:
                A2 = np.zeros(dim)
                B2 = np.zeros(dim)
                A2[off:off + p.dim] = A
                B2[off:off + p.dim] = B
                terms.append((("st", off, key), w, tuple(A2), tuple(B2)))
            off += p.dim
        return Spectrum(dim, tuple(const), tuple(terms))
    if isinstance(expr, PerturbedSum):
        inner = real_spectrum(expr.inner)
        if inner is None:
            return None
        s = expr.series
        terms = list(inner.terms)
        for n_mult, amp in zip(s.alpha_mults, s.amplitudes):
            omega = n_mult * TWO_PI / s.period
            terms.append((("lat", s.period, int(n_mult)), float(omega),
                          (0.0,), (float(amp),)))
        return _spec_merge(1, [Spectrum(1, inner.const, tuple(terms))])
    return None


# --------------------------------------------------------------------------
# Frequency module extraction
# --------------------------------------------------------------------------

def _walk_exprs(expr: FuncExpr, _seen: Optional[set] = None) -> Iterator[FuncExpr]:
    seen = _seen if _seen is not None else set()
    if id(expr) in seen:
        return
    seen.add(id(expr))
    yield expr
    if isinstance(expr, StepCompose):
        for s in expr.partition:
            for e in s.inner_func_exprs():
                yield from _walk_exprs(e, seen)
    for ch in expr.children():
        yield from _walk_exprs(ch, seen)


def iter_series(expr: FuncExpr) -> list:
    """All perturbation series reachable from ``expr`` (document order)."""
    out = []
    for e in _walk_exprs(expr):
        if isinstance(e, PerturbedSum) and all(e.series is not s for s in out):
            out.append(e.series)
    return out


def freq_module(expr: FuncExpr) -> FrequencyModule:
    """A frequency module containing Mod f (superset by construction).

    Collects all trig term frequencies, the frequencies of partition-defining
    level sets, and the period lattice of any perturbation series; wrappers
    (shift, truncation, sign, sums, distances) contribute nothing new.
    """
    basis: Optional[FrequencyBasis] = None
    gens: list[tuple[int, ...]] = []
    extra_lattice: list[float] = []

    for e in _walk_exprs(expr):
        if isinstance(e, TrigPoly):
            if basis is None:
                basis = e.basis
            elif basis.key() != e.basis.key():
                raise ApConfigError("mixed frequency bases")
            gens.extend(g for g, _c in e.terms if any(g))
        elif isinstance(e, PerturbedSum):
            s = e.series
            fv = getattr(s, "freq_vec", None)
            if fv is not None:
                gens.append(tuple(int(x) for x in fv))
            else:
                extra_lattice.append(TWO_PI / s.period)

    if basis is None:
        basis = FrequencyBasis((1.0,))
        gens = []
    if extra_lattice:
        # extend the basis with the series' base frequencies
        reals = basis.reals + tuple(extra_lattice)
        newb = FrequencyBasis(reals, independent=False, scale=basis.scale)
        pad = len(extra_lattice)
        gens = [g + (0,) * pad for g in gens]
        for i in range(pad):
            unit = [0] * len(reals)
            unit[basis.size + i] = 1
            gens.append(tuple(unit))
        return FrequencyModule(newb, tuple(gens))
    return FrequencyModule(basis, tuple(gens))


# --------------------------------------------------------------------------
# Set-valued maps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiMap:
    """Set-valued map represented by finitely many trajectory functions."""

    trajectories: tuple[FuncExpr, ...]
    space: MetricSpaceCfg

    def __post_init__(self):
        if not self.trajectories:
            raise ApConfigError("a multimap needs at least one trajectory")
        dims = {t.value_dim for t in self.trajectories}
        if len(dims) != 1:
            raise ApConfigError("trajectories must share value_dim")
        if self.trajectories[0].value_dim != self.space.dim:
            raise ApConfigError("trajectory dim does not match space dim")

    @property
    def dim(self) -> int:
        return self.space.dim

    def values_batch(self, ts, phase_ctx=None, cache=None) -> np.ndarray:
        """Array of shape (n_traj, len(ts), dim)."""
        if cache is None:
            cache = {}
        return np.stack([eval_batch(tr, ts, phase_ctx, cache)[0]
                         for tr in self.trajectories])

    def point_set(self, t: float) -> np.ndarray:
        return self.values_batch([t])[:, 0, :]


# --------------------------------------------------------------------------
# Exact rational phase helper (shared with the perturbation series)
# --------------------------------------------------------------------------

def exact_phase_fracs(n_mult: int, ts: np.ndarray, b: float,
                      period_offset: int = 0) -> np.ndarray:
    """frac(n*t/b + n*offset) computed exactly from the floats' rationals.

    The integer n*offset cancels exactly, which is what makes the period
    lattice property checkable at all in floating point.
    """
    fb = Fraction(b)
    out = np.empty(ts.shape[0])
    n = int(n_mult)
    off = n * int(period_offset)
    for i, t in enumerate(ts):
        x = n * (Fraction(float(t)) / fb) + off
        out[i] = float(x - math.floor(x))
    return out
