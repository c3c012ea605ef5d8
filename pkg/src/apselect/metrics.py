"""Deterministic numerical estimation of almost-periodic metrics and densities.

All limit operations (limsup of symmetric averages, sup over unit windows,
essential sup) are replaced by a declared finite schedule of horizons with
composite-midpoint quadrature at fixed spacing and pairwise reduction, making
every estimate bit-reproducible for a given configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .core import (ApConfigError, ApNumericalError, FuncExpr, MetricSpaceCfg,
                   PhaseCtx, Shift, Spectrum, eval_batch, iter_series,
                   real_spectrum)

CHUNK = 1 << 19
_TAME_PHASE = float(1 << 46)  # max |nu|*b for closed-form trig quadrature


# --------------------------------------------------------------------------
# Averaging schemes and estimates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AveragingScheme:
    """Finite stand-in for b -> +inf: horizons, spacing, limsup window."""

    b_list: tuple[float, ...]
    step: float
    limsup_window: int = 3
    sum_order: str = "pairwise"

    def __post_init__(self):
        bs = tuple(float(b) for b in self.b_list)
        if not bs or any(b <= 0 for b in bs) or list(bs) != sorted(set(bs)):
            raise ApConfigError("b_list must be strictly increasing positives")
        if not (0 < self.step <= bs[0] / 100.0):
            raise ApConfigError("step must satisfy 0 < step <= b_list[0]/100")
        if not (1 <= self.limsup_window <= len(bs)):
            raise ApConfigError("limsup_window must be in [1, len(b_list)]")
        if self.sum_order != "pairwise":
            raise ApConfigError("only pairwise summation is supported")
        object.__setattr__(self, "b_list", bs)

    @property
    def b_max(self) -> float:
        return self.b_list[-1]


def default_scheme(b_max: float = 1.0e4, step: float = 1.0e-3,
                   window: int = 3, b0: float = 100.0) -> AveragingScheme:
    """Geometric horizon schedule b0*2^k capped and deduplicated at b_max."""
    bs = []
    b = float(b0)
    while b < b_max:
        bs.append(b)
        b *= 2.0
    if not bs or bs[-1] < b_max:
        bs.append(float(b_max))
    window = min(window, len(bs))
    return AveragingScheme(tuple(bs), float(step), window)


@dataclass(frozen=True)
class AverageEstimate:
    """Horizon-schedule estimate of a limsup average.

    ``per_horizon`` holds (horizon, estimate) pairs on the reported scale;
    ``value`` is the max over the last ``limsup_window`` horizons and
    ``spread`` the max-min over that window.
    """

    value: float
    per_horizon: tuple[tuple[float, float], ...]
    spread: float
    kind: str = ""


# --------------------------------------------------------------------------
# Grids
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformHorizon:
    b: float
    n: int
    h: float

    def chunks(self) -> Iterator[tuple[np.ndarray, Optional[PhaseCtx]]]:
        for lo in range(0, self.n, CHUNK):
            hi = min(lo + CHUNK, self.n)
            ts = -self.b + (np.arange(lo, hi, dtype=float) + 0.5) * self.h
            yield ts, None


@dataclass(frozen=True)
class PeriodicHorizon:
    """Grid commensurate with a period b: spacing b/q over [-m*b, m*b]."""

    period: float
    q: int
    m: int

    @property
    def b(self) -> float:
        return self.m * self.period

    @property
    def n(self) -> int:
        return 2 * self.m * self.q

    @property
    def h(self) -> float:
        return self.period / self.q

    def chunks(self) -> Iterator[tuple[np.ndarray, Optional[PhaseCtx]]]:
        half = self.m * self.q
        for lo in range(0, self.n, CHUNK):
            hi = min(lo + CHUNK, self.n)
            idx = np.arange(lo - half, hi - half, dtype=float)
            ts = (idx + 0.5) * self.h
            yield ts, PhaseCtx(self.period, self.q, lo - half)


def uniform_horizon(b: float, step: float) -> UniformHorizon:
    n = int(math.ceil(2.0 * b / step))
    return UniformHorizon(float(b), n, 2.0 * b / n)


def choose_commensurate_q(period: float, step: float,
                          mults: Sequence[int]) -> int:
    """Samples per period: >= period/step, avoiding aliasing of the lattice
    multipliers (each sampled phase orbit must have length >= 64)."""
    q0 = max(4, int(math.ceil(period / step)))
    best, best_orbit = q0, -1
    for q in range(q0, q0 + 400):
        worst = 1 << 62
        for n in mults:
            r = int(n) % (2 * q)
            orbit = (2 * q) // math.gcd(2 * r, 2 * q) if r else 1
            worst = min(worst, orbit)
        if worst >= min(64, 2 * q):
            return q
        if worst > best_orbit:
            best, best_orbit = q, worst
    return best


def horizons_for(scheme: AveragingScheme, series=None) -> list:
    """Uniform horizons, or period-commensurate ones when a series is given."""
    if series is None:
        return [uniform_horizon(b, scheme.step) for b in scheme.b_list]
    q = choose_commensurate_q(series.period, scheme.step, series.alpha_mults)
    out = []
    for b in scheme.b_list:
        m = max(1, int(math.ceil(b / series.period)))
        out.append(PeriodicHorizon(series.period, q, m))
    return out


def _single_series(exprs: Iterable[FuncExpr]):
    found = []
    for e in exprs:
        for s in iter_series(e):
            if all(s is not t for t in found):
                found.append(s)
    if not found:
        return None
    if len(found) > 1 and any(s.period != found[0].period for s in found):
        return None  # incommensurate series: fall back to uniform grids
    return found[0]


# --------------------------------------------------------------------------
# Pairwise-reduced quadrature
# --------------------------------------------------------------------------

def horizon_mean(fn: Callable[[np.ndarray, Optional[PhaseCtx]], np.ndarray],
                 horizon) -> float:
    """Mean of fn over the horizon's midpoint grid (pairwise reduction).

    The midpoint rule for (1/2b) * integral over [-b, b] at spacing h = 2b/n
    is exactly the sample mean, so no spacing factors are multiplied in.
    """
    partials = [np.sum(fn(ts, ctx)) for ts, ctx in horizon.chunks()]
    return float(np.sum(np.asarray(partials))) / horizon.n


def horizon_max(fn, horizon) -> float:
    return float(max(np.max(fn(ts, ctx)) for ts, ctx in horizon.chunks()))


def averaged_over(fn, scheme: AveragingScheme, series=None,
                  transform: Optional[Callable[[float], float]] = None,
                  kind: str = "") -> AverageEstimate:
    """Per-horizon means, transformed, with max/spread over the last window."""
    per = []
    for hz in horizons_for(scheme, series):
        avg = horizon_mean(fn, hz)
        per.append((hz.b, transform(avg) if transform else avg))
    w = scheme.limsup_window
    window = [v for _b, v in per[-w:]]
    return AverageEstimate(max(window), tuple(per),
                           max(window) - min(window), kind)


def _expr_integrand(expr: FuncExpr) -> Callable:
    def fn(ts, ctx):
        vals, _gaps = eval_batch(expr, ts, ctx, cache={})
        return vals[:, 0]
    return fn


# --------------------------------------------------------------------------
# Spec operations
# --------------------------------------------------------------------------

def time_average(h_expr: FuncExpr, scheme: AveragingScheme) -> AverageEstimate:
    """Horizon-schedule estimate of limsup (1/2b) int_{-b}^{b} h(t) dt."""
    if h_expr.value_dim != 1:
        raise ApConfigError("time_average requires a scalar expression")
    series = _single_series([h_expr])
    return averaged_over(_expr_integrand(h_expr), scheme, series,
                         kind="time_average")


def besicovitch_mean_vec(f: FuncExpr, scheme: AveragingScheme) -> np.ndarray:
    """Componentwise mean over the largest horizon (best-constant probe)."""
    series = _single_series([f])
    hz = horizons_for(scheme, series)[-1]
    total = np.zeros(f.value_dim)
    for ts, ctx in hz.chunks():
        vals, _ = eval_batch(f, ts, ctx, cache={})
        total += np.sum(vals, axis=0)
    return total / hz.n


def _rho_fn(f: FuncExpr, g: FuncExpr, space: MetricSpaceCfg,
            power: float = 1.0) -> Callable:
    if f.value_dim != g.value_dim:
        raise ApConfigError("dimension mismatch")

    def fn(ts, ctx):
        cache = {}
        fv, _ = eval_batch(f, ts, ctx, cache)
        gv, _ = eval_batch(g, ts, ctx, cache)
        d = space.rho_batch(fv, gv)
        if power == 1.0:
            return d
        if power == 2.0:
            return d * d
        return d ** power
    return fn


def metric_DB_p(f: FuncExpr, g: FuncExpr, p: float, space: MetricSpaceCfg,
                scheme: AveragingScheme) -> AverageEstimate:
    """Besicovitch distance: limsup averages of rho^p, then the 1/p-th root.

    With a capped space this is the order-1 metric on (U, min{1, rho}); p must
    then be 1.
    """
    if p < 1:
        raise ApConfigError("p must be >= 1")
    if space.capped and p != 1:
        raise ApConfigError("capped metric fixes p = 1")
    series = _single_series([f, g])
    root = None if p == 1 else (lambda x: x ** (1.0 / p))
    return averaged_over(_rho_fn(f, g, space, p), scheme, series,
                         transform=root, kind=f"DB_{p:g}")


def capped_DB(f: FuncExpr, g: FuncExpr, scheme: AveragingScheme) -> AverageEstimate:
    """Convenience: the capped Besicovitch metric on R^dim values."""
    space = MetricSpaceCfg(f.value_dim, "capped")
    return metric_DB_p(f, g, 1.0, space, scheme)


def metric_DS_p(f: FuncExpr, g: FuncExpr, p: float, space: MetricSpaceCfg,
                scheme: AveragingScheme,
                xi_grid: Optional[float] = None) -> float:
    """Stepanov distance: sup over unit windows of the L^p window integral.

    The sup runs over every window start on the largest-horizon grid (ties
    resolve to the smallest xi); window integrals come from prefix sums.
    """
    if p < 1:
        raise ApConfigError("p must be >= 1")
    if space.capped and p != 1:
        raise ApConfigError("capped metric fixes p = 1")
    series = _single_series([f, g])
    hz = horizons_for(scheme, series)[-1]
    if 2.0 * hz.b <= 1.0:
        raise ApConfigError("largest horizon shorter than the unit window")
    fn = _rho_fn(f, g, space, p)
    vals = np.empty(hz.n)
    pos = 0
    for ts, ctx in hz.chunks():
        vals[pos:pos + ts.shape[0]] = fn(ts, ctx)
        pos += ts.shape[0]
    w = max(1, int(round(1.0 / hz.h)))
    if w >= hz.n:
        raise ApConfigError("unit window does not fit the horizon grid")
    prefix = np.concatenate(([0.0], np.cumsum(vals)))
    sums = prefix[w:] - prefix[:-w]
    stride = max(1, int(round((xi_grid or hz.h) / hz.h)))
    best = float(np.max(sums[::stride]) * hz.h)
    return best ** (1.0 / p)


def metric_Dinf(f: FuncExpr, g: FuncExpr, space: MetricSpaceCfg,
                scheme: AveragingScheme) -> float:
    """Grid max of rho(f(t), g(t)) over the largest horizon."""
    series = _single_series([f, g])
    hz = horizons_for(scheme, series)[-1]
    return horizon_max(_rho_fn(f, g, space), hz)


def density_upper(T, scheme: AveragingScheme, mode: str = "complement",
                  ) -> AverageEstimate:
    """Upper density estimate of a measurable-set expression.

    mode="complement": limsup (1/2b) meas([-b,b] \\ T)  (the complement
    density); mode="direct": limsup (1/2b) meas([-b,b] & T).
    """
    if mode not in ("complement", "direct"):
        raise ApConfigError(f"unknown density mode {mode!r}")
    series = _single_series(T.inner_func_exprs())

    def fn(ts, ctx):
        member = T.contains_batch(ts, phase_ctx=ctx, cache={})
        ind = member.astype(float)
        return ind if mode == "direct" else 1.0 - ind

    return averaged_over(fn, scheme, series, kind=f"density_{mode}")


# --------------------------------------------------------------------------
# Fourier-Bohr coefficient probes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierEstimate:
    value: tuple[complex, ...]
    horizon: float
    error_bound: Optional[float]  # set for trig-polynomial inputs

    def as_complex_plane(self) -> complex:
        """Read a 2d real signal (x1, x2) as the complex signal x1 + i x2."""
        if len(self.value) < 2:
            raise ApConfigError("complex-plane view needs value_dim >= 2")
        return self.value[0] + 1j * self.value[1]


def _midpoint_exp_mean(nu: float, b: float, n: int, h: float) -> float:
    """Exact midpoint-grid mean of e^{i nu t} over the symmetric grid.

    (1/n) sum_m e^{i nu (-b + (m+1/2)h)} = sin(nu b) / (n sin(nu h / 2)),
    real by symmetry.  Removable limit 1 at nu -> 0; genuine aliasing spikes
    (nu h near 2 pi k) are the true value of the quadrature sum.
    """
    x = nu * h / 2.0
    s = math.sin(x)
    if s == 0.0:
        return 1.0 if nu == 0.0 else float(math.cos(nu * (h / 2.0 - b)))
    return math.sin(nu * b) / (n * s)


def _spectrum_tame(sp: Spectrum, lam: float, b: float) -> bool:
    top = max((abs(w) for _k, w, _a, _b in sp.terms), default=0.0)
    return (top + abs(lam)) * b <= _TAME_PHASE


def fourier_bohr(f: FuncExpr, lam: float, scheme: AveragingScheme,
                 ) -> FourierEstimate:
    """Quadrature estimate of lim (1/2b) int e^{-i lam t} f(t) dt.

    For trig-polynomial inputs the composite-midpoint sum is evaluated in
    closed form (termwise Dirichlet kernel of the midpoint lattice), which
    matches the literal pairwise-summed grid to rounding; other inputs take
    the grid path.  The reported error bound 2/b covers trig inputs whose
    off-coefficient exponents are >= 1 apart from lam.
    """
    if not math.isfinite(lam):
        raise ApConfigError("lambda must be finite")
    hz = uniform_horizon(scheme.b_max, scheme.step)
    sp = real_spectrum(f)
    if sp is not None and _spectrum_tame(sp, lam, hz.b):
        acc = np.asarray(sp.const, dtype=complex) * \
            _midpoint_exp_mean(-lam, hz.b, hz.n, hz.h)
        for _key, w, A, B in sp.terms:
            cplus = (np.asarray(A) - 1j * np.asarray(B)) / 2.0
            cminus = (np.asarray(A) + 1j * np.asarray(B)) / 2.0
            acc = acc + cplus * _midpoint_exp_mean(w - lam, hz.b, hz.n, hz.h)
            acc = acc + cminus * _midpoint_exp_mean(-w - lam, hz.b, hz.n, hz.h)
        return FourierEstimate(tuple(acc), hz.b, 2.0 / hz.b)

    total = np.zeros(f.value_dim, dtype=complex)
    for ts, ctx in hz.chunks():
        vals, _ = eval_batch(f, ts, ctx, cache={})
        phase = np.exp(-1j * lam * ts)
        total += phase @ vals.astype(complex)
    bound = 2.0 / hz.b if sp is not None else None
    return FourierEstimate(tuple(total / hz.n), hz.b, bound)


# --------------------------------------------------------------------------
# Hausdorff distance on finite point sets
# --------------------------------------------------------------------------

def dist_hausdorff(A, B, space: MetricSpaceCfg) -> float:
    """max{ sup_a rho(a, B), sup_b rho(b, A) } on finite sets, capped if the
    space is capped."""
    Aa = np.atleast_2d(np.asarray(A, dtype=float))
    Bb = np.atleast_2d(np.asarray(B, dtype=float))
    if Aa.size == 0 or Bb.size == 0:
        raise ApConfigError("Hausdorff distance needs non-empty sets")
    if Aa.shape[1] != space.dim or Bb.shape[1] != space.dim:
        raise ApConfigError("point dimension does not match space")
    D = np.sqrt(np.sum((Aa[:, None, :] - Bb[None, :, :]) ** 2, axis=-1))
    d = max(float(np.max(np.min(D, axis=1))), float(np.max(np.min(D, axis=0))))
    return min(1.0, d) if space.capped else d


# --------------------------------------------------------------------------
# Almost-period scanning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AlmostPeriodScan:
    accepted: tuple[float, ...]
    distances: tuple[tuple[float, float], ...]  # (tau, distance) for all probes
    gap_witness: Optional[float]  # max gap between consecutive accepted taus

    @property
    def empty(self) -> bool:
        return not self.accepted


def almost_periods(f: FuncExpr, eps: float, metric: str, tau_max: float,
                   tau_step: float, scheme: AveragingScheme,
                   p: float = 1.0) -> AlmostPeriodScan:
    """Scan shift candidates and report those with metric distance < eps.

    metric is one of DS_p, DB_p, capped.  The witness is the largest gap
    between consecutive accepted shifts; it certifies relative density only
    inside the scanned window.  An empty acceptance list is a distinguished
    outcome (scan.empty), not a failure.
    """
    if not (tau_max > tau_step > 0):
        raise ApConfigError("need tau_max > tau_step > 0")
    if eps <= 0:
        raise ApConfigError("eps must be positive")
    if metric not in ("DS_p", "DB_p", "capped"):
        raise ApConfigError(f"unknown metric {metric!r}")
    space = MetricSpaceCfg(f.value_dim)
    taus = np.arange(tau_step, tau_max + tau_step / 2.0, tau_step)
    rows = []
    accepted = []
    for tau in taus:
        shifted = Shift(f, float(tau))
        if metric == "DS_p":
            d = metric_DS_p(f, shifted, p, space, scheme)
        elif metric == "DB_p":
            d = metric_DB_p(f, shifted, p, space, scheme).value
        else:
            d = capped_DB(f, shifted, scheme).value
        rows.append((float(tau), float(d)))
        if d < eps:
            accepted.append(float(tau))
    witness = None
    if len(accepted) >= 2:
        witness = float(np.max(np.diff(np.asarray(accepted))))
    return AlmostPeriodScan(tuple(accepted), tuple(rows), witness)
