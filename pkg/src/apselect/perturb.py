"""Fast-sine perturbations that keep a family of signals away from zero.

Given a family of scalar almost periodic signals that is equicontinuous in
mean under small shifts, a b-periodic sine series g with ||g||_inf < Delta is
constructed so that each truncation level delta_j certifies a density bound
kappa({ |f + g| < delta_j }) < 2^{-j-1} for every family member f.

The stage frequencies grow doubly exponentially, so they are kept as exact
integer multiples of 2 pi / b and all sine phases are reduced in exact
rational (or residue) arithmetic; naive floating sin(alpha t) is meaningless
already at stage 1 of realistic configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (ApCertificateError, ApConfigError, ApNumericalError,
                   DistTo, FuncExpr, PerturbedSum, PhaseCtx, Shift, Sum,
                   Truncate, TWO_PI, const, eval_batch, exact_phase_fracs,
                   real_spectrum, trig_real, FrequencyBasis)
from .metrics import (AverageEstimate, AveragingScheme, capped_DB,
                      choose_commensurate_q, density_upper)

_EXACT_EVAL_MAX = 20_000      # Fraction-exact path cap (scattered points)
_FLOAT_PHASE_MAX = 4.0e9      # max |n * t / b| for the float reduction path
_GOLDEN_FRAC = 0.6180339887498949


# --------------------------------------------------------------------------
# Sublevel-avoidance parameters (exact closed forms)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AvoidanceParams:
    """Parameters certifying that f(t) + Delta sin(alpha t) leaves the
    delta-sublevel outside a set of upper density eps, for alpha large enough.

    N is minimal with 1/(N+1) < eps/2 (and N >= 2); eps_prime, delta_prime
    and delta follow by the closed displays below.
    """

    eps: float
    Delta: float
    N: int
    eps_prime: float
    delta_prime: float
    delta: float


def avoidance_params(eps: float, Delta: float) -> AvoidanceParams:
    """Compute the avoidance parameters for accuracy eps and amplitude Delta."""
    if not (0.0 < eps <= 1.0):
        raise ApConfigError("eps must lie in (0, 1]")
    if not (Delta > 0.0 and math.isfinite(Delta)):
        raise ApConfigError("Delta must be positive and finite")
    n = max(2, int(math.floor(2.0 / eps - 1.0)) + 1)
    eps_prime = eps / (2.0 * n * (n + 1.0))
    delta_prime = 2.0 * math.sin(math.pi / (2.0 * n)) \
        * math.sin(math.pi * eps_prime / 2.0)
    delta = min(1.0, delta_prime * Delta / 3.0)
    return AvoidanceParams(eps, Delta, n, eps_prime, delta_prime, delta)


# --------------------------------------------------------------------------
# Shift moduli: certified (or estimated) bounds on sup_f D(f, f(.+tau))
# --------------------------------------------------------------------------

class ShiftModulus:
    """Upper bound on the capped mean shift distance of a family.

    ``bound(tau)`` bounds sup over the family of the capped Besicovitch
    distance between f and f(.+tau); ``slope`` (if not None) certifies
    bound(tau) <= slope * tau for all tau >= 0.
    """

    certified = True
    slope: Optional[float] = None

    def bound(self, tau: float) -> float:
        raise NotImplementedError

    def tau_for_bound(self, target: float, tau_cap: float = 1.0,
                      probes: Optional[Sequence[float]] = None) -> float:
        """Largest tau0 <= tau_cap with bound(tau) < target for tau <= tau0."""
        if target <= 0:
            raise ApConfigError("shift bound target must be positive")
        if self.slope is not None:
            if self.slope == 0.0:
                return tau_cap
            return min(tau_cap, target / self.slope)
        grid = probes if probes is not None else geometric_probes(tau_cap)
        tau0 = _prefix_scan(self.bound, target, grid)
        if tau0 is None:
            raise ApNumericalError(
                "no probe satisfies the shift-smallness bound "
                f"{target:.3e}; family too rough for this grid")
        return tau0


def geometric_probes(tau_max: float = 1.0, ratio: float = 0.5,
                     count: int = 60) -> tuple[float, ...]:
    return tuple(tau_max * ratio ** k for k in reversed(range(count)))


def _prefix_scan(fn: Callable[[float], float], target: float,
                 probes: Sequence[float]) -> Optional[float]:
    """Largest probe tau with fn < target on every probe <= tau (ascending)."""
    best = None
    for tau in probes:
        if fn(float(tau)) < target:
            best = float(tau)
        else:
            break
    return best


class SpectralModulus(ShiftModulus):
    """Exact modulus for trig-polynomial families.

    The mean square of f(.+tau) - f(.) is exactly 2 sum_k q_k sin^2(w_k tau/2)
    (q_k the summed squared cosine/sine amplitudes over components), and the
    capped mean distance is at most its square root; the quadratic majorant
    gives the certified slope sqrt(sum q_k w_k^2 / 2).
    """

    def __init__(self, omegas, amps_sq):
        self.omegas = np.asarray(omegas, dtype=float)
        self.amps_sq = np.asarray(amps_sq, dtype=float)
        l2 = float(np.sum(self.amps_sq * self.omegas ** 2))
        self.slope = math.sqrt(l2 / 2.0) if math.isfinite(l2) else None

    @classmethod
    def from_expr(cls, expr: FuncExpr) -> Optional["SpectralModulus"]:
        sp = real_spectrum(expr)
        if sp is None:
            return None
        return cls(sp.omegas(), sp.amplitudes_sq())

    def bound(self, tau: float) -> float:
        s = 2.0 * float(np.sum(self.amps_sq *
                               np.sin(self.omegas * tau / 2.0) ** 2))
        return min(1.0, math.sqrt(s))


class ScaledModulus(ShiftModulus):
    """Modulus of a C-Lipschitz image of a signal with a known modulus."""

    def __init__(self, inner: ShiftModulus, factor: float):
        self.inner = inner
        self.factor = float(factor)
        self.certified = inner.certified
        self.slope = None if inner.slope is None else self.factor * inner.slope

    def bound(self, tau):
        return min(1.0, self.factor * self.inner.bound(tau))


class CompositeModulus(ShiftModulus):
    """Sum rule: |D(a+b)| <= D(a) + D(b), capped at 1."""

    def __init__(self, parts: Sequence[ShiftModulus]):
        self.parts = tuple(parts)
        self.certified = all(p.certified for p in self.parts)
        slopes = [p.slope for p in self.parts]
        self.slope = None if any(s is None for s in slopes) else float(sum(slopes))

    def bound(self, tau):
        return min(1.0, sum(p.bound(tau) for p in self.parts))


class MaxModulus(ShiftModulus):
    """Family modulus: the worst member bound."""

    def __init__(self, parts: Sequence[ShiftModulus]):
        self.parts = tuple(parts)
        self.certified = all(p.certified for p in self.parts)
        slopes = [p.slope for p in self.parts]
        self.slope = None if any(s is None for s in slopes) else float(max(slopes))

    def bound(self, tau):
        return max(p.bound(tau) for p in self.parts)


class NumericModulus(ShiftModulus):
    """Quadrature estimate of the capped shift distance (not certified)."""

    certified = False
    slope = None

    def __init__(self, member: FuncExpr, scheme: AveragingScheme):
        if member.value_dim != 1:
            raise ApConfigError("numeric modulus expects scalar members")
        self.member = member
        self.scheme = scheme

    def bound(self, tau):
        return capped_DB(self.member, Shift(self.member, float(tau)),
                         self.scheme).value


def modulus_for_expr(expr: FuncExpr) -> Optional[ShiftModulus]:
    """Certified analytic shift modulus, when the expression shape admits one.

    Distance-to-point compositions inherit the inner vector's modulus by the
    reverse triangle inequality; truncation is 2-Lipschitz; sums compose
    additively.  Returns None when no certified bound is derivable.
    """
    sm = SpectralModulus.from_expr(expr)
    if sm is not None:
        return sm
    if isinstance(expr, DistTo):
        return modulus_for_expr(expr.inner)
    if isinstance(expr, Shift):
        return modulus_for_expr(expr.inner)
    if isinstance(expr, Truncate):
        inner = modulus_for_expr(expr.inner)
        return None if inner is None else ScaledModulus(inner, 2.0)
    if isinstance(expr, Sum):
        left = modulus_for_expr(expr.left)
        right = modulus_for_expr(expr.right)
        if left is None or right is None:
            return None
        return CompositeModulus([left, right])
    if isinstance(expr, PerturbedSum):
        inner = modulus_for_expr(expr.inner)
        if inner is None:
            return None
        s = expr.series
        omegas = [n * TWO_PI / s.period for n in s.alpha_mults]
        return CompositeModulus([inner, SpectralModulus(omegas,
                                                        np.square(s.amplitudes))])
    return None


def family_modulus(family: Sequence[FuncExpr], scheme: AveragingScheme,
                   ) -> ShiftModulus:
    """Analytic modulus when every member admits one, else numeric estimates."""
    parts = []
    for f in family:
        m = modulus_for_expr(f)
        parts.append(m if m is not None else NumericModulus(f, scheme))
    return MaxModulus(parts)


def tau0_estimate(family: Sequence[FuncExpr], bound: float,
                  scheme: AveragingScheme,
                  tau_probe: Sequence[float]) -> float:
    """Largest probed tau0 with estimated capped D^(B)(f, f(.+tau)) < bound
    for every probed tau <= tau0 and every family member.

    Raises ApNumericalError when even the smallest probe fails (distinguished
    outcome: the family is too rough for this bound at this grid).
    """
    if bound <= 0:
        raise ApConfigError("bound must be positive")
    if not family:
        raise ApConfigError("family must be non-empty")
    probes = sorted(float(t) for t in tau_probe)
    if not probes or probes[0] <= 0:
        raise ApConfigError("tau probes must be positive")

    def worst(tau: float) -> float:
        return max(capped_DB(f, Shift(f, tau), scheme).value for f in family)

    tau0 = _prefix_scan(worst, bound, probes)
    if tau0 is None:
        raise ApNumericalError(
            f"no probe passes the bound {bound:.3e}: family too rough for "
            "the requested bound at this grid")
    return tau0


# --------------------------------------------------------------------------
# The perturbation series
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSeries:
    """b-periodic sine series g(t) = sum_j amplitudes[j] sin(alpha_j t) with
    alpha_j = alpha_mults[j] * 2 pi / period, plus its certificate schedule.

    levels[j] is the certified robust level: for every family member f and
    every bounded disturbance within levels[j], the sublevel
    { |f + g + disturbance| < levels[j] } has upper density < 2^{-j-1}.
    """

    period: float
    depth: int
    amplitudes: tuple[float, ...]
    alpha_mults: tuple[int, ...]
    levels: tuple[float, ...]
    tau_zeros: tuple[float, ...]
    family_tag: str = ""
    freq_vec: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if not (self.period > 0 and math.isfinite(self.period)):
            raise ApConfigError("period must be positive and finite")
        k = self.depth + 1
        if self.depth < 0 or any(len(x) != k for x in
                                 (self.amplitudes, self.alpha_mults,
                                  self.levels, self.tau_zeros)):
            raise ApConfigError("schedule lengths must equal depth + 1")
        if any(int(n) < 1 for n in self.alpha_mults):
            raise ApConfigError("alpha multipliers must be positive integers")
        if any(a <= 0 for a in self.amplitudes) or any(d <= 0 for d in self.levels):
            raise ApConfigError("amplitudes and levels must be positive")
        object.__setattr__(self, "alpha_mults",
                           tuple(int(n) for n in self.alpha_mults))

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(n * TWO_PI / self.period for n in self.alpha_mults)

    @property
    def sup_norm_bound(self) -> float:
        return float(sum(self.amplitudes))

    def values_on(self, ts, phase_ctx: Optional[PhaseCtx] = None,
                  period_offset: int = 0) -> np.ndarray:
        """Evaluate the sine series with exact phase reduction.

        On a commensurate grid (matching phase context) phases are integer
        residues mod 2Q; scattered points use exact rational reduction; a
        float fast path covers slow series on big grids.  period_offset
        shifts the argument by an exact multiple of the period.
        """
        ts = np.asarray(ts, dtype=float)
        out = np.zeros(ts.shape[0])
        if (phase_ctx is not None and phase_ctx.b == self.period
                and period_offset == 0):
            q = phase_ctx.q
            odd = 2 * (phase_ctx.m_start + np.arange(ts.shape[0], dtype=np.int64)) + 1
            for n, amp in zip(self.alpha_mults, self.amplitudes):
                r = n % (2 * q)
                ph = ((r * odd) % (2 * q)) * (math.pi / q)
                out += amp * np.sin(ph)
            return out
        if ts.shape[0] <= _EXACT_EVAL_MAX:
            for n, amp in zip(self.alpha_mults, self.amplitudes):
                fr = exact_phase_fracs(n, ts, self.period, period_offset)
                out += amp * np.sin(TWO_PI * fr)
            return out
        tmax = float(np.max(np.abs(ts))) if ts.size else 0.0
        if period_offset == 0 and all(
                n * (tmax / self.period + 1.0) <= _FLOAT_PHASE_MAX
                for n in self.alpha_mults):
            for n, amp in zip(self.alpha_mults, self.amplitudes):
                x = ts * (n / self.period)
                out += amp * np.sin(TWO_PI * (x - np.floor(x)))
            return out
        raise ApNumericalError(
            "series too fast for dense non-commensurate evaluation; use a "
            "period-commensurate grid")

    def sup_norm_gridmax(self, samples_per_period: int = 4096) -> float:
        """Grid max of |g| over one period (g is exactly periodic)."""
        q = choose_commensurate_q(self.period, self.period / samples_per_period,
                                  self.alpha_mults)
        ts = (np.arange(q, dtype=float) + 0.5) * (self.period / q)
        vals = self.values_on(ts, phase_ctx=PhaseCtx(self.period, q, 0))
        return float(np.max(np.abs(vals)))

    def periodicity_gap(self, ts) -> float:
        """max_t |g(t + period) - g(t)| via exact period-offset evaluation.

        The float t + period is not representable, and the series' Lipschitz
        constant makes any two-float comparison meaningless for fast stages;
        the offset evaluation checks exactly the lattice-multiple property.
        """
        ts = np.asarray(ts, dtype=float)
        base = self.values_on(ts)
        moved = self.values_on(ts, period_offset=1)
        return float(np.max(np.abs(moved - base))) if ts.size else 0.0

    def check_schedule(self, Delta: float, tol: float = 1e-15) -> None:
        """Assert the construction inequalities of the schedule exactly."""
        amps, lvls = self.amplitudes, self.levels
        if abs(amps[0] - Delta / 2.0) > tol * Delta:
            raise ApCertificateError("stage-0 amplitude must be Delta/2")
        for j in range(1, self.depth + 1):
            if not amps[j] < 2.0 ** -(j + 1) * Delta:
                raise ApCertificateError(f"amplitude bound violated at stage {j}")
            for k in range(j):
                if amps[j] > 2.0 ** -(j - k) * lvls[k] * (1.0 + tol):
                    raise ApCertificateError(
                        f"amplitude {j} exceeds the stage-{k} level budget")
        if not sum(amps) < Delta:
            raise ApCertificateError("amplitude sum must stay below Delta")
        for j in range(self.depth):
            if sum(amps[j + 1:]) > lvls[j] * (1.0 + tol):
                raise ApCertificateError(f"tail budget exceeded at stage {j}")
        for n, tau0 in zip(self.alpha_mults, self.tau_zeros):
            if n * TWO_PI / self.period < math.pi / tau0 * (1.0 - 1e-12):
                raise ApCertificateError("alpha below pi/tau0")


def build_perturbation(family: Sequence[FuncExpr], Delta: float, b: float,
                       depth: int, scheme: AveragingScheme,
                       modulus: Optional[ShiftModulus] = None,
                       tau_cap: float = 1.0, family_tag: str = "",
                       freq_vec: Optional[Sequence[int]] = None,
                       ) -> PerturbationSeries:
    """Construct the b-periodic series for a shift-equicontinuous family.

    Stage j targets accuracy 2^{-j-1}: the amplitude is Delta/2 at stage 0 and
    0.9 x its maximal allowed value afterwards; the stage frequency is the
    smallest lattice multiple of 2 pi / b at or above pi / tau0, where tau0 is
    certified by the (analytic when derivable) family shift modulus applied to
    the already-perturbed family.
    """
    if not family:
        raise ApConfigError("family must be non-empty")
    if any(f.value_dim != 1 for f in family):
        raise ApConfigError("family members must be scalar")
    if not (Delta > 0 and b > 0 and depth >= 0):
        raise ApConfigError("need Delta > 0, b > 0, depth >= 0")
    base = modulus if modulus is not None else family_modulus(family, scheme)

    omega = TWO_PI / b
    amps: list[float] = []
    mults: list[int] = []
    levels: list[float] = []
    taus: list[float] = []
    for j in range(depth + 1):
        eps_j = 2.0 ** -(j + 1)
        if j == 0:
            amp = Delta / 2.0
        else:
            cap = min(2.0 ** -(j + 1) * Delta,
                      min(2.0 ** -(j - k) * levels[k] for k in range(j)))
            amp = 0.9 * cap
        if not (math.isfinite(amp) and amp > 1e-300):
            raise ApNumericalError(
                f"amplitude underflow at stage {j}; achieved depth {j - 1}")
        params = avoidance_params(eps_j, amp)
        target = params.eps_prime * params.delta
        stage_mod = base if j == 0 else CompositeModulus(
            [base, SpectralModulus([m * omega for m in mults],
                                   np.square(amps))])
        tau0 = stage_mod.tau_for_bound(target, tau_cap=tau_cap)
        if not (math.isfinite(tau0) and tau0 > 0):
            raise ApNumericalError(
                f"stage {j} shift bound unattainable; achieved depth {j - 1}")
        n = int(math.floor((math.pi / tau0) / omega)) + 1
        amps.append(amp)
        mults.append(n)
        levels.append(params.delta / 2.0)  # robust level: budget + level
        taus.append(tau0)
    return PerturbationSeries(float(b), depth, tuple(amps), tuple(mults),
                              tuple(levels), tuple(taus), family_tag,
                              None if freq_vec is None else
                              tuple(int(x) for x in freq_vec))


# --------------------------------------------------------------------------
# Density certificates
# --------------------------------------------------------------------------

def level_density(f: FuncExpr, series: PerturbationSeries, stage: int,
                  scheme: AveragingScheme) -> AverageEstimate:
    """Measured upper density of { t : |f(t) + g(t)| < levels[stage] }.

    With the series truncated at finite depth the tail bound that drives the
    stage inequality holds for stage < depth; the last stage carries no tail
    slack and is reported for information only.
    """
    if not (0 <= stage <= series.depth):
        raise ApConfigError("stage out of range")
    from .partition import LevelSet  # local import to avoid a module cycle
    expr = DistTo(PerturbedSum(f, series), (0.0,))
    level = LevelSet(expr, series.levels[stage], "<")
    return density_upper(level, scheme, mode="direct")


verify_level_density = level_density


def avoidance_alpha(family: Sequence[FuncExpr], eps: float, Delta: float,
                    scheme: AveragingScheme, b: Optional[float] = None,
                    tau_cap: float = 1.0,
                    ) -> tuple[AvoidanceParams, float, float]:
    """Parameters, certified tau0 and a valid frequency alpha for the family.

    Without a lattice period alpha = pi / tau0 exactly; with b the smallest
    lattice multiple at or above it (ties upward).
    """
    params = avoidance_params(eps, Delta)
    mod = family_modulus(family, scheme)
    tau0 = mod.tau_for_bound(params.eps_prime * params.delta, tau_cap=tau_cap)
    alpha = math.pi / tau0
    if b is not None:
        omega = TWO_PI / b
        alpha = (int(math.floor(alpha / omega)) + 1) * omega
    return params, tau0, alpha


def avoidance_density(f: FuncExpr, alpha: float, Delta: float, delta: float,
                      scheme: AveragingScheme) -> AverageEstimate:
    """Measured kappa({ |f + Delta sin(alpha t)| < delta }).

    The scan spacing snaps so the fast phase advances by a golden-ratio
    fraction of 2 pi per sample (low-discrepancy, spacing still <= step).
    """
    from .partition import LevelSet
    sine = trig_real(FrequencyBasis((float(alpha),)),
                     [((1,), [0.0], [float(Delta)])])
    expr = DistTo(Sum(f, sine), (0.0,))
    level = LevelSet(expr, float(delta), "<")
    period = TWO_PI / alpha
    step = scheme.step
    if period < step:
        k = math.floor(step / period - _GOLDEN_FRAC)
        step = period * (max(0, k) + _GOLDEN_FRAC)
    scheme = replace_step(scheme, step)
    return density_upper(level, scheme, mode="direct")


def replace_step(scheme: AveragingScheme, step: float) -> AveragingScheme:
    return AveragingScheme(scheme.b_list, float(step), scheme.limsup_window,
                           scheme.sum_order)
