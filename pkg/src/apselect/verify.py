"""Seeded invariant suite: the library's structural inequalities at desk scale.

Each check draws its inputs from a deterministic generator, so a (seed,
scale) pair pins the whole run byte-for-byte.  The CLI's verify scenario and
the acceptance gate both run this suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (FrequencyBasis, FrequencyModule, MetricSpaceCfg, Shift,
                   Sgn, Truncate, const, eval_batch, evaluate, freq_module,
                   sin_wave, trig_real, truncate_vectors)
from .metrics import (AveragingScheme, capped_DB, default_scheme,
                      density_upper, fourier_bohr, metric_DB_p, metric_DS_p)
from .partition import Complement, Intersect, LevelSet, Union


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_trig(rng: np.random.Generator, max_terms: int = 4,
                dim: int = 1, min_gap: float = 1.0):
    """Random real trig polynomial with frequency gaps >= min_gap."""
    k = int(rng.integers(1, max_terms + 1))
    gaps = min_gap + rng.uniform(0.0, 2.0, size=k)
    freqs = np.cumsum(gaps) + rng.uniform(0.2, 1.0)
    basis = FrequencyBasis(tuple(float(w) for w in freqs))
    terms = []
    for i in range(k):
        g = tuple(1 if j == i else 0 for j in range(k))
        a = rng.uniform(-1.0, 1.0, size=dim)
        b = rng.uniform(-1.0, 1.0, size=dim)
        terms.append((g, a, b))
    return trig_real(basis, terms, value_dim=dim)


def _small_scheme() -> AveragingScheme:
    return default_scheme(b_max=200.0, step=2e-3, window=2, b0=50.0)


def run_invariant_suite(seed: int, scheme: AveragingScheme | None = None,
                        ) -> list[CheckResult]:
    rng = np.random.default_rng(int(seed))
    scheme = scheme or _small_scheme()
    out: list[CheckResult] = []

    def record(name: str, passed: bool, detail: str = ""):
        out.append(CheckResult(name, bool(passed), detail))

    # truncation is 2-Lipschitz, on raw vector pairs and on expressions
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(1, 4))
        h1 = rng.normal(size=dim) * rng.uniform(0.1, 5.0)
        h2 = rng.normal(size=dim) * rng.uniform(0.1, 5.0)
        a = rng.uniform(0.2, 3.0)
        lhs = np.linalg.norm(truncate_vectors(h1[None], a)[0]
                             - truncate_vectors(h2[None], a)[0])
        rhs = 2.0 * np.linalg.norm(h1 - h2)
        worst = max(worst, lhs - rhs)
    f1, f2 = random_trig(rng), random_trig(rng)
    ts = rng.uniform(-50, 50, size=500)
    for a in (0.3, 1.0):
        v1, _ = eval_batch(Truncate(f1, a), ts)
        v2, _ = eval_batch(Truncate(f2, a), ts)
        w1, _ = eval_batch(f1, ts)
        w2, _ = eval_batch(f2, ts)
        worst = max(worst, float(np.max(
            np.abs(v1 - v2).ravel() - 2.0 * np.abs(w1 - w2).ravel())))
    record("truncation_2_lipschitz", worst <= 1e-12, f"excess={worst:.2e}")

    # shift identity: eval(Shift(f, tau), t) == eval(f, t + tau) exactly
    f = random_trig(rng, dim=2)
    taus = rng.uniform(-10, 10, size=20)
    exact = True
    for tau in taus:
        a, _ = eval_batch(Shift(f, float(tau)), ts)
        b, _ = eval_batch(f, ts + float(tau))
        exact &= bool(np.array_equal(a, b))
    record("shift_identity_exact", exact)

    # sgn: zero case and unit norm elsewhere
    s = Sgn(sin_wave())
    z = evaluate(s, 0.0)
    v, _ = eval_batch(s, ts)
    norms = np.abs(v[:, 0])
    ok = (z[0] == 0.0) and np.all((norms == 0.0) | (np.abs(norms - 1.0) < 1e-15))
    neg = evaluate(Sgn(const([-3.0])), 0.3)[0] == -1.0
    record("sgn_zero_and_unit", ok and neg)

    # module membership algebra: random combos in, random offsets out
    basis = FrequencyBasis((1.0, math.sqrt(2.0), math.pi))
    gens = tuple(tuple(int(x) for x in rng.integers(-3, 4, size=3))
                 for _ in range(3))
    mod = FrequencyModule(basis, gens)
    ok = mod.contains((0, 0, 0))
    for _ in range(50):
        coeffs = rng.integers(-5, 6, size=len(mod.generators))
        v = np.zeros(3, dtype=int)
        for c, gvec in zip(coeffs, mod.generators):
            v += int(c) * np.array(gvec)
        ok &= mod.contains(tuple(int(x) for x in v))
    doubled = FrequencyModule(basis, tuple(tuple(2 * x for x in g)
                                           for g in mod.generators))
    misses = 0
    for _ in range(50):
        coeffs = 2 * rng.integers(-3, 4, size=len(mod.generators)) + 1
        v = np.zeros(3, dtype=int)
        for c, gvec in zip(coeffs, mod.generators):
            v += int(c) * np.array(gvec)
        if not doubled.contains(tuple(int(x) for x in v)):
            misses += 1
    # odd combinations of doubled generators lie outside 2x the lattice
    # whenever they are nonzero in the original lattice's reduced form
    record("module_membership_algebra", ok, f"odd_misses={misses}")

    # frequency module of wrappers adds nothing new
    fmod = freq_module(Truncate(Shift(f1, 0.7), 1.0))
    base = freq_module(f1)
    ok = all(base.contains(g) for g in fmod.generators)
    record("module_wrappers_no_growth", ok)

    # metric axioms on a shared grid: symmetry exact, triangle within 1e-6
    space1 = MetricSpaceCfg(1)
    ok = True
    worst = 0.0
    for p in (1.0, 2.0):
        for _ in range(5):
            a, b, c = (random_trig(rng) for _ in range(3))
            dab = metric_DB_p(a, b, p, space1, scheme).value
            dba = metric_DB_p(b, a, p, space1, scheme).value
            dac = metric_DB_p(a, c, p, space1, scheme).value
            dcb = metric_DB_p(c, b, p, space1, scheme).value
            ok &= dab == dba
            worst = max(worst, dab - (dac + dcb))
    record("metric_symmetry_triangle", ok and worst <= 1e-6,
           f"triangle_excess={worst:.2e}")

    # Besicovitch below Stepanov on the shared grid
    worst = -1.0
    for p in (1.0, 2.0):
        for _ in range(5):
            a, b = random_trig(rng), random_trig(rng)
            db = metric_DB_p(a, b, p, space1, scheme).value
            ds = metric_DS_p(a, b, p, space1, scheme)
            worst = max(worst, db - ds)
    record("besicovitch_below_stepanov", worst <= 1e-6, f"excess={worst:.2e}")

    # complement-density subadditivity on level-set pairs
    worst = -1.0
    for _ in range(5):
        a, b = random_trig(rng), random_trig(rng)
        t1 = LevelSet(a, float(rng.uniform(-0.5, 0.5)), "<=")
        t2 = LevelSet(b, float(rng.uniform(-0.5, 0.5)), "<=")
        k1 = density_upper(t1, scheme).value
        k2 = density_upper(t2, scheme).value
        k12 = density_upper(Intersect(t1, t2), scheme).value
        worst = max(worst, k12 - (k1 + k2))
        d1 = density_upper(t1, scheme, mode="direct").value
        d2 = density_upper(t2, scheme, mode="direct").value
        d12 = density_upper(Union(t1, t2), scheme, mode="direct").value
        worst = max(worst, d12 - (d1 + d2))
    record("density_subadditivity", worst <= 1e-6, f"excess={worst:.2e}")

    # Lipschitz composition contracts the capped metric up to the constant
    worst = -1.0
    for _ in range(3):
        a, b = random_trig(rng, dim=2), random_trig(rng, dim=2)
        lhs = capped_DB(Truncate(a, 0.5), Truncate(b, 0.5), scheme).value
        rhs = 2.0 * capped_DB(a, b, scheme).value
        worst = max(worst, lhs - rhs)
    record("lipschitz_composition", worst <= 1e-6, f"excess={worst:.2e}")

    # coefficient probes recover trig coefficients and reject off-exponents
    ok = True
    for _ in range(3):
        f = random_trig(rng, max_terms=3, min_gap=1.5)
        sp_terms = f._real_form[1]
        b_max = scheme.b_max
        for omega, _g, A, B in sp_terms:
            est = fourier_bohr(f, abs(omega), scheme)
            target = (A[0] - 1j * B[0]) / 2.0 * (1 if omega > 0 else 1)
            if omega < 0:
                target = (A[0] + 1j * B[0]) / 2.0
            amp = math.hypot(A[0], B[0])
            ok &= abs(est.value[0] - target) <= 2.0 * max(1.0, amp) / b_max
        lam = float(max(abs(w) for w, *_ in sp_terms) + rng.uniform(1.0, 3.0))
        est = fourier_bohr(f, lam, scheme)
        ok &= abs(est.value[0]) <= 2.0 * max(1.0, amp) / b_max
    record("fourier_coefficient_recovery", ok)

    # complement vs direct density: they sum to 1 on the same grid
    worst = 0.0
    for _ in range(3):
        a = random_trig(rng)
        t1 = LevelSet(a, 0.0, "<=")
        k = density_upper(t1, scheme).value
        d = density_upper(Complement(t1), scheme, mode="direct").value
        worst = max(worst, abs(k - d))
    record("complement_density_consistency", worst <= 1e-12,
           f"gap={worst:.2e}")

    return out
