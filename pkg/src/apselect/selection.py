"""Almost periodic selections of finitely represented set-valued maps.

A selection is assembled from nested partitions of the line: at depth n the
stacked function (all trajectories, the target g) is partitioned at accuracy
gamma_n * eps under the blockwise max metric, a representative time is picked
per cell, and points are chosen from the sampled trajectory sets so that
consecutive choices contract.  The result is a step function over the
intersected cells together with measured membership/nearness certificates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (ApCertificateError, ApConfigError, FuncExpr,
                   MetricSpaceCfg, MultiMap, PhaseCtx, Stack, StepCompose,
                   const, eval_batch, freq_module)
from .metrics import (AverageEstimate, AveragingScheme,
                      choose_commensurate_q, uniform_horizon)
from .partition import (BlockMaxDistance, Intersect, PartitionFamily,
                        SetExpr, build_partition)

_CHUNK = 1 << 19


# --------------------------------------------------------------------------
# Refinement accuracy schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaSchedule:
    """Per-depth partition accuracies gamma_1..gamma_{n_max+1}.

    The full series sum_{n>=1} (gamma_n + gamma_{n+1}) must stay below 1/6;
    the generating formula gamma_n = 2^{-n}/10 gives exactly 0.15.
    """

    n_max: int
    gammas: tuple[float, ...]

    def __post_init__(self):
        if self.n_max < 1 or len(self.gammas) != self.n_max + 1:
            raise ApConfigError("need gammas gamma_1..gamma_{n_max+1}")
        g = self.gammas
        if any(b >= a for a, b in zip(g, g[1:])):
            raise ApConfigError("gammas must be strictly decreasing")
        if sum(a + b for a, b in zip(g, g[1:])) >= 1.0 / 6.0:
            raise ApConfigError("partial gamma sum must stay below 1/6")

    def step_bound(self, n: int, eps: float) -> float:
        """Contraction bound for the depth-(n-1) -> depth-n point step."""
        return 2.0 * (self.gammas[n - 2] + self.gammas[n - 1]) * eps


def gamma_schedule(n_max: int) -> GammaSchedule:
    if n_max < 1:
        raise ApConfigError("n_max must be >= 1")
    return GammaSchedule(n_max, tuple(2.0 ** -n / 10.0
                                      for n in range(1, n_max + 2)))


def gamma_tail_bound(n_max: int, eps: float) -> float:
    """2 * sum_{n > n_max} (gamma_n + gamma_{n+1}) * eps for the 2^{-n}/10
    schedule: the uniform distance between the depth-n_max selection and the
    ideal limit selection."""
    return 0.3 * 2.0 ** -n_max * eps


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainRecord:
    depth: int
    n_sets: int
    n_cells: int
    max_step: float
    step_bound: float


@dataclass(frozen=True)
class SelectionCertificate:
    tail_bound: float
    membership_threshold: float
    membership_exceedance: AverageEstimate
    nearness_exceedance: AverageEstimate


@dataclass(frozen=True)
class SelectionResult:
    selection: FuncExpr
    depth: int
    eps: float
    chain_log: tuple[ChainRecord, ...]
    certificate: SelectionCertificate
    cells: tuple[tuple[tuple[int, ...], tuple[float, ...]], ...]
    partitions: tuple[PartitionFamily, ...]
    module_report: object = None


# --------------------------------------------------------------------------
# Measurement grid (one grid, per-horizon central slices)
# --------------------------------------------------------------------------

class _MeasureGrid:
    """Largest-horizon sample grid whose smaller horizons are central slices.

    Period-commensurate when a series is supplied (so fast sine phases reduce
    exactly); uniform at the scheme step otherwise.
    """

    def __init__(self, scheme: AveragingScheme, series=None):
        self.scheme = scheme
        if series is not None:
            q = choose_commensurate_q(series.period, scheme.step,
                                      series.alpha_mults)
            ms = [max(1, int(math.ceil(b / series.period)))
                  for b in scheme.b_list]
            self.period, self.q = series.period, q
            self.h = series.period / q
            self.half = ms[-1] * q
            self.slices = tuple((m * series.period, m * q) for m in ms)
        else:
            hz = uniform_horizon(scheme.b_max, scheme.step)
            self.period, self.q = None, None
            self.h = hz.h
            self.half = hz.n // 2
            self.slices = tuple(
                (b, min(self.half, int(math.floor(b / hz.h))))
                for b in scheme.b_list)
        self.n = 2 * self.half

    def t_at(self, i: int) -> float:
        return (i - self.half + 0.5) * self.h

    def chunks(self):
        for lo in range(0, self.n, _CHUNK):
            hi = min(lo + _CHUNK, self.n)
            ts = (np.arange(lo - self.half, hi - self.half, dtype=float)
                  + 0.5) * self.h
            ctx = (PhaseCtx(self.period, self.q, lo - self.half)
                   if self.period is not None else None)
            yield lo, ts, ctx

    def slice_estimate(self, flags: np.ndarray, window: int,
                       kind: str) -> AverageEstimate:
        per = []
        for b, half in self.slices:
            lo, hi = self.half - half, self.half + half
            per.append((b, float(np.count_nonzero(flags[lo:hi]) / (2 * half))))
        win = [v for _b, v in per[-window:]]
        return AverageEstimate(max(win), tuple(per), max(win) - min(win), kind)


# --------------------------------------------------------------------------
# Selection construction
# --------------------------------------------------------------------------

def build_selection(F: MultiMap, g: FuncExpr, eps: float, n_max: int,
                    space: MetricSpaceCfg, scheme: AveragingScheme,
                    depth: int = 0, level_resid: float = 0.005,
                    ) -> SelectionResult:
    """Construct a depth-n_max selection of F near g with accuracy eps.

    Chosen points always lie in the sampled trajectory sets; each refinement
    step is checked against its contraction bound and a violation raises with
    the offending cell.  Exceedance densities are measured on the scheme's
    horizon schedule.
    """
    if not (0 < eps <= 1):
        raise ApConfigError("eps must lie in (0, 1]")
    if g.value_dim != F.dim:
        raise ApConfigError("g must share the trajectory value dimension")
    ntraj, d = len(F.trajectories), F.dim
    gam = gamma_schedule(n_max)
    joined = Stack(tuple(F.trajectories) + (g,))
    blocks = BlockMaxDistance((d,) * ntraj + (d,))
    jspace = MetricSpaceCfg(joined.value_dim)

    partitions = []
    for n in range(1, n_max + 1):
        acc = gam.gammas[n - 1] * eps
        # the cover must be finer than the cell budget margin (accuracy/6)
        # or off-grid points fall outside every raw cell
        partitions.append(build_partition(
            joined, acc, jspace, scheme, depth=depth,
            resid_target=level_resid, distance=blocks,
            cover_step=min(scheme.step, acc / 6.0)))
    series = next((p.series for p in partitions if p.series is not None), None)
    grid = _MeasureGrid(scheme, series)

    # pass A: per-level cell assignments over the shared grid (the stacked
    # source expression is shared, so one cache serves all levels per chunk)
    assigns = [np.empty(grid.n, dtype=np.int64) for _ in partitions]
    for lo, ts, ctx in grid.chunks():
        cache: dict = {}
        for part, arr in zip(partitions, assigns):
            idx, _dist = part.assign_batch(ts, ctx, cache)
            arr[lo:lo + ts.shape[0]] = idx

    # representatives (smallest sampled t) and sampled sets per level cell
    level_sets_pts: list[dict[int, np.ndarray]] = []
    level_g_pts: list[dict[int, np.ndarray]] = []
    for arr in assigns:
        vals, first = np.unique(arr, return_index=True)
        reps = {int(j): grid.t_at(int(i)) for j, i in zip(vals, first) if j >= 0}
        fsets = {}
        gpts = {}
        for j, tstar in reps.items():
            cache: dict = {}
            fsets[j] = np.stack([eval_batch(tr, [tstar], cache=cache)[0][0]
                                 for tr in F.trajectories])
            gpts[j] = eval_batch(g, [tstar], cache=cache)[0][0]
        level_sets_pts.append(fsets)
        level_g_pts.append(gpts)

    # realized prefixes per depth, in index order
    stacked = np.stack(assigns, axis=1)
    prefixes: list[list[tuple[int, ...]]] = []
    for n in range(1, n_max + 1):
        sub = stacked[:, :n]
        ok = np.all(sub >= 0, axis=1)
        uniq = np.unique(sub[ok], axis=0) if np.any(ok) else np.empty((0, n), int)
        prefixes.append([tuple(int(x) for x in row) for row in uniq])
    if not prefixes[-1]:
        raise ApCertificateError("no fully refined cell was sampled")

    # point chain: nearest-point choices with contraction checks; at depth 1
    # the choice minimizes the distance to g's cell value (so the eps/6 slack
    # holds with slack 0), afterwards it minimizes the step from the parent
    points: dict[tuple[int, ...], np.ndarray] = {}
    chain: list[ChainRecord] = []
    for n in range(1, n_max + 1):
        max_step = 0.0
        bound = (eps / 6.0) if n == 1 else gam.step_bound(n, eps)
        for pref in prefixes[n - 1]:
            cand = level_sets_pts[n - 1][pref[-1]]
            anchor = level_g_pts[0][pref[0]] if n == 1 else points[pref[:-1]]
            dists = np.sqrt(np.sum((cand - anchor[None, :]) ** 2, axis=1))
            k = int(np.argmin(dists))  # ties resolve to the lowest index
            points[pref] = cand[k]
            if n > 1:
                step = float(dists[k])
                if not step < bound:
                    raise ApCertificateError(
                        f"refinement step {step:.3e} at cell {pref} reaches "
                        f"its contraction bound {bound:.3e}")
                max_step = max(max_step, step)
        chain.append(ChainRecord(n, len(level_sets_pts[n - 1]),
                                 len(prefixes[n - 1]), max_step, bound))

    # intersected cells (shared prefix nodes) and the step expression
    cell_nodes: dict[tuple[int, ...], SetExpr] = {}
    for n in range(1, n_max + 1):
        for pref in prefixes[n - 1]:
            base = partitions[n - 1].sets[pref[-1]]
            cell_nodes[pref] = base if n == 1 else \
                Intersect(cell_nodes[pref[:-1]], base)
    final = prefixes[-1]
    cells = tuple(cell_nodes[p] for p in final)
    branches = tuple(const(points[p]) for p in final)
    selection = StepCompose(cells, branches)

    # certificates: one measurement pass over the shared grid
    tail = gamma_tail_bound(n_max, eps)
    member_thr = gam.gammas[0] * eps + tail
    sizes = [len(p.sets) for p in partitions]
    enc_keys = np.array([_encode(p, sizes) for p in final], dtype=np.int64)
    order = np.argsort(enc_keys, kind="stable")
    enc_sorted = enc_keys[order]
    pts_matrix = np.stack([points[p] for p in final])[order]

    all_keys = _encode_rows(stacked, sizes)
    decided = np.all(stacked >= 0, axis=1)
    pos = np.searchsorted(enc_sorted, all_keys)
    pos = np.clip(pos, 0, len(enc_sorted) - 1)
    decided &= enc_sorted[pos] == all_keys
    rows = np.where(decided, pos, 0)

    member_flags = np.empty(grid.n, dtype=bool)
    near_flags = np.empty(grid.n, dtype=bool)
    for lo, ts, ctx in grid.chunks():
        hi = lo + ts.shape[0]
        cache: dict = {}
        tvals = F.values_batch(ts, ctx, cache)          # (K, chunk, d)
        gvals, _ = eval_batch(g, ts, ctx, cache)        # (chunk, d)
        sel = pts_matrix[rows[lo:hi]]                   # (chunk, d)
        d_sel_F = np.min(np.sqrt(np.sum((tvals - sel[None]) ** 2, axis=2)),
                         axis=0)
        d_g_F = np.min(np.sqrt(np.sum((tvals - gvals[None]) ** 2, axis=2)),
                       axis=0)
        d_sel_g = np.sqrt(np.sum((sel - gvals) ** 2, axis=1))
        bad = ~decided[lo:hi]
        member_flags[lo:hi] = (d_sel_F >= member_thr) | bad
        near_flags[lo:hi] = (d_sel_g >= d_g_F + eps) | bad

    w = scheme.limsup_window
    cert = SelectionCertificate(
        tail_bound=tail,
        membership_threshold=member_thr,
        membership_exceedance=grid.slice_estimate(member_flags, w,
                                                  "membership_exceedance"),
        nearness_exceedance=grid.slice_estimate(near_flags, w,
                                                "nearness_exceedance"))

    module = freq_module(selection)
    return SelectionResult(selection, n_max, eps, tuple(chain), cert,
                           tuple((p, tuple(float(x) for x in points[p]))
                                 for p in final),
                           tuple(partitions), module)


def _encode(pref: Sequence[int], sizes: Sequence[int]) -> int:
    key = 0
    for c, s in zip(pref, sizes):
        key = key * (s + 1) + (c + 1)
    return key


def _encode_rows(rows: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    if math.prod(s + 1 for s in sizes) >= (1 << 62):
        raise ApConfigError("selection depth/size too large to index")
    key = np.zeros(rows.shape[0], dtype=np.int64)
    for c in range(rows.shape[1]):
        key = key * (sizes[c] + 1) + (rows[:, c] + 1)
    return key


# --------------------------------------------------------------------------
# Dense families of selections
# --------------------------------------------------------------------------

def dense_selections(F: MultiMap, eps: float, n_max: int,
                     space: MetricSpaceCfg, scheme: AveragingScheme,
                     anchor_delta: float = 1.0, depth: int = 0,
                     level_resid: float = 0.005) -> list[SelectionResult]:
    """Selections anchored at a greedy cover of the trajectory value bundle.

    For each anchor x and each accuracy level n = 1..ceil(-log2 eps), builds
    the selection targeting the constant x at accuracy 2^-n; at samples every
    trajectory value is then approached by some returned selection.
    """
    if not (0 < eps < 1):
        raise ApConfigError("eps must lie in (0, 1)")
    from .partition import EuclideanDistance, _min_dist_to
    hz = uniform_horizon(scheme.b_max, scheme.step)
    centers: list[np.ndarray] = []
    for ts, ctx in hz.chunks():
        vals = F.values_batch(ts, ctx)                  # (K, chunk, d)
        cloud = vals.transpose(1, 0, 2).reshape(-1, F.dim)
        dmin = _min_dist_to(cloud, centers, EuclideanDistance())
        while True:
            cand = np.nonzero(dmin >= anchor_delta)[0]
            if cand.size == 0:
                break
            i = int(cand[0])
            centers.append(cloud[i].copy())
            np.minimum(dmin[i:],
                       np.sqrt(np.sum((cloud[i:] - cloud[i]) ** 2, axis=1)),
                       out=dmin[i:])
    budget = max(1, int(math.ceil(-math.log2(eps))))
    out = []
    for x in centers:
        for n in range(1, budget + 1):
            out.append(build_selection(F, const(x), 2.0 ** -n, n_max, space,
                                       scheme, depth=depth,
                                       level_resid=level_resid))
    return out
