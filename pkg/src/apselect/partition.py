"""Measurable-set expressions and almost periodic partition constructions.

Sets are expression trees over level sets of scalar expressions with a total
Boolean algebra; partitions are built by covering the function's value set
with centers, perturbing each distance level set with a fast periodic sine
(so the level boundary carries no mass), and disjointifying along the center
order with set differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import (ApCertificateError, ApConfigError, ApNumericalError,
                   DistTo, FrequencyModule, FuncExpr, MetricSpaceCfg,
                   PerturbedSum, PhaseCtx, Sum, TWO_PI, const, eval_batch,
                   freq_module)
from .metrics import (AverageEstimate, AveragingScheme, besicovitch_mean_vec,
                      capped_DB, density_upper, horizons_for)
from .perturb import PerturbationSeries, build_perturbation

_CONST_TOL = 1e-9  # capped mean distance below which f is treated as constant


# --------------------------------------------------------------------------
# Distance descriptors
# --------------------------------------------------------------------------

_CENTER_BATCH = 128
_SAMPLE_BATCH = 32768


@dataclass(frozen=True)
class EuclideanDistance:
    def point_dists(self, vals: np.ndarray, center: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum((vals - center[None, :]) ** 2, axis=-1))

    def pairwise(self, vals: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """(n_samples, n_centers) distance matrix; callers batch centers."""
        return np.sqrt(np.sum((vals[:, None, :] - centers[None, :, :]) ** 2,
                              axis=-1))

    def block_dims(self, dim: int):
        return None


@dataclass(frozen=True)
class BlockMaxDistance:
    """Max over consecutive blocks of the blockwise Euclidean distance."""

    blocks: tuple[int, ...]

    def point_dists(self, vals: np.ndarray, center: np.ndarray) -> np.ndarray:
        return self.pairwise(vals, center[None, :])[:, 0]

    def pairwise(self, vals: np.ndarray, centers: np.ndarray) -> np.ndarray:
        out = np.zeros((vals.shape[0], centers.shape[0]))
        off = 0
        for w in self.blocks:
            if w == 1:
                d = np.abs(vals[:, off:off + 1] - centers[None, :, off])
            else:
                d = np.sqrt(np.sum(
                    (vals[:, None, off:off + w] - centers[None, :, off:off + w])
                    ** 2, axis=-1))
            np.maximum(out, d, out=out)
            off += w
        return out

    def block_dims(self, dim: int):
        return self.blocks


def _tree_p(dist) -> Optional[float]:
    """Minkowski order realizing the descriptor, if any (2 for Euclidean,
    inf for an all-width-1 block max); None means brute-force batches."""
    if isinstance(dist, EuclideanDistance):
        return 2.0
    if isinstance(dist, BlockMaxDistance) and all(w == 1 for w in dist.blocks):
        return np.inf
    return None


def _min_dist_to(vals: np.ndarray, centers, dist) -> np.ndarray:
    """Min distance of each sample to a center list."""
    out = np.full(vals.shape[0], np.inf)
    if len(centers) == 0:
        return out
    arr = np.asarray(centers)
    p = _tree_p(dist)
    if p is not None and arr.shape[0] >= 32:
        from scipy.spatial import cKDTree
        d, _ = cKDTree(arr).query(vals, k=1, p=p)
        return np.asarray(d, dtype=float)
    for lo in range(0, arr.shape[0], _CENTER_BATCH):
        D = dist.pairwise(vals, arr[lo:lo + _CENTER_BATCH])
        np.minimum(out, D.min(axis=1), out=out)
    return out


# --------------------------------------------------------------------------
# Set expressions
# --------------------------------------------------------------------------

class SetExpr:
    """A measurable subset of the line with total pointwise membership."""

    def members(self) -> tuple:
        return ()

    def inner_func_exprs(self) -> Iterator[FuncExpr]:
        # iterative with dedup: difference chains share long prefixes and can
        # be thousands of nodes deep
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if isinstance(node, LevelSet):
                yield node.expr
            else:
                stack.extend(node.members())

    def contains(self, t: float) -> bool:
        return bool(self.contains_batch(np.asarray([float(t)]))[0])

    def contains_batch(self, ts, phase_ctx: Optional[PhaseCtx] = None,
                       cache: Optional[dict] = None) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        if cache is None:
            cache = {}
        # iterative post-order evaluation: difference chains can be thousands
        # of nodes deep, beyond the recursion limit
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            key = (id(node), phase_ctx)
            if key in cache:
                continue
            if expanded:
                cache[key] = node._mask(ts, phase_ctx, cache)
            else:
                stack.append((node, True))
                for m in node.members():
                    stack.append((m, False))
        return cache[(id(self), phase_ctx)]

    def _mask(self, ts, ctx, cache) -> np.ndarray:
        raise NotImplementedError


def membership(T: SetExpr, t: float) -> bool:
    """Pointwise membership of t in the set expression."""
    return T.contains(t)


@dataclass(frozen=True)
class FullLine(SetExpr):
    def _mask(self, ts, ctx, cache):
        return np.ones(ts.shape[0], dtype=bool)


@dataclass(frozen=True)
class Empty(SetExpr):
    def _mask(self, ts, ctx, cache):
        return np.zeros(ts.shape[0], dtype=bool)


@dataclass(frozen=True)
class LevelSet(SetExpr):
    """{ t : expr(t) <= threshold } or with strict inequality."""

    expr: FuncExpr
    threshold: float
    relation: str = "<="

    def __post_init__(self):
        if self.expr.value_dim != 1:
            raise ApConfigError("level sets need a scalar expression")
        if self.relation not in ("<=", "<"):
            raise ApConfigError("relation must be '<=' or '<'")

    def _mask(self, ts, ctx, cache):
        vals, _ = eval_batch(self.expr, ts, ctx, cache)
        v = vals[:, 0]
        return v <= self.threshold if self.relation == "<=" else v < self.threshold


@dataclass(frozen=True)
class UnionN(SetExpr):
    parts: tuple[SetExpr, ...]

    def __post_init__(self):
        if not self.parts:
            raise ApConfigError("union needs at least one member")

    def members(self):
        return self.parts

    def _mask(self, ts, ctx, cache):
        out = np.zeros(ts.shape[0], dtype=bool)
        for p in self.parts:
            out |= cache[(id(p), ctx)]
        return out


def Union(left: SetExpr, right: SetExpr) -> UnionN:
    return UnionN((left, right))


@dataclass(frozen=True)
class Intersect(SetExpr):
    left: SetExpr
    right: SetExpr

    def members(self):
        return (self.left, self.right)

    def _mask(self, ts, ctx, cache):
        return cache[(id(self.left), ctx)] & cache[(id(self.right), ctx)]


@dataclass(frozen=True)
class Diff(SetExpr):
    left: SetExpr
    right: SetExpr

    def members(self):
        return (self.left, self.right)

    def _mask(self, ts, ctx, cache):
        return cache[(id(self.left), ctx)] & ~cache[(id(self.right), ctx)]


@dataclass(frozen=True)
class Complement(SetExpr):
    inner: SetExpr

    def members(self):
        return (self.inner,)

    def _mask(self, ts, ctx, cache):
        return ~cache[(id(self.inner), ctx)]


def set_freq_module(T: SetExpr) -> FrequencyModule:
    """Superset of the set's frequency module from its defining expressions."""
    mods = [freq_module(e) for e in T.inner_func_exprs()]
    if not mods:
        from .core import FrequencyBasis
        return FrequencyModule(FrequencyBasis((1.0,)), ())
    out = mods[0]
    for m in mods[1:]:
        out = out.join(m)
    return out


# --------------------------------------------------------------------------
# Greedy covering of the value set
# --------------------------------------------------------------------------

def cover_points(f: FuncExpr, delta: float, eps_resid: float,
                 scheme: AveragingScheme,
                 distance=None, max_centers: int = 20000,
                 step: Optional[float] = None) -> np.ndarray:
    """Greedy covering centers for the sampled values of f.

    Scans the largest-horizon grid in time order and adds a sample value as a
    new center whenever it lies >= delta from all current centers, so every
    scanned sample ends within delta of some center (sampled residual density
    0 <= eps_resid).  Raises when the center budget is exhausted while the
    uncovered fraction still exceeds eps_resid.  ``step`` refines the scan
    spacing below the scheme step (needed when delta is small relative to the
    function's slope times the scheme step).
    """
    if delta <= 0 or eps_resid <= 0:
        raise ApConfigError("delta and eps_resid must be positive")
    dist = distance or EuclideanDistance()
    from .core import iter_series
    from .metrics import uniform_horizon
    series = next(iter(iter_series(f)), None)
    if step is not None and step < scheme.step:
        hz = uniform_horizon(scheme.b_max, step)
    else:
        hz = horizons_for(scheme, series)[-1]
    centers: list[np.ndarray] = []
    uncovered = 0
    exhausted = False
    for ts, ctx in hz.chunks():
        vals, _ = eval_batch(f, ts, ctx, cache={})
        d = _min_dist_to(vals, centers, dist)
        while True:
            cand = np.nonzero(d >= delta)[0]
            if cand.size == 0:
                break
            if len(centers) >= max_centers:
                exhausted = True
                uncovered += int(cand.size)
                break
            i = int(cand[0])
            c = vals[i].copy()
            centers.append(c)
            np.minimum(d[i:], dist.point_dists(vals[i:], c), out=d[i:])
    if exhausted and uncovered / hz.n >= eps_resid:
        raise ApNumericalError(
            f"center budget {max_centers} exhausted with uncovered fraction "
            f"{uncovered / hz.n:.4f} >= eps_resid {eps_resid}")
    if not centers:
        raise ApNumericalError("empty sample grid: no centers found")
    return np.asarray(centers)


def cover_point_cloud(points: np.ndarray, delta: float,
                      max_centers: int = 20000) -> np.ndarray:
    """Greedy delta-cover of an explicit point cloud, in scan order."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dist = EuclideanDistance()
    centers: list[np.ndarray] = []
    d = np.full(pts.shape[0], np.inf)
    while len(centers) < max_centers:
        cand = np.nonzero(d >= delta)[0]
        if cand.size == 0:
            break
        i = int(cand[0])
        centers.append(pts[i].copy())
        np.minimum(d, dist.point_dists(pts, pts[i]), out=d)
    return np.asarray(centers)


# --------------------------------------------------------------------------
# Partition families
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionFamily:
    """Disjoint level-set cells T_j with centers within eps on each cell.

    sets[j] is the j-th difference-chain cell; points[j] its value-space
    center.  residual_density estimates the upper density of the line outside
    the union; module_report is a frequency-module superset; perturbations
    lists the per-center sine series (shared when their schedules coincide).
    """

    sets: tuple[SetExpr, ...]
    points: tuple[tuple[float, ...], ...]
    eps: float
    residual_density: AverageEstimate
    module_report: FrequencyModule
    perturbations: tuple[PerturbationSeries, ...]
    source: FuncExpr = field(repr=False, compare=False, default=None)
    distance: object = field(repr=False, compare=False, default=None)
    series: Optional[PerturbationSeries] = field(repr=False, compare=False,
                                                 default=None)
    threshold: float = field(repr=False, compare=False, default=math.nan)

    @property
    def size(self) -> int:
        return len(self.sets)

    def assign_batch(self, ts, phase_ctx: Optional[PhaseCtx] = None,
                     cache: Optional[dict] = None,
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized cell assignment: (index array with -1 = unassigned,
        distance of each sample to its assigned center).

        Equivalent to membership in the difference-chain sets, evaluated
        center-by-center without building the Boolean masks.
        """
        ts = np.asarray(ts, dtype=float)
        if cache is None:
            cache = {}
        n = ts.shape[0]
        idx = np.full(n, -1, dtype=np.int64)
        dist_out = np.full(n, np.inf)
        vals, _ = eval_batch(self.source, ts, phase_ctx, cache)
        if self.series is None:  # trivial constant branch: one full-line cell
            idx[:] = 0
            dist_out[:] = self.distance.point_dists(
                vals, np.asarray(self.points[0]))
            return idx, dist_out
        g = self.series.values_on(ts, phase_ctx=phase_ctx)
        budget = self.threshold - g
        pts = np.asarray(self.points)
        # sub-chunk the samples to keep pairwise temporaries allocator-sized
        for s0 in range(0, n, _SAMPLE_BATCH):
            s1 = min(s0 + _SAMPLE_BATCH, n)
            open_idx = np.arange(s0, s1)
            for lo in range(0, pts.shape[0], _CENTER_BATCH):
                batch = pts[lo:lo + _CENTER_BATCH]
                D = self.distance.pairwise(vals[open_idx], batch)
                ok = D <= budget[open_idx][:, None]
                hit = ok.any(axis=1)
                first = np.argmax(ok, axis=1)  # first match in center order
                taken = open_idx[hit]
                idx[taken] = lo + first[hit]
                dist_out[taken] = D[hit, first[hit]]
                open_idx = open_idx[~hit]
                if open_idx.size == 0:
                    break
        return idx, dist_out


def _residual_density(f: FuncExpr, centers: np.ndarray, dist,
                      series: PerturbationSeries, thr: float,
                      scheme: AveragingScheme) -> AverageEstimate:
    """Complement density of the union of raw cells, without materializing
    per-center mask arrays (equivalent to density_upper on the chained union,
    cross-checked in the tests)."""
    from .metrics import averaged_over

    def fn(ts, ctx):
        vals, _ = eval_batch(f, ts, ctx, cache={})
        budget = thr - series.values_on(ts, phase_ctx=ctx)
        # the budget is center-independent, so coverage reduces to a min-dist
        covered = _min_dist_to(vals, centers, dist) <= budget
        return 1.0 - covered.astype(float)

    return averaged_over(fn, scheme, series, kind="density_complement")


def _pick_period(f: FuncExpr) -> tuple[float, Optional[tuple[int, ...]]]:
    """Period b with 2 pi / b in the frequency module: b = 2 pi / beta for the
    first generator beta; falls back to 2 pi when no usable generator exists."""
    mod = freq_module(f)
    for g in mod.generators:
        beta = mod.basis.value(g)
        if beta < 0:
            g = tuple(-x for x in g)
            beta = -beta
        if beta > 0:
            return TWO_PI / beta, g
    return TWO_PI, None


def build_partition(f: FuncExpr, eps: float, space: MetricSpaceCfg,
                    scheme: AveragingScheme, depth: int = 0,
                    resid_target: float = 0.05, distance=None,
                    max_centers: int = 20000,
                    cover_step: Optional[float] = None) -> PartitionFamily:
    """Partition the line into cells on which f stays within eps of a center.

    Centers come from a greedy eps/3-cover of the sampled values; each raw
    cell is { rho(f(t), x_j) + g(t) <= 2 eps/3 } with ||g||_inf < eps/3 a fast
    periodic sine series (period chosen so its base frequency lies in f's
    module), and cells are disjointified along the center order.  An almost
    constant f (capped mean distance to its best constant below 1e-9) yields
    the single full-line cell.
    """
    if not (0 < eps <= 1):
        raise ApConfigError("eps must lie in (0, 1]")
    dist = distance or EuclideanDistance()

    mean_vec = besicovitch_mean_vec(f, scheme)
    cexpr = const(mean_vec)
    if capped_DB(f, cexpr, scheme).value < _CONST_TOL:
        resid = AverageEstimate(0.0, tuple((b, 0.0) for b in scheme.b_list),
                                0.0, "density_complement")
        return PartitionFamily(
            sets=(FullLine(),), points=(tuple(float(x) for x in mean_vec),),
            eps=eps, residual_density=resid, module_report=freq_module(f),
            perturbations=(), source=f, distance=dist, series=None)

    b, freq_vec = _pick_period(f)
    centers = cover_points(f, eps / 3.0, resid_target, scheme,
                           distance=dist, max_centers=max_centers,
                           step=cover_step)
    thr = 2.0 * eps / 3.0
    probe = Sum(DistTo(f, tuple(centers[0]), dist.block_dims(f.value_dim)),
                const([-thr]))
    series = build_perturbation([probe], Delta=eps / 3.0, b=b, depth=depth,
                                scheme=scheme, family_tag="partition",
                                freq_vec=freq_vec)

    raw_sets = []
    for c in centers:
        h = PerturbedSum(
            Sum(DistTo(f, tuple(c), dist.block_dims(f.value_dim)),
                const([-thr])), series)
        raw_sets.append(LevelSet(h, 0.0, "<="))
    cells: list[SetExpr] = [raw_sets[0]]
    prefix: SetExpr = raw_sets[0]
    for tj in raw_sets[1:]:
        cells.append(Diff(tj, prefix))
        prefix = Union(prefix, tj)
    resid = _residual_density(f, centers, dist, series, thr, scheme)
    module = freq_module(f)
    if freq_vec is not None:
        module = module.with_generators([freq_vec])
    return PartitionFamily(
        sets=tuple(cells),
        points=tuple(tuple(float(x) for x in c) for c in centers),
        eps=eps, residual_density=resid, module_report=module,
        perturbations=(series,) * len(cells), source=f, distance=dist,
        series=series, threshold=thr)


def level_split(f: FuncExpr, a: float, eps: float, space: MetricSpaceCfg,
                scheme: AveragingScheme, depth: int = 0) -> SetExpr:
    """A set T with f < a + eps on T and f > a off T (up to sampling).

    Built as { f - a - eps/2 + g <= 0 } for a fast periodic sine g with
    ||g||_inf < eps/3, intersected with the sanity bound { f < a + eps }.
    """
    if not (0 < eps <= 1):
        raise ApConfigError("eps must lie in (0, 1]")
    if f.value_dim != 1:
        raise ApConfigError("level_split needs a scalar function")
    b, freq_vec = _pick_period(f)
    probe = Sum(f, const([-(a + eps / 2.0)]))
    series = build_perturbation([probe], Delta=eps / 3.0, b=b, depth=depth,
                                scheme=scheme, family_tag="level_split",
                                freq_vec=freq_vec)
    raw = LevelSet(PerturbedSum(probe, series), 0.0, "<=")
    return Intersect(raw, LevelSet(f, a + eps, "<"))
