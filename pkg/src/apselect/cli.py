"""Command line entry point: scenario orchestration and report emission.

Usage: apselect <scenario> --config <path> [--out <dir>] [--seed <n>]

Scenarios: metrics, almost_periods, perturb, partition, select, verify.
Each run writes a JSON report plus CSV traces into the output directory and
exits 0 only when every scenario-declared certificate passes (1: certificate
failure, 2: schema violation, 3: numerical-stage failure).  Outputs are
byte-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import core, metrics, partition, perturb, selection, verify
from .core import (ApCertificateError, ApConfigError, ApError,
                   ApNumericalError, FrequencyBasis, FuncExpr,
                   MetricSpaceCfg, MultiMap, eval_batch)
from .metrics import AverageEstimate, AveragingScheme

SCENARIOS = ("metrics", "almost_periods", "perturb", "partition", "select",
             "verify")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv(header: str, rows) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"


def _estimate_dict(est: AverageEstimate) -> dict:
    return {"value": est.value, "spread": est.spread,
            "per_horizon": [[b, v] for b, v in est.per_horizon],
            "kind": est.kind}


def _horizon_rows(est: AverageEstimate):
    return [(float(b), float(v), est.kind) for b, v in est.per_horizon]


# --------------------------------------------------------------------------
# Config parsing
# --------------------------------------------------------------------------

def _need(obj: dict, key: str, kind=None):
    if key not in obj:
        raise ApConfigError(f"missing config field {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise ApConfigError(f"config field {key!r} has the wrong type")
    return val


def parse_space(obj: dict) -> MetricSpaceCfg:
    dim = int(_need(obj, "dim"))
    return MetricSpaceCfg(dim, obj.get("metric", "euclidean"),
                          tuple(obj.get("base_point", (0.0,) * dim)))


def parse_scheme(obj: dict) -> AveragingScheme:
    return AveragingScheme(tuple(float(b) for b in _need(obj, "b_list", list)),
                           float(_need(obj, "step")),
                           int(obj.get("window", 3)))


def parse_basis(obj: dict) -> FrequencyBasis:
    return FrequencyBasis(tuple(float(b) for b in _need(obj, "reals", list)),
                          bool(obj.get("independent", True)),
                          float(obj.get("scale", 1.0)),
                          tuple(tuple(p) for p in obj.get("known_dependent", ())))


def parse_func(obj: dict) -> FuncExpr:
    kind = _need(obj, "kind", str)
    if kind == "trig":
        basis = parse_basis(_need(obj, "basis", dict))
        dim = int(obj.get("dim", 1))
        terms = [(tuple(int(x) for x in _need(t, "freq", list)),
                  t.get("cos", [0.0] * dim), t.get("sin", [0.0] * dim))
                 for t in obj.get("terms", [])]
        return core.trig_real(basis, terms, value_dim=dim,
                              constant=obj.get("const"))
    if kind == "const":
        return core.const(_need(obj, "value", list))
    if kind == "sin":
        return core.sin_wave(float(obj.get("omega", 1.0)))
    if kind == "cos":
        return core.cos_wave(float(obj.get("omega", 1.0)))
    if kind == "sum":
        parts = [parse_func(p) for p in _need(obj, "parts", list)]
        if not parts:
            raise ApConfigError("sum needs at least one part")
        out = parts[0]
        for p in parts[1:]:
            out = core.Sum(out, p)
        return out
    if kind == "shift":
        return core.Shift(parse_func(_need(obj, "inner", dict)),
                          float(_need(obj, "tau")))
    if kind == "truncate":
        return core.Truncate(parse_func(_need(obj, "inner", dict)),
                             float(_need(obj, "a")))
    if kind == "sgn":
        return core.Sgn(parse_func(_need(obj, "inner", dict)))
    if kind == "dist_to":
        return core.DistTo(parse_func(_need(obj, "inner", dict)),
                           tuple(float(x) for x in _need(obj, "point", list)))
    if kind == "scalar_prod":
        return core.ScalarProd(parse_func(_need(obj, "scalar", dict)),
                               parse_func(_need(obj, "vector", dict)))
    if kind == "stack":
        return core.Stack(tuple(parse_func(p)
                                for p in _need(obj, "parts", list)))
    raise ApConfigError(f"unknown function kind {kind!r}")


def set_to_json(s) -> dict:
    if isinstance(s, partition.FullLine):
        return {"tag": "full"}
    if isinstance(s, partition.Empty):
        return {"tag": "empty"}
    if isinstance(s, partition.LevelSet):
        return {"tag": "level", "threshold": s.threshold,
                "relation": s.relation}
    if isinstance(s, partition.UnionN):
        return {"tag": "union", "parts": [set_to_json(p) for p in s.parts]}
    if isinstance(s, partition.Intersect):
        return {"tag": "intersect", "parts": [set_to_json(s.left),
                                              set_to_json(s.right)]}
    if isinstance(s, partition.Diff):
        return {"tag": "diff", "parts": [set_to_json(s.left),
                                         set_to_json(s.right)]}
    if isinstance(s, partition.Complement):
        return {"tag": "complement", "parts": [set_to_json(s.inner)]}
    raise ApConfigError(f"unserializable set node {type(s).__name__}")


def series_to_json(s: perturb.PerturbationSeries) -> dict:
    return {"b": s.period, "J": s.depth,
            "Delta": list(s.amplitudes),
            "alpha": list(s.alphas),
            "alpha_mult": [int(n) for n in s.alpha_mults],
            "delta": list(s.levels),
            "tau0": list(s.tau_zeros)}


# --------------------------------------------------------------------------
# Scenario runners: each returns (report, extra files, certificates)
# --------------------------------------------------------------------------

def run_metrics(inputs: dict, space, scheme, seed):
    f = parse_func(_need(inputs, "f", dict))
    g = parse_func(_need(inputs, "g", dict))
    which = inputs.get("which", "DB_p")
    p = float(inputs.get("p", 1.0))
    certs = []
    files = {}
    if which == "DB_p":
        est = metrics.metric_DB_p(f, g, p, space, scheme)
        value = est.value
        report = {"which": which, "p": p, "estimate": _estimate_dict(est)}
        files["horizons.csv"] = _csv("b,average,estimate_kind",
                                     _horizon_rows(est))
    elif which == "DS_p":
        value = metrics.metric_DS_p(f, g, p, space, scheme)
        report = {"which": which, "p": p, "estimate": {"value": value}}
        files["horizons.csv"] = _csv("b,average,estimate_kind",
                                     [(scheme.b_max, value, "DS_p")])
    elif which == "Dinf":
        value = metrics.metric_Dinf(f, g, space, scheme)
        report = {"which": which, "estimate": {"value": value}}
        files["horizons.csv"] = _csv("b,average,estimate_kind",
                                     [(scheme.b_max, value, "Dinf")])
    elif which == "fourier":
        est = metrics.fourier_bohr(f, float(_need(inputs, "lambda")), scheme)
        value = abs(est.value[0])
        report = {"which": which,
                  "estimate": {"value": [[z.real, z.imag] for z in est.value],
                               "error_bound": est.error_bound,
                               "horizon": est.horizon}}
        files["horizons.csv"] = _csv(
            "b,average,estimate_kind",
            [(est.horizon, abs(z), "fourier_abs") for z in est.value])
    else:
        raise ApConfigError(f"unknown metric selector {which!r}")
    expect = inputs.get("expect")
    if expect:
        target, tol = float(expect["value"]), float(expect["tol"])
        certs.append(("estimate_matches_expected",
                      abs(value - target) <= tol,
                      f"|{value:.6g} - {target:.6g}| <= {tol:g}"))
    return report, files, certs


def run_almost_periods(inputs: dict, space, scheme, seed):
    f = parse_func(_need(inputs, "f", dict))
    scan = metrics.almost_periods(
        f, float(_need(inputs, "eps")), inputs.get("metric", "DB_p"),
        float(_need(inputs, "tau_max")), float(_need(inputs, "tau_step")),
        scheme, p=float(inputs.get("p", 1.0)))
    report = {"accepted": list(scan.accepted),
              "gap_witness": scan.gap_witness,
              "empty": scan.empty}
    rows = [(tau, dist, int(tau in set(scan.accepted)))
            for tau, dist in scan.distances]
    files = {"scan.csv": _csv("tau,distance,accepted", rows)}
    certs = [("scan_not_empty", not scan.empty,
              f"{len(scan.accepted)} shifts accepted")]
    return report, files, certs


def run_perturb(inputs: dict, space, scheme, seed):
    family = [parse_func(o) for o in _need(inputs, "family", list)]
    Delta = float(_need(inputs, "Delta"))
    b = float(_need(inputs, "b"))
    depth = int(_need(inputs, "J"))
    series = perturb.build_perturbation(family, Delta, b, depth, scheme,
                                        family_tag="cli")
    series.check_schedule(Delta)
    sup = series.sup_norm_gridmax()
    rng = np.random.default_rng(seed)
    gap = series.periodicity_gap(rng.uniform(0.0, 100.0, size=1000))
    certs = [("sup_norm_below_Delta", sup < Delta, f"{sup:.6g} < {Delta:g}"),
             ("periodicity_gap", gap <= 1e-12, f"gap={gap:.3e}")]
    rows = []
    stage_reports = []
    for j in range(depth):  # the last stage carries no tail slack
        est = perturb.level_density(family[0], series, j, scheme)
        bound = 2.0 ** -(j + 1) + 0.02
        certs.append((f"stage_{j}_density", est.value < bound,
                      f"kappa={est.value:.6g} < {bound:.6g}"))
        rows.append((j, est.value, bound))
        stage_reports.append({"stage": j, "kappa": est.value, "bound": bound})
    report = {"series": series_to_json(series), "sup_norm_gridmax": sup,
              "periodicity_gap": gap, "stages": stage_reports}
    files = {"series.json": json.dumps(series_to_json(series), sort_keys=True,
                                       indent=2) + "\n",
             "certificate.csv": _csv("stage,kappa_estimate,bound", rows)}
    return report, files, certs


def run_partition(inputs: dict, space, scheme, seed):
    f = parse_func(_need(inputs, "f", dict))
    eps = float(_need(inputs, "eps"))
    fam = partition.build_partition(
        f, eps, space, scheme, depth=int(inputs.get("J", 0)),
        resid_target=float(inputs.get("resid_target", 0.05)))
    resid = fam.residual_density.value
    target = float(inputs.get("resid_target", 0.05))

    n_samples = int(inputs.get("sample_count", 100_000))
    hz = metrics.horizons_for(scheme, fam.series)[-1]
    stride = max(1, hz.n // n_samples)
    rows = []
    n_dec = n_out = bad_eps = sep_ok = 0
    for ts, ctx in hz.chunks():
        sub = ts[::stride]
        sctx = None  # strided samples leave the commensurate lattice
        idx, dist = fam.assign_batch(sub, sctx)
        vals, _ = eval_batch(fam.source, sub, sctx, cache={})
        decided = idx >= 0
        n_dec += int(np.count_nonzero(decided))
        bad_eps += int(np.count_nonzero(dist[decided] >= eps))
        mind = np.full(sub.shape[0], np.inf)
        for pt in fam.points:
            np.minimum(mind, fam.distance.point_dists(vals, np.asarray(pt)),
                       out=mind)
        outside = ~decided
        n_out += int(np.count_nonzero(outside))
        sep_ok += int(np.count_nonzero(mind[outside] > eps / 3.0))
        for t, j, dd in zip(sub[:50], idx[:50], dist[:50]):
            if len(rows) < 1000:
                rows.append((float(t), int(j), float(dd) if j >= 0 else -1.0))
    sep_rate = 1.0 if n_out == 0 else sep_ok / n_out
    certs = [("residual_below_target", resid < target,
              f"kappa_tilde={resid:.6g} < {target:g}"),
             ("approximation_on_cells", bad_eps == 0,
              f"{bad_eps} of {n_dec} decided samples off"),
             ("separation_outside", sep_rate >= 0.995,
              f"rate={sep_rate:.6g}")]
    report = {"eps": eps, "centers": [list(p) for p in fam.points],
              "residual": resid, "size": fam.size,
              "separation_rate": sep_rate,
              "decided_samples": n_dec,
              "sets": [set_to_json(s) for s in fam.sets[:64]]}
    files = {"partition.json": json.dumps(report, sort_keys=True,
                                          indent=2) + "\n",
             "samples.csv": _csv("t,member_index,dist_to_center", rows)}
    return report, files, certs


def run_select(inputs: dict, space, scheme, seed):
    trajectories = tuple(parse_func(o)
                         for o in _need(inputs, "trajectories", list))
    F = MultiMap(trajectories, space)
    g = parse_func(_need(inputs, "g", dict))
    res = selection.build_selection(
        F, g, float(_need(inputs, "eps")), int(_need(inputs, "n_max")),
        space, scheme, depth=int(inputs.get("J", 0)))
    cert = res.certificate
    certs = [("membership_exceedance",
              cert.membership_exceedance.value < 0.02,
              f"{cert.membership_exceedance.value:.6g} < 0.02"),
             ("nearness_exceedance",
              cert.nearness_exceedance.value < 0.02,
              f"{cert.nearness_exceedance.value:.6g} < 0.02")]
    for rec in res.chain_log:
        if rec.depth > 1:
            certs.append((f"chain_step_depth_{rec.depth}",
                          rec.max_step < rec.step_bound,
                          f"{rec.max_step:.6g} < {rec.step_bound:.6g}"))
    report = {
        "eps": res.eps, "depth": res.depth,
        "cells": [{"indices": list(i), "point": list(p)}
                  for i, p in res.cells],
        "certificate": {
            "tail_bound": cert.tail_bound,
            "membership_exceedance": _estimate_dict(cert.membership_exceedance),
            "nearness_exceedance": _estimate_dict(cert.nearness_exceedance)},
        "chain": [{"depth": r.depth, "sets": r.n_sets, "cells": r.n_cells,
                   "max_step": r.max_step, "bound": r.step_bound}
                  for r in res.chain_log]}
    # trace: selection values and distances on a light subsample
    hz = metrics.horizons_for(scheme, None)[-1]
    ts = np.linspace(-scheme.b_max, scheme.b_max, 512)
    cache: dict = {}
    sel_vals, _ = eval_batch(res.selection, ts, cache=cache)
    tvals = F.values_batch(ts, cache=cache)
    gvals, _ = eval_batch(g, ts, cache=cache)
    d_sel_F = np.min(np.sqrt(np.sum((tvals - sel_vals[None]) ** 2, axis=2)),
                     axis=0)
    d_g_F = np.min(np.sqrt(np.sum((tvals - gvals[None]) ** 2, axis=2)), axis=0)
    rows = [tuple([float(t)] + [float(v) for v in sv]
                  + [float(a), float(bb)])
            for t, sv, a, bb in zip(ts, sel_vals, d_sel_F, d_g_F)]
    header = ("t," + ",".join(f"selected_value_{i}" for i in range(F.dim))
              + ",dist_to_F,dist_g_to_F")
    files = {"selection.json": json.dumps(report, sort_keys=True,
                                          indent=2) + "\n",
             "trace.csv": _csv(header, rows)}
    return report, files, certs


def run_verify(inputs: dict, space, scheme, seed):
    seeds = [int(s) for s in inputs.get("seeds", [seed])]
    checks = []
    all_ok = True
    for s in seeds:
        for c in verify.run_invariant_suite(s):
            checks.append({"seed": s, "name": c.name, "passed": c.passed,
                           "detail": c.detail})
            all_ok &= c.passed
    report = {"checks": checks, "seeds": seeds}
    certs = [(f"seed_{c['seed']}_{c['name']}", c["passed"], c["detail"])
             for c in checks]
    return report, {}, certs


RUNNERS = {"metrics": run_metrics, "almost_periods": run_almost_periods,
           "perturb": run_perturb, "partition": run_partition,
           "select": run_select, "verify": run_verify}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def run(scenario: str, config: dict, out_dir: Path,
        seed: Optional[int] = None) -> int:
    if scenario not in SCENARIOS:
        raise ApConfigError(f"unknown scenario {scenario!r}")
    if "scenario" in config and config["scenario"] != scenario:
        raise ApConfigError("config scenario does not match the command")
    space = parse_space(_need(config, "space", dict))
    scheme = parse_scheme(_need(config, "scheme", dict))
    inputs = _need(config, "inputs", dict)
    run_seed = int(seed if seed is not None else config.get("seed", 0))

    report, files, certs = RUNNERS[scenario](inputs, space, scheme, run_seed)

    ok = all(p for _n, p, _d in certs)
    full = {"scenario": scenario, "seed": run_seed,
            "certificates": [{"name": n, "passed": p, "detail": d}
                             for n, p, d in certs],
            "all_passed": ok,
            "report": report}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(full, sort_keys=True, indent=2) + "\n", newline="\n")
    for name, content in files.items():
        (out_dir / name).write_text(content, newline="\n")
    if not ok:
        failed = [n for n, p, _d in certs if not p]
        print(f"certificate failure: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="apselect",
        description="Almost periodic metrics, perturbations, partitions and "
                    "selections with machine-checkable certificates.")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default="apselect_out")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)

    try:
        try:
            text = Path(args.config).read_text()
            config = json.loads(text)
        except (OSError, json.JSONDecodeError) as exc:
            raise ApConfigError(f"unreadable config: {exc}") from exc
        if not isinstance(config, dict):
            raise ApConfigError("config must be a JSON object")
        code = run(args.scenario, config, Path(args.out), args.seed)
    except ApConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ApNumericalError, ApCertificateError) as exc:
        kind = ("numerical-stage"
                if isinstance(exc, ApNumericalError) else "construction")
        print(f"{kind} failure: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, ApNumericalError) else 1
    return code


if __name__ == "__main__":
    raise SystemExit(main())
