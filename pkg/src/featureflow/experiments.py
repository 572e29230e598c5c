"""Desk-scale studies with slope fits and pass/fail verdicts.

Every study takes an ExperimentConfig. Study-specific knobs (replicate counts,
horizons, reference widths) live next to the tolerances in ``config.tolerances``
and fall back to the defaults below.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .config_io import ExperimentConfig, emit_results, write_json
from .dnn import train_dnn
from .flowsim import spread_observer, step_refinement, width_refinement
from .funcs import assumption_audit, get_activation
from .meanfield import (construct_ideal_dnn, construct_ideal_resnet, empirical_gram, eps1_audit_dnn,
                        eps1_audit_resnet, gram_chain, init_dnn_fixed_variance, init_dnn_regression,
                        init_dnn_standard, init_resnet_regression, init_resnet_standard, init_resnet_zero,
                        mc_beta_gram, regress_dnn, regress_resnet)
from .numerics import DegenerateFit, fit_loglog_slope
from .resnet import train_resnet

STUDIES = ("degeneracy", "gram", "eps1", "refine", "converge", "audit")

DEFAULTS: dict[str, dict[str, Any]] = {
    "gram": {"slope": [-0.7, -0.3], "rel_at_max": 0.05, "replicates": 8, "quad_order": 64},
    "eps1": {"slope": [-0.75, -0.3], "replicates": 10, "M_ref": 1_000_000},
    "degeneracy": {"slope": [-0.7, -0.3], "contrast": 0.1, "layer": 2},
    "refine": {"step_ratio": [1.4, 2.8], "width_slope": [-0.8, -0.25], "T": 1.0, "r": 2,
               "m_ref": 4096, "width_grid": [64, 256, 1024], "replicates": 24},
    "converge": {"final_loss": 0.02, "init": "zero", "C5": 1.0},
    "audit": {"points": 2001, "grid": [-10.0, 10.0]},
}

# catalogue members and whether each one is expected to satisfy the regularity assumptions
AUDIT_CATALOGUE = {"tanh": True, "scaled_tanh(2)": True, "bounded_softplus": True, "identity": False,
                   "pseudo_huber(1.0)": True, "logistic": True, "squared": False}


def default_config(study: str, family: str = "dnn") -> ExperimentConfig:
    """The configuration each study uses when no file is given."""
    base = dict(seed=0, sigma1=1.0, activation="tanh", loss="pseudo_huber(1.0)", output="results")
    if study == "gram":
        cfg = dict(widths=[256], depth=2, dataset={"kind": "gaussian_regression", "n": 4, "d": 3},
                   m_grid=[2 ** k for k in range(8, 14)], eta=0.01, steps=0)
    elif study == "eps1":
        cfg = dict(widths=[64], depth=3 if family == "dnn" else 4, sigma1=0.5,
                   dataset={"kind": "gaussian_regression", "n": 4, "d": 8},
                   m_grid=[64, 256, 1024, 4096], eta=0.01, steps=0)
    elif study == "degeneracy":
        cfg = dict(widths=[64], depth=3, dataset={"kind": "gaussian_regression", "n": 4, "d": 3},
                   m_grid=[2 ** k for k in range(6, 12)], eta=0.1, steps=50)
    elif study == "refine":
        cfg = dict(widths=[32], depth=3, dataset={"kind": "gaussian_regression", "n": 4, "d": 3},
                   m_grid=[64, 256, 1024], eta=0.1, steps=10)
    elif study == "converge":
        cfg = dict(widths=[512], depth=4, dataset={"kind": "gaussian_regression", "n": 8, "d": 4},
                   m_grid=[512], eta=0.0025, steps=2000)
    elif study == "audit":
        cfg = dict(widths=[1], depth=1, dataset={"kind": "gaussian_regression", "n": 4, "d": 3},
                   m_grid=[1], eta=0.01, steps=0)
    else:
        raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")
    base.update(cfg)
    base["tolerances"] = dict(DEFAULTS[study])
    return ExperimentConfig(**base)


@dataclass
class StudyReport:
    study: str
    points: list[dict]
    measurements: dict[str, Any]
    checks: dict[str, dict]  # name -> {value, lo, hi, passed}
    slope: float | None = None
    intercept: float | None = None
    notes: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def verdict(self) -> bool:
        return bool(self.checks) and all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["verdict"] = self.verdict
        return out

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        points = emit_results(self.points, directory / f"{self.study}_points.csv") if self.points else None
        summary = write_json(self.to_dict(), directory / f"{self.study}_report.json")
        return points, summary


def check(value: float | None, lo: float = -math.inf, hi: float = math.inf) -> dict:
    """Pure verdict: value inside [lo, hi]. A missing value fails."""
    ok = value is not None and math.isfinite(value) and lo <= value <= hi
    return {"value": value, "lo": lo, "hi": hi, "passed": bool(ok)}


def _tol(config: ExperimentConfig, study: str) -> dict:
    merged = dict(DEFAULTS[study])
    merged.update(config.tolerances or {})
    return merged


def _map(fn: Callable, items, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fit(xs, ys, notes: list[str]) -> tuple[float | None, float | None]:
    try:
        return fit_loglog_slope(xs, ys)
    except DegenerateFit as exc:
        notes.append(f"no slope: {exc}")
        return None, None


# --- studies -------------------------------------------------------------------------------------

def cli_gram(config: ExperimentConfig, workers: int = 1) -> StudyReport:
    """||Khat_1 - K_1||_max over the width grid, averaged over replicate seeds."""
    start = time.perf_counter()
    tol = _tol(config, "gram")
    data = config.make_dataset()
    chain = gram_chain(data, config.sigma1, config.activation, 2, int(tol["quad_order"]))
    K1 = chain.K[1]
    reps = int(tol["replicates"])

    def point(m):
        errs = []
        for r in range(reps):
            _, cache = init_dnn_standard(data, [m], config.sigma1, config.seed + r, config.activation)
            errs.append(float(np.max(np.abs(empirical_gram(cache.thetas[0], config.activation) - K1))))
        return {"m": m, "error": float(np.mean(errs)), "error_first": errs[0], "rel_error": float(np.mean(errs)) / float(np.max(np.abs(K1)))}

    points = _map(point, config.m_grid, workers)
    notes = [f"averaged over {reps} replicate seeds", f"lambda_bar={chain.lambda_bar:.6g}"]
    slope, intercept = _fit([p["m"] for p in points], [p["error"] for p in points], notes)
    checks = {"slope": check(slope, *tol["slope"]),
              "rel_error_at_max_m": check(points[-1]["rel_error"], hi=tol["rel_at_max"])}
    return StudyReport("gram", points, {"K1_max": float(np.max(np.abs(K1))), "lambda_bar": chain.lambda_bar},
                       checks, slope, intercept, notes, time.perf_counter() - start)


def eps1_point(config: ExperimentConfig, family: str, m: int, seed: int, reference) -> dict:
    """One eps1 audit at width m; ``reference`` is the Gram chain (dnn) or beta chain (resnet)."""
    data = config.make_dataset()
    L = config.depth
    if family == "dnn":
        net, cache = init_dnn_standard(data, [m] * L, config.sigma1, seed, config.activation)
        net = regress_dnn(net, cache)
        ideal = construct_ideal_dnn(net, cache, reference, seed)
        rep = eps1_audit_dnn(net, ideal)
    else:
        net, cache = init_resnet_standard(data, m, L, config.sigma1, seed, 1.0, config.activation, config.activation)
        net = regress_resnet(net, cache)
        ideal = construct_ideal_resnet(net, cache, reference, seed)
        rep = eps1_audit_resnet(net, ideal, cache)
    return {"eps1": rep.eps1, "fallback": int(any(ideal.fallback_used.values())), **rep.categories, **rep.info}


def cli_eps1(config: ExperimentConfig, family: str = "dnn", workers: int = 1) -> StudyReport:
    if family not in ("dnn", "resnet"):
        raise ValueError("family must be dnn or resnet")
    start = time.perf_counter()
    tol = _tol(config, "eps1")
    data = config.make_dataset()
    reps = int(tol["replicates"])
    if family == "dnn":
        reference = gram_chain(data, config.sigma1, config.activation, config.depth)
        meas = {"lambda_bar": reference.lambda_bar}
    else:
        reference = mc_beta_gram(data, config.sigma1, config.activation, config.activation, config.depth,
                                 int(tol["M_ref"]), config.seed)
        meas = {"M_ref": reference.M_ref, "max_stderr": float(max(np.max(s) for s in reference.stderr))}

    def point(m):
        runs = [eps1_point(config, family, m, config.seed + r, reference) for r in range(reps)]
        row = {"m": m, "eps1": float(np.mean([r["eps1"] for r in runs])),
               "eps1_first": runs[0]["eps1"], "fallbacks": sum(r["fallback"] for r in runs)}
        for key in runs[0]:
            if key not in ("eps1", "fallback"):
                row[key] = float(np.mean([r[key] for r in runs]))
        return row

    points = _map(point, config.m_grid, workers)
    notes = [f"eps1 averaged over {reps} replicate seeds"]
    slope, intercept = _fit([p["m"] for p in points], [p["eps1"] for p in points], notes)
    checks = {"slope": check(slope, *tol["slope"])}
    return StudyReport(f"eps1_{family}", points, meas, checks, slope, intercept, notes, time.perf_counter() - start)


def cli_degeneracy(config: ExperimentConfig, workers: int = 1) -> StudyReport:
    """max-over-steps feature spread at one layer under fixed-variance and regression inits."""
    start = time.perf_counter()
    tol = _tol(config, "degeneracy")
    data = config.make_dataset()
    layer = int(tol["layer"])
    observe = spread_observer([layer])
    key = f"spread_{layer}"

    def run(net):
        _, rec = train_dnn(net, data, config.loss, config.eta, config.steps, observe=observe)
        return max(r.stats[key] for r in rec)

    def point(m):
        widths = [m] * config.depth
        fixed = run(init_dnn_fixed_variance(data, widths, config.sigma1, config.seed, config.activation))
        reg = run(init_dnn_regression(data, widths, config.sigma1, config.seed, config.activation))
        return {"m": m, "delta_fixed": fixed, "delta_regression": reg}

    points = _map(point, config.m_grid, workers)
    notes = []
    slope, intercept = _fit([p["m"] for p in points], [p["delta_fixed"] for p in points], notes)
    contrast = points[-1]["delta_regression"] / points[0]["delta_regression"] if len(points) > 1 else None
    checks = {"slope": check(slope, *tol["slope"]), "contrast": check(contrast, lo=tol["contrast"])}
    return StudyReport("degeneracy", points, {"contrast": contrast}, checks, slope, intercept, notes,
                       time.perf_counter() - start)


def cli_refine(config: ExperimentConfig, workers: int = 1) -> StudyReport:
    """Step refinement on a toy DNN and width refinement against a wide reference net."""
    start = time.perf_counter()
    tol = _tol(config, "refine")
    data = config.make_dataset()
    T, r, eta = float(tol["T"]), int(tol["r"]), config.eta
    net = init_dnn_regression(data, config.hidden_widths(), config.sigma1, config.seed, config.activation)
    coarse = step_refinement(net, data, config.loss, T, eta, r)
    fine = step_refinement(net, data, config.loss, T, eta / r, r)
    ratio = coarse.weight_deviation / fine.weight_deviation if fine.weight_deviation > 0 else None
    points = [{"kind": "step", "eta": eta, "weight_dev": coarse.weight_deviation, "loss_dev": coarse.loss_deviation},
              {"kind": "step", "eta": eta / r, "weight_dev": fine.weight_deviation, "loss_dev": fine.loss_deviation}]

    grid = [int(m) for m in tol["width_grid"]]
    reps = int(tol["replicates"])

    def replicate(i):
        return width_refinement(data, config.loss, eta, T, grid, int(tol["m_ref"]), depth=config.depth,
                                sigma1=config.sigma1, seed=config.seed + i, activation=config.activation).deviations

    devs = np.mean(_map(replicate, range(reps), workers), axis=0)
    points += [{"kind": "width", "m": m, "loss_dev": float(v)} for m, v in zip(grid, devs)]
    notes = ["the continuous flow is not computable; both axes are refinement proxies",
             f"width deviations averaged over {reps} replicate seeds"]
    slope, intercept = _fit(grid, devs, notes)
    checks = {"step_ratio": check(ratio, *tol["step_ratio"]), "width_slope": check(slope, *tol["width_slope"])}
    return StudyReport("refine", points, {"step_ratio": ratio, "loss_ratio": coarse.loss_deviation / fine.loss_deviation
                                          if fine.loss_deviation > 0 else None},
                       checks, slope, intercept, notes, time.perf_counter() - start)


def cli_converge(config: ExperimentConfig, workers: int = 1) -> StudyReport:
    """Train a Res-Net to the horizon and compare the final loss with the threshold."""
    start = time.perf_counter()
    tol = _tol(config, "converge")
    data = config.make_dataset()
    m, L = config.hidden_widths()[0], config.depth
    h = config.activation
    if tol["init"] == "zero":
        net = init_resnet_zero(data, m, L, config.sigma1, config.seed, float(tol["C5"]), h, h)
    elif tol["init"] == "regression":
        net = init_resnet_regression(data, m, L, config.sigma1, config.seed, float(tol["C5"]), h, h)
    else:
        raise ValueError("converge init must be 'zero' or 'regression'")
    _, records = train_resnet(net, data, config.loss, config.eta, config.steps)
    bound = get_activation(h).L1
    skips = [r.stats.get("skip", 0.0) for r in records]
    violations = sum(s > bound for s in skips)
    final, initial = records[-1].loss, records[0].loss
    checks = {"final_loss": check(final, hi=tol["final_loss"]), "skip_violations": check(violations, hi=0)}
    meas = {"initial_loss": initial, "final_loss": final, "ratio": final / initial if initial > 0 else None,
            "max_skip": max(skips), "horizon": config.eta * config.steps}
    return StudyReport("converge", [r.row() for r in records], meas, checks, notes=[],
                       wall_clock=time.perf_counter() - start)


def cli_audit(config: ExperimentConfig, workers: int = 1) -> StudyReport:
    """Grid audit of the catalogue; each member must match its expected compliance."""
    start = time.perf_counter()
    tol = _tol(config, "audit")
    points, checks = [], {}
    for name, expected in AUDIT_CATALOGUE.items():
        labels = np.linspace(-1.0, 1.0, 21) if name == "logistic" else None
        rec = assumption_audit(name, tuple(tol["grid"]), int(tol["points"]), labels=labels)
        points.append({"id": rec.id, "compliant": rec.compliant, **{f"est_{k}": v for k, v in rec.estimates.items()},
                       **{f"declared_{k}": v for k, v in rec.declared.items()}})
        checks[name] = {"value": rec.compliant, "expected": expected, "passed": rec.compliant == expected}
    return StudyReport("audit", points, {}, checks, wall_clock=time.perf_counter() - start)


def run_study(study: str, config: ExperimentConfig, family: str = "dnn", workers: int = 1) -> StudyReport:
    if study == "eps1":
        return cli_eps1(config, family, workers)
    runner = {"gram": cli_gram, "degeneracy": cli_degeneracy, "refine": cli_refine,
              "converge": cli_converge, "audit": cli_audit}.get(study)
    if runner is None:
        raise ValueError(f"unknown study {study!r}; choose from {STUDIES}")
    return runner(config, workers)
