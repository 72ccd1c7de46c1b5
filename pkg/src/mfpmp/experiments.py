"""Config handling, seed derivation, CSV/manifest output and the seeded studies."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .models import ModelSpec, build_model
from .ode import ControlPath, TimeGrid
from .pmp import SolverConfig, loss, msa_solve
from .population import PopulationSpec, draw_samples

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STUDY_IDS = {"convergence": 1, "uniqueness": 2, "validate": 3, "train": 4, "stability": 5}

SCHEMAS = {
    "convergence": ["N", "trial", "seed", "err_sup", "loss_gap", "residual", "converged"],
    "convergence_summary": ["statistic", "N", "value"],
    "uniqueness": ["T", "init_a", "init_b", "pairwise_dist", "all_converged"],
    "validate": ["check", "tolerance", "observed", "passed"],
    "solution": None,  # t, theta_1..theta_m
    "value_grid": ["t", "x", "v"],
}

LQ_ATOMS = [
    {"x": [0.0], "y": [1.0], "w": 0.25},
    {"x": [1.0], "y": [0.0], "w": 0.25},
    {"x": [-1.0], "y": [0.5], "w": 0.25},
    {"x": [0.5], "y": [-1.0], "w": 0.25},
]

DEFAULTS: dict[str, Any] = {
    "model": {"name": "constant_drive", "lambda": 0.5, "dim": 1},
    "time": {"horizon": 1.0, "steps": 20, "substeps": 1},
    "population": {"bound": 10.0, "atoms": LQ_ATOMS},
    "solver": {"max_iter": 500, "tol": 1e-10, "damping": 0.5,
               "maximizer": "closed_form_quadratic"},
    "hjb": {"x_lo": -1.0, "x_hi": 2.0, "x_nodes": 301, "theta_nodes": 201,
            "theta_box": [-1.0, 1.0], "steps": 100, "target": 1.0, "x0": 0.0,
            "dpp_steps": 50, "dpp_blocks": 2, "dpp_theta_step": 0.01, "dpp_t_hat": 0.5},
    "study": {"kind": "convergence", "n_list": [16, 32, 64, 128, 256, 512, 1024],
              "trials": 20, "base_seed": 0, "t_list": [0.1, 5.0], "init_count": 10,
              "init_scale": 2.0, "rho": 0.1, "probe_pairs": 50},
    "output": "out",
}

UNIQUENESS_DEFAULTS = {
    "model": {"name": "tanh_bilinear", "lambda": 1.0, "dim": 1},
    "population": {"bound": 10.0, "atoms": [{"x": [1.0], "y": [2.0], "w": 0.5},
                                            {"x": [-1.0], "y": [-2.0], "w": 0.5}]},
    "solver": {"max_iter": 2000, "tol": 1e-12, "damping": 0.5},
    "study": {"kind": "uniqueness"},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                preset: Optional[dict] = None) -> dict:
    """Defaults, then ``preset``, then the YAML/JSON file at ``path``, then ``overrides``."""
    cfg = deep_merge(DEFAULTS, preset or {})
    if path is not None:
        with open(path) as fh:
            cfg = deep_merge(cfg, yaml.safe_load(fh) or {})
    return deep_merge(cfg, overrides or {})


def derive_seed(base_seed: int, kind: str, *counters: int) -> int:
    """First 64-bit word of ``SeedSequence([base_seed, kind_id, *counters])``.

    Convergence rows use ``counters = (trial,)``: a trial's sample of size N is
    the first N draws of one counter-keyed stream, so samples are nested in N.
    Uniqueness inits use ``(horizon_index, init)``; validation checks use
    ``(check_index,)``.
    """
    ss = np.random.SeedSequence([int(base_seed), STUDY_IDS[kind], *(int(c) for c in counters)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def grid_from(cfg: dict, horizon: Optional[float] = None) -> TimeGrid:
    t = cfg["time"]
    return TimeGrid(float(horizon if horizon is not None else t["horizon"]),
                    int(t["steps"]), int(t.get("substeps", 1)))


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_manifest(out_dir: Path, command: str, cfg: dict, extra: dict,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "schemas": {k: v for k, v in SCHEMAS.items() if v is not None},
        "base_seed": cfg["study"]["base_seed"],
        "config": cfg,
        "versions": {"mfpmp": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_s": round(time.time() - started, 3),
    }
    manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def run_jobs(fn, jobs, threads: int = 1) -> list:
    """Map ``fn`` over ``jobs``; results come back in job order for any thread count."""
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def loglog_slope(ns, values) -> Optional[float]:
    """Least-squares slope of log(value) against log(N); None if undefined."""
    pairs = sorted((float(n), float(v)) for n, v in zip(ns, values) if v > 0 and math.isfinite(v))
    if len(pairs) < 2:
        return None
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ConvergenceResult:
    rows: list
    medians: dict
    loss_gap_medians: dict
    slope: Optional[float]
    excluded: int
    theta_star_residual: float
    summary_rows: list = field(default_factory=list)


def run_convergence_study(cfg: dict, threads: int = 1) -> ConvergenceResult:
    """Sampled solutions near the population solution, for growing sample sizes."""
    model = build_model(cfg["model"])
    spec = PopulationSpec.from_config(cfg["population"])
    grid = grid_from(cfg)
    scfg = SolverConfig.from_config(cfg["solver"])
    study = cfg["study"]
    base = int(study["base_seed"])
    star_cfg = SolverConfig(max_iter=scfg.max_iter, tol=scfg.tol / 10, damping=scfg.damping,
                            maximizer=scfg.maximizer, inner_iters=scfg.inner_iters,
                            inner_step=scfg.inner_step)
    ctrl0 = ControlPath.constant(grid, np.zeros(model.m))
    star = msa_solve(model, spec, ctrl0, star_cfg)
    if not star.converged:
        raise RuntimeError(f"population solution did not converge (residual {star.residual:.3e})")
    theta_star = star.control
    j_star = loss(model, spec, theta_star)

    def trial(job):
        n, t = job
        seed = derive_seed(base, "convergence", t)
        sample = draw_samples(spec, n, seed)
        sol = msa_solve(model, sample, theta_star, scfg)
        err = sol.control.sup_distance(theta_star)
        gap = abs(loss(model, spec, sol.control) - j_star)
        return (n, t, seed, err, gap, sol.residual, sol.converged)

    jobs = [(int(n), t) for n in study["n_list"] for t in range(int(study["trials"]))]
    rows = sorted(run_jobs(trial, jobs, threads), key=lambda r: (r[0], r[1]))
    ns = sorted({r[0] for r in rows})
    medians, gaps = {}, {}
    excluded = sum(1 for r in rows if not r[6])
    for n in ns:
        ok = [r for r in rows if r[0] == n and r[6]]
        medians[n] = float(np.median([r[3] for r in ok])) if ok else math.nan
        gaps[n] = float(np.median([r[4] for r in ok])) if ok else math.nan
    slope = loglog_slope(ns, [medians[n] for n in ns])
    summary = [("median_err_sup", n, medians[n]) for n in ns]
    summary += [("median_loss_gap", n, gaps[n]) for n in ns]
    summary.append(("loglog_slope", "", "undefined" if slope is None else slope))
    return ConvergenceResult(rows, medians, gaps, slope, excluded, star.residual, summary)


@dataclass
class UniquenessResult:
    rows: list
    max_dist: dict
    all_converged: dict


def uniqueness_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    return load_config(path, overrides, preset=UNIQUENESS_DEFAULTS)


def run_uniqueness_study(cfg: dict, threads: int = 1) -> UniquenessResult:
    """Solve from several random initial controls for each horizon; compare the results."""
    model = build_model(cfg["model"])
    if model.quadratic_weight is None or model.hess_theta_H is None:
        raise ValueError("uniqueness study needs a strongly concave Hamiltonian (lambda > 0)")
    spec = PopulationSpec.from_config(cfg["population"])
    scfg = SolverConfig.from_config(cfg["solver"])
    study = cfg["study"]
    base = int(study["base_seed"])
    scale = float(study.get("init_scale", 2.0))
    rows = []
    max_dist, all_conv = {}, {}
    for ti, T in enumerate(study["t_list"]):
        grid = grid_from(cfg, horizon=float(T))

        def solve(i):
            rng = np.random.default_rng(derive_seed(base, "uniqueness", ti, i))
            init = model.project(rng.uniform(-scale, scale, (grid.n_intervals, model.m)))
            return msa_solve(model, spec, ControlPath(grid, init), scfg)

        sols = run_jobs(solve, range(int(study["init_count"])), threads)
        conv = all(s.converged for s in sols)
        dists = []
        for a, b in itertools.combinations(range(len(sols)), 2):
            d = sols[a].control.sup_distance(sols[b].control)
            dists.append(d)
            rows.append((float(T), a, b, d, conv))
        max_dist[float(T)] = max(dists) if dists else 0.0
        all_conv[float(T)] = conv
        if not conv:
            logger.warning("T=%s: %d of %d solves did not converge", T,
                           sum(not s.converged for s in sols), len(sols))
    return UniquenessResult(rows, max_dist, all_conv)
