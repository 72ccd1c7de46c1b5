"""Command-line entry point: ``mfpmp <command> [--config F] [--out DIR] [--seed N] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .experiments import (SCHEMAS, derive_seed, grid_from, load_config, run_convergence_study,
                          run_uniqueness_study, uniqueness_config, write_csv, write_manifest)
from .hjb import (CoarseControls, costate_consistency, dpp_check, solve_classical_hjb_1d,
                  theta_grid_1d)
from .models import build_model, constant_drive
from .ode import ControlPath, TimeGrid
from .pmp import SolverConfig, estimate_stability_constant, loss, msa_solve
from .population import PopulationSpec
from .validation import FAULTS, run_validation_suite

logger = logging.getLogger("mfpmp")


def _setup(args, loader=load_config):
    cfg = loader(args.config)
    if args.seed is not None:
        cfg["study"]["base_seed"] = args.seed
    if args.out is not None:
        cfg["output"] = args.out
    return cfg, Path(cfg["output"])


def cmd_validate(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    results = run_validation_suite(threads=args.threads, fault=args.inject_fault)
    write_csv(out / "validate.csv", SCHEMAS["validate"], [r.row() for r in results])
    failed = [r.name for r in results if not r.passed]
    write_manifest(out, "validate", cfg, {
        "checks": [dict(zip(SCHEMAS["validate"], r.row())) for r in results],
        "failed": failed, "injected_fault": args.inject_fault, "threads": args.threads,
    }, started)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:40s} observed={r.observed:.3e} "
              f"tol={r.tolerance:.3e}")
    return 1 if failed else 0


def cmd_train(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    model = build_model(cfg["model"])
    spec = PopulationSpec.from_config(cfg["population"])
    grid = grid_from(cfg)
    sol = msa_solve(model, spec, ControlPath.constant(grid, np.zeros(model.m)),
                    SolverConfig.from_config(cfg["solver"]))
    header = ["t"] + [f"theta_{i + 1}" for i in range(model.m)]
    times = grid.times[:-1]
    write_csv(out / "solution.csv", header,
              [(t, *row) for t, row in zip(times, sol.control.values)])
    write_manifest(out, "train", cfg, {
        "converged": sol.converged, "residual_history": sol.residual_history,
        "loss": loss(model, spec, sol.control),
    }, started)
    print(f"converged={sol.converged} residual={sol.residual:.3e} "
          f"loss={loss(model, spec, sol.control):.10g}")
    return 0 if sol.converged else 2


def cmd_converge(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    res = run_convergence_study(cfg, threads=args.threads)
    write_csv(out / "convergence.csv", SCHEMAS["convergence"], res.rows)
    write_csv(out / "convergence_summary.csv", SCHEMAS["convergence_summary"], res.summary_rows)
    write_manifest(out, "converge-study", cfg, {
        "slope": res.slope, "excluded_rows": res.excluded,
        "theta_star_residual": res.theta_star_residual,
        "seed_scheme": "derive_seed(base_seed, 'convergence', trial)",
    }, started)
    print("slope", "undefined" if res.slope is None else f"{res.slope:.4f}")
    return 0


def cmd_uniqueness(args) -> int:
    started = time.time()
    cfg, out = _setup(args, loader=uniqueness_config)
    res = run_uniqueness_study(cfg, threads=args.threads)
    write_csv(out / "uniqueness.csv", SCHEMAS["uniqueness"], res.rows)
    write_manifest(out, "uniqueness-study", cfg, {
        "max_pairwise_dist": {str(k): v for k, v in res.max_dist.items()},
        "all_converged": {str(k): v for k, v in res.all_converged.items()},
        "seed_scheme": "derive_seed(base_seed, 'uniqueness', horizon_index, init)",
    }, started)
    for T, d in res.max_dist.items():
        print(f"T={T}: max pairwise distance {d:.3e}, all converged={res.all_converged[T]}")
    return 0


def _lq_hjb_parts(cfg):
    h = cfg["hjb"]
    box = tuple(h["theta_box"])
    model = build_model({**cfg["model"], "theta_box": box})
    return h, box, model


def cmd_hjb(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    h, box, model = _lq_hjb_parts(cfg)
    grid = TimeGrid(float(cfg["time"]["horizon"]), int(h["steps"]))
    vg = solve_classical_hjb_1d(model, [h["target"]], h["x_lo"], h["x_hi"], int(h["x_nodes"]),
                                theta_grid_1d(box[0], box[1], int(h["theta_nodes"])), grid)
    atom = PopulationSpec([[h["x0"]]], [[h["target"]]], [1.0])
    sol = msa_solve(model, atom, ControlPath.constant(grid, np.zeros(model.m)),
                    SolverConfig.from_config(cfg["solver"]))
    mismatch = costate_consistency(model, sol, vg)
    v0 = float(vg.value(0.0, h["x0"]))
    write_csv(out / "value_grid.csv", SCHEMAS["value_grid"], vg.to_rows())
    write_csv(out / "hjb_check.csv", ["quantity", "value"],
              [("v0", v0), ("pmp_loss", loss(model, atom, sol.control)),
               ("costate_mismatch", mismatch)])
    write_manifest(out, "hjb-check", cfg, {"v0": v0, "costate_mismatch": mismatch}, started)
    print(f"v(0, x0)={v0:.6g}  max|p + dv/dx|={mismatch:.3e}")
    return 0


def cmd_dpp(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    h, box, model = _lq_hjb_parts(cfg)
    spec = PopulationSpec.from_config(cfg["population"])
    n_theta = int(round((box[1] - box[0]) / float(h["dpp_theta_step"]))) + 1
    coarse = CoarseControls(TimeGrid(float(cfg["time"]["horizon"]), int(h["dpp_steps"])),
                            int(h["dpp_blocks"]), theta_grid_1d(box[0], box[1], n_theta))
    rep = dpp_check(model, spec, 0.0, float(h["dpp_t_hat"]), coarse)
    write_csv(out / "dpp_check.csv", ["t", "t_hat", "v_left", "best_rhs", "residual"],
              [(rep.t, rep.t_hat, rep.v_left, rep.best_rhs, rep.residual)])
    write_manifest(out, "dpp-check", cfg, {"residual": rep.residual}, started)
    print(f"v_left={rep.v_left:.10g} best_rhs={rep.best_rhs:.10g} residual={rep.residual:.3e}")
    return 0


def cmd_stability(args) -> int:
    started = time.time()
    cfg, out = _setup(args)
    model = build_model(cfg["model"])
    spec = PopulationSpec.from_config(cfg["population"])
    grid = grid_from(cfg)
    sol = msa_solve(model, spec, ControlPath.constant(grid, np.zeros(model.m)),
                    SolverConfig.from_config(cfg["solver"]))
    study = cfg["study"]
    seed = derive_seed(study["base_seed"], "stability", 0)
    est = estimate_stability_constant(model, spec, sol.control, float(study["rho"]),
                                      int(study["probe_pairs"]), seed)
    write_csv(out / "stability.csv", ["rho", "n_pairs", "seed", "stable", "constant"],
              [(float(study["rho"]), est.n_pairs, seed, est.stable, est.constant)])
    write_manifest(out, "stability-probe", cfg, {"stable": est.stable,
                                                 "constant": est.constant}, started)
    print(f"stable={est.stable} K_hat={est.constant:.6g}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "converge-study": cmd_converge,
    "uniqueness-study": cmd_uniqueness,
    "hjb-check": cmd_hjb,
    "dpp-check": cmd_dpp,
    "stability-probe": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfpmp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override study.base_seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "validate":
            p.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
