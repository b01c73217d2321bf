"""Command line front end.

    latticebsde solve --config run.json --out results/

Subcommands: ``solve``, ``robust``, ``invest``, ``equilibrium``, ``check``.
Exit status is 0 on success, 2 when the input is rejected (bad config,
oversized tree, invalid parameters) and 3 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import bsde, config, drivers, equilibrium, feynman_kac, portfolio
from .errors import ConfigInvalid, LatticeBSDEError, NumericalError, ValidationError
from .scenario import write_measure_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


# --- deterministic output ----------------------------------------------------

def _fmt(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def to_json(obj, indent: int = 0) -> str:
    """JSON text with sorted keys and every float printed with 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}"{k}": {to_json(obj[k], indent + 1)}' for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(to_json(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist(), indent)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    if isinstance(obj, str):
        return '"' + obj.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(obj) + "\n")


def _word(tree, n, i):
    return ".".join(str(j) for j in tree.word(n, i))


def write_strategies(path, tree, columns: dict) -> None:
    """One row per ``(n, parent word)`` with every named d-vector field expanded."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["n", "word"]
        for name in columns:
            header += [f"{name}{i}" for i in range(tree.dim)]
        w.writerow(header)
        for n in range(1, tree.horizon + 1):
            for i in range(tree.size(n - 1)):
                row = [n, _word(tree, n - 1, i)]
                for f in columns.values():
                    row += [format(float(x), ".17g") for x in f[n][i]]
                w.writerow(row)


# --- subcommands -------------------------------------------------------------

def _base_summary(args, cfg, command):
    return {
        "command": command,
        "d": cfg.basis.dim,
        "horizon": cfg.tree.horizon,
        "seed": args.seed,
        "threads": args.threads,
    }


def cmd_solve(args, cfg):
    summary = _base_summary(args, cfg, "solve")
    parts = config.markov_parts(cfg) if cfg.markov else None
    if parts is not None:
        h, f = parts
        sol = feynman_kac.markov_solve(cfg.basis, cfg.tree.horizon, h, f)
        summary.update(method="lattice", value=sol.value, evaluated_points=sol.evaluated_points,
                       point_bound=feynman_kac.max_points(cfg.basis.dim, cfg.tree.horizon))
        with open(os.path.join(args.out, "solution.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "counts"] + [f"x{i}" for i in range(cfg.basis.dim)] + ["u"])
            for n, fn in enumerate(sol.u):
                for k, key in enumerate(fn.keys):
                    w.writerow([n, ".".join(map(str, key))] + [format(float(c), ".17g") for c in fn.points[k]]
                               + [format(float(fn.values[k]), ".17g")])
    else:
        driver = cfg.driver()
        sol = bsde.solve(cfg.tree, driver, cfg.payoff())
        checks = bsde.conditional_formulas(cfg.tree, sol)
        summary.update(method="tree", value=sol.value, residual=sol.residual(driver),
                       formula_residual=checks.max_residual)
        bsde.write_solution_csv(sol, os.path.join(args.out, "solution.csv"))
    write_json(os.path.join(args.out, "summary.json"), summary)
    return summary


def cmd_robust(args, cfg):
    opts = cfg.options["robust"]
    res = bsde.robust_representation(cfg.tree, cfg.driver(), cfg.payoff(),
                                     alternatives=int(opts.get("alternatives", 20)), rng=args.seed)
    summary = _base_summary(args, cfg, "robust")
    tol = args.tol if args.tol is not None else bsde.CERTIFICATE_TOL
    summary.update(value=res.value, expectation=res.expectation, penalty=res.penalty, gap=res.gap,
                   alternatives=res.alternatives_checked, alternatives_margin=res.alternatives_margin,
                   certified=bool(res.gap <= tol and res.alternatives_margin >= -tol))
    write_measure_csv(res.measure, os.path.join(args.out, "measure.csv"))
    write_json(os.path.join(args.out, "summary.json"), summary)
    return summary


def cmd_invest(args, cfg):
    opts = cfg.options["invest"]
    res = portfolio.optimal_invest(cfg.tree, cfg.driver(), cfg.payoff(), w=float(opts.get("wealth", 0.0)),
                                   certify=int(opts.get("certify", 200)),
                                   numeric=bool(opts.get("numeric_argmax", False)), rng=args.seed)
    tol = args.tol if args.tol is not None else portfolio.CERTIFY_TOL
    summary = _base_summary(args, cfg, "invest")
    summary.update(value=res.value, y_star_0=float(res.y_star[0][0]), unique_argmax=res.unique,
                   certificate_samples=res.certificate_samples, certificate_margin=res.certificate_margin,
                   certified=res.certificate_margin is None or res.certificate_margin >= -tol)
    write_strategies(os.path.join(args.out, "strategies.csv"), cfg.tree,
                     {"pi": res.pi_star, "z_dagger": res.z_dagger, "z_hedge": res.z_hedge, "z_g": res.z_g})
    write_json(os.path.join(args.out, "summary.json"), summary)
    return summary


def cmd_equilibrium(args, cfg):
    specs = cfg.raw.get("agents")
    if not specs:
        raise ConfigInvalid("config.agents", "the equilibrium command needs a non-empty agents list")
    agents = []
    for i, a in enumerate(specs):
        endow = cfg.payoff(a["endowment"], f"config.agents[{i}].endowment") if "endowment" in a else None
        agents.append(equilibrium.Agent(cfg.driver(a["driver"], f"config.agents[{i}].driver"), endow))
    tol = args.tol if args.tol is not None else float(cfg.options["tolerances"].get("equilibrium",
                                                                                   equilibrium.EQUILIBRIUM_TOL))
    supply = config.supply_field(cfg)
    rep = equilibrium.check_equilibrium(cfg.tree, agents, supply, tol=tol, rng=args.seed)
    eq = {
        "in_equilibrium": rep.in_equilibrium,
        "residual": rep.residual,
        "tolerance": tol,
        "agents": [{"value": r.value, "unique_argmax": r.unique} for r in rep.results],
    }
    write_json(os.path.join(args.out, "equilibrium.json"), eq)
    cols = {}
    for i, r in enumerate(rep.results):
        cols[f"agent{i}_pi"] = r.pi_star
    cols["net_demand"] = rep.net_demand
    write_strategies(os.path.join(args.out, "strategies.csv"), cfg.tree, cols)
    summary = _base_summary(args, cfg, "equilibrium")
    summary.update(in_equilibrium=rep.in_equilibrium, residual=rep.residual, agents=len(agents))
    write_json(os.path.join(args.out, "summary.json"), summary)
    return summary


def cmd_check(args, cfg):
    driver = cfg.driver()
    rng = np.random.default_rng(args.seed)
    report = drivers.check_balance(driver, rng=rng)
    summary = _base_summary(args, cfg, "check")
    summary.update(
        flags={"concave": driver.is_concave, "balanced": driver.is_balanced,
               "gradient": driver.has_gradient, "argmax": driver.has_argmax},
        balance={"worst_margin": report.worst_margin, "violations": report.violations,
                 "checked": report.checked, "gradient_outside_theta": report.gradient_outside},
    )
    if driver.has_gradient and driver.is_smooth:
        summary["gradient_error"] = drivers.check_gradient(driver, rng=rng)
    sol = bsde.solve(cfg.tree, driver, cfg.payoff())
    summary["residual"] = sol.residual(driver)
    summary["formula_residual"] = bsde.conditional_formulas(cfg.tree, sol).max_residual
    write_json(os.path.join(args.out, "summary.json"), summary)
    return summary


COMMANDS = {
    "solve": cmd_solve,
    "robust": cmd_robust,
    "invest": cmd_invest,
    "equilibrium": cmd_equilibrium,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latticebsde", description="Backward difference equations on lattices.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=".", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=0, help="seed for sampling-based checks")
        p.add_argument("--threads", type=int, default=1, help="recorded only; work is vectorised")
        p.add_argument("--tol", type=float, default=None, help="override the command's pass tolerance")
    return parser


def run(command: str, config_path, out_dir, seed: int = 0, threads: int = 1, tol=None) -> int:
    argv = [command, "--config", str(config_path), "--out", str(out_dir), "--seed", str(seed),
            "--threads", str(threads)]
    if tol is not None:
        argv += ["--tol", str(tol)]
    return main(argv)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = config.load(args.config)
        os.makedirs(args.out, exist_ok=True)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, LatticeBSDEError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
