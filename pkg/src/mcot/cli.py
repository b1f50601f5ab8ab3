"""Command line entry point: ``mcot {oracle,mh,pgd,rates,reduce}``.

Every subcommand reads a JSON configuration, validates it against the
bundled schema (unknown keys are rejected) before computing anything, and
writes CSV files plus a JSON summary into the output directory. The output
directory is, in order of precedence, ``$MCOT_OUTPUT_DIR``, the config key
``output_dir`` and the working directory.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem,
4 convergence or verification failure. Errors are reported on stderr as a
single JSON object.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import linprog, mh, pgd, problem, rates
from .measures import (DiscreteMeasure, DomainError, GaussianMarginal2D,
                       marginal_from_spec)
from .testfns import family_from_spec, martingale_family

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_FAILURE = 4

OUTPUT_ENV = "MCOT_OUTPUT_DIR"
EXPERIMENTS = ("pwc", "w1", "w2", "smooth", "sweep")


class CLIError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _schema(name):
    text = resources.files("mcot").joinpath(f"data/{name}").read_text()
    return json.loads(text)


def config_schema(command):
    """The JSON schema of one subcommand's configuration."""
    root = _schema("config.schema.json")
    out = dict(root["commands"][command])
    out["$defs"] = root["$defs"]
    return out


def validate_summary(summary):
    jsonschema.validate(summary, _schema("summary.schema.json"))


def load_config(path, command):
    if path is None:
        cfg = {}
    else:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise CLIError(EXIT_CONFIG, "config_unreadable", str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise CLIError(EXIT_CONFIG, "config_not_json", str(exc)) from exc
    try:
        jsonschema.validate(cfg, config_schema(command))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CLIError(EXIT_CONFIG, "schema", f"{where}: {exc.message}") from exc
    return cfg


def output_dir(cfg):
    path = os.environ.get(OUTPUT_ENV) or cfg.get("output_dir") or "."
    os.makedirs(path, exist_ok=True)
    return path


def _write(outdir, name, text, files):
    with open(os.path.join(outdir, name), "w", newline="") as fh:
        fh.write(text)
    files.append(name)


def _finish(outdir, name, summary, files):
    summary["files"] = files + [name]
    validate_summary(summary)
    _write(outdir, name, json.dumps(summary, indent=2, sort_keys=True) + "\n", [])
    return summary


# ---------------------------------------------------------------------------
# config -> objects


def _build(func, *args):
    """Run a constructor, turning domain errors into configuration errors."""
    try:
        return func(*args)
    except (DomainError, problem.StructureError, ValueError, KeyError) as exc:
        raise CLIError(EXIT_CONFIG, "invalid_value", str(exc)) from exc


def cost_from_spec(spec, n_marginals=2):
    kind = spec["kind"]
    if kind == "power":
        return problem.CostFunction.power(spec.get("p", 2.0))
    if kind == "quadratic2d":
        return problem.CostFunction.quadratic2d()
    return problem.CostFunction.coulomb(n_marginals)


def _marginals(cfg, default=None):
    specs = cfg.get("marginals")
    if specs is None:
        return list(default)
    return [_build(marginal_from_spec, s) for s in specs]


def build_pgd_problem(cfg):
    """The MCOTProblem described by a ``pgd`` configuration."""
    margs = _marginals(cfg)
    variant = cfg.get("variant", "two")
    domain = tuple(cfg.get("domain", (0.0, 1.0)))
    cost = cost_from_spec(cfg["cost"], len(margs))

    def family():
        return _build(family_from_spec, cfg["family"], domain)

    gauss = [isinstance(m, GaussianMarginal2D) for m in margs]
    if any(gauss):
        if not all(gauss) or variant != "two" or len(margs) != 2:
            raise CLIError(EXIT_CONFIG, "invalid_value",
                           "planar Gaussian marginals need the two-marginal variant")
        return _build(problem.gaussian_problem, margs[0], margs[1], family())
    if variant in ("two", "martingale") and len(margs) != 2:
        raise CLIError(EXIT_CONFIG, "invalid_value", f"variant {variant!r} needs two marginals")
    if variant == "two":
        return _build(problem.two_marginal_problem, margs[0], margs[1],
                      family(), family(), cost)
    if variant == "martingale":
        chi = martingale_family(cfg.get("N_prime", cfg["family"]["N"]), domain)
        return _build(problem.martingale_problem, margs[0], margs[1],
                      family(), family(), chi, cost)
    return _build(problem.multimarginal_problem, margs,
                  [family() for _ in margs], cost, variant == "sym")


# ---------------------------------------------------------------------------
# subcommands


def cmd_oracle(cfg, args):
    outdir = output_dir(cfg)
    fixtures = rates.compute_oracles()
    files = []
    _write(outdir, "fixtures.json",
           json.dumps(fixtures, indent=2, sort_keys=True) + "\n", files)
    summary = {"command": "oracle", "status": "ok", "entries": len(fixtures)}
    return EXIT_OK, _finish(outdir, "oracle_summary.json", summary, files)


def cmd_mh(cfg, args):
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    N = cfg["N"]
    margs = _marginals(cfg)
    cost = cost_from_spec(cfg["cost"])
    cp = _build(mh.CellProblem.from_marginals, margs[0], margs[1], N, cost)
    params = _build(mh.MHParams, cfg["beta"], cfg.get("iters", 20_000), seed,
                    cfg.get("K", 3 * N + 2))
    outdir = output_dir(cfg)
    files = []
    try:
        result = mh.run_mh(cp, params, shuffle=cfg.get("shuffle", True))
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, "invalid_value", str(exc)) from exc
    except RuntimeError as exc:
        raise CLIError(EXIT_INFEASIBLE, "infeasible", str(exc)) from exc
    if args.dump_lp:
        cells = result.best.cells
        lp = linprog.LinearProgram(cp.costs(cells), cp.constraint_matrix(cells), cp.rhs())
        _write(outdir, "mh_lp.csv", linprog.lp_to_csv(lp), files)
    _write(outdir, "mh_trace.csv", mh.mh_trace_to_csv(result.trace), files)
    _write(outdir, "mh_configuration.csv", mh.configuration_to_csv(result.best), files)
    exact, _ = mh.cell_problem_optimum(cp)
    gap = (result.best.cost - exact) / exact if exact > 0 else result.best.cost - exact
    tol = cfg.get("tolerance")
    ok = tol is None or gap <= tol
    summary = {"command": "mh", "status": "ok" if ok else "not_converged", "seed": seed,
               "best_cost": result.best.cost, "final_cost": result.final.cost,
               "exact_cost": exact, "relative_gap": gap,
               "max_residual": result.max_residual, "accepted": result.accepted,
               "infeasible": result.infeasible, "iterations": params.iterations}
    summary = _finish(outdir, "mh_summary.json", summary, files)
    return (EXIT_OK if ok else EXIT_FAILURE), summary


def cmd_pgd(cfg, args):
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    prob = build_pgd_problem(cfg)
    params = _build(lambda: pgd.PGDParams(eta_inv=cfg["eta_inv"],
                                          max_iter=cfg.get("iters", 10_000),
                                          tol=cfg.get("tol", 1e-6), seed=seed))
    if prob.martingale is not None:
        # convex order is not implied by the moment targets; check up front
        try:
            problem.check_admissible(prob)
        except problem.InadmissibleError as exc:
            raise CLIError(EXIT_INFEASIBLE, "infeasible", str(exc)) from exc
    outdir = output_dir(cfg)
    files = []
    try:
        result = pgd.pgd_run(prob, params, K=cfg.get("K"))
    except problem.StructureError as exc:
        raise CLIError(EXIT_CONFIG, "invalid_value", str(exc)) from exc
    _write(outdir, "pgd_trace.csv", pgd.trace_to_csv(result.trace), files)
    _write(outdir, "pgd_state.csv", pgd.state_to_csv(prob, result.state), files)
    last = result.trace[-1]
    summary = {"command": "pgd", "status": "ok" if result.converged else "not_converged",
               "seed": seed, "converged": result.converged, "message": result.message,
               "iterations": result.iterations, "F": float(last[1]),
               "cost": float(last[2]), "penalty": float(last[3]),
               "max_residual": result.residual.max_abs,
               "martingale_residual": result.residual.martingale_max_abs}
    summary = _finish(outdir, "pgd_summary.json", summary, files)
    return (EXIT_OK if result.converged else EXIT_FAILURE), summary


def _run_experiment(name, cfg):
    Ns = cfg["N"]
    if name == "smooth":
        margs = _marginals(cfg, default=rates.bundled_pair()[:1])
        return rates.smooth_moment_bound(margs[0], Ns, cfg.get("p", 1))
    margs = _marginals(cfg, default=rates.bundled_pair())
    if len(margs) != 2:
        raise CLIError(EXIT_CONFIG, "invalid_value", f"experiment {name!r} needs two marginals")
    mu, nu = margs
    cost = cost_from_spec(cfg.get("cost", {"kind": "power", "p": 1}))
    if name == "pwc":
        return rates.pwc_sandwich(mu, nu, cost, Ns, K=cfg.get("K"))
    if name == "w1":
        return rates.affine_w1_rate(mu, nu, Ns)
    if name == "w2":
        return rates.affine_w2_rate(mu, nu, Ns)
    return rates.convergence_sweep(mu, nu, cost, Ns)


def cmd_rates(cfg, args):
    name = args.experiment
    outdir = output_dir(cfg)
    files = []
    drift = []
    if cfg.get("check_fixtures", True):
        drift = rates.check_fixtures(rates.load_fixtures())
    rep = _build(_run_experiment, name, cfg)
    _write(outdir, f"rates_{name}.csv", rep.to_csv(), files)
    summary = dict(rep.summary())
    summary["experiment"] = name
    ok = summary["pass"] and not drift
    summary.update({"command": "rates", "status": "ok" if ok else "failed",
                    "fixture_drift": drift})
    summary = _finish(outdir, f"rates_{name}_summary.json", summary, files)
    return (EXIT_OK if ok else EXIT_FAILURE), summary


def cmd_reduce(cfg, args):
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if "measure" in cfg:
        spec = cfg["measure"]
        w = np.asarray(spec["weights"], dtype=float)
        if w.sum() <= 0.0 or len(spec["points"]) != w.size:
            raise CLIError(EXIT_CONFIG, "invalid_value",
                           "measure needs one positive-mass weight per point")
        measure = DiscreteMeasure(np.asarray(spec["points"], dtype=float), w / w.sum())
    else:
        rng = np.random.default_rng(seed)
        K = cfg.get("random_atoms", 100)
        measure = DiscreteMeasure(rng.random((K, 2)), rng.dirichlet(np.ones(K)))
    fx, fy = (_build(family_from_spec, s) for s in cfg["families"])
    if fx.dim != 1 or fy.dim != 1:
        raise CLIError(EXIT_CONFIG, "invalid_value", "reduce works with one-dimensional families")
    cost = cost_from_spec(cfg["cost"]) if "cost" in cfg else None

    def lam(z):
        return np.hstack([np.ones((z.shape[0], 1)), fx.values(z[:, 0]), fy.values(z[:, 1])])

    def cost_eval(z):
        return cost.evaluate([z[:, :1], z[:, 1:]])

    out = linprog.tchakaloff_reduce(measure, lam, cost_eval if cost else None)

    def moments(m):
        vals = m.integrate(lam)
        return np.append(vals, m.integrate(cost_eval)) if cost else vals

    err = float(np.max(np.abs(moments(out) - moments(measure))))
    outdir = output_dir(cfg)
    files = []
    _write(outdir, "reduce_measure.csv", out.to_csv(), files)
    summary = {"command": "reduce", "status": "ok", "seed": seed,
               "atoms_in": measure.size, "atoms_out": out.size,
               "moment_count": int(1 + fx.size + fy.size + (cost is not None)),
               "max_moment_error": err}
    return EXIT_OK, _finish(outdir, "reduce_summary.json", summary, files)


COMMANDS = {"oracle": cmd_oracle, "mh": cmd_mh, "pgd": cmd_pgd,
            "rates": cmd_rates, "reduce": cmd_reduce}


def build_parser():
    parser = argparse.ArgumentParser(prog="mcot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "oracle",
                       help="JSON configuration file")
        if name in ("mh", "pgd", "reduce"):
            p.add_argument("--seed", type=int, default=None,
                           help="override the seed of the configuration")
        if name == "mh":
            p.add_argument("--dump-lp", action="store_true",
                           help="also write the weight LP of the best configuration "
                                "as CSV [A | b]")
        if name == "rates":
            p.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.command)
        code, summary = COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        json.dump({"error": exc.kind, "message": str(exc), "exit_code": exc.code},
                  sys.stderr)
        sys.stderr.write("\n")
        return exc.code
    json.dump(summary, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
