"""Command-line interface: ``addgp {simulate, fit, summarize, coverage, hyperopt}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 dimension mismatch. ``ADDGP_LOG`` sets the log level (default WARNING).
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .errors import (
    AddgpError, ConfigError, DegenerateResidualCovariance, DimensionMismatch, EmptyDraws, GridMismatch,
    HessianNotPD, InsufficientDraws, InvalidDimensions, InvalidDof, InvalidReference,
    InvalidSpec, MapFailed, NotFactorizable, NotSymmetric,
)
from .hyperopt import MarginalObjective, optimize
from .model import build_grid, build_model
from .simulate import coverage, coverage_ratio, simulate_sim1, simulate_sim2
from .transforms import _ref_index, augment
from .uncollapse import run_cu_sampler, run_naddgp_baseline

log = logging.getLogger("addgp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIMENSION = 0, 2, 3, 4

_CONFIG_ERRORS = (ConfigError, InvalidSpec, InvalidReference, InvalidDof, InvalidDimensions,
                  EmptyDraws, InsufficientDraws, FileNotFoundError)
_DIMENSION_ERRORS = (DimensionMismatch, GridMismatch)
_NUMERIC_ERRORS = (NotFactorizable, NotSymmetric, HessianNotPD, MapFailed,
                   DegenerateResidualCovariance, np.linalg.LinAlgError, MemoryError)

SIM_KEYS = {
    "sim1": {"simulation", "D", "N", "seed", "depth", "variant", "noisy", "fit_prior",
             "batch_effect", "intercept"},
    "sim2": {"simulation", "seed", "depth", "m", "s", "alpha", "literal_warp"},
}


def _parse_levels(text):
    try:
        levels = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}", field="--levels") from exc
    if not levels or any(not 0 < l < 1 for l in levels):
        raise ConfigError("levels must lie strictly between 0 and 1", field="--levels")
    return levels


def _level_tag(level):
    return f"{level * 100:g}"


def summarize_array(arr, levels):
    """Rows of ``(d, n, mean, lo*, hi*)`` over the draw axis of ``arr``."""
    arr = np.asarray(arr, dtype=float)
    if arr.shape[0] == 0:
        raise EmptyDraws("no draws to summarize")
    mean = arr.mean(axis=0)
    qs = {}
    for lev in levels:
        a = 0.5 * (1 - lev)
        qs[lev] = np.quantile(arr, [a, 1 - a], axis=0)
    rows = []
    for d in range(mean.shape[0]):
        for n in range(mean.shape[1]):
            r = {"d": d, "n": n, "mean": float(mean[d, n])}
            for lev in levels:
                r["lo" + _level_tag(lev)] = float(qs[lev][0][d, n])
                r["hi" + _level_tag(lev)] = float(qs[lev][1][d, n])
            rows.append(r)
    return rows


def _clr_matrix(P, ref):
    """Linear map ``(D x P)`` from ALR to CLR coordinates."""
    D = P + 1
    E = augment(np.eye(P), ref)
    return (np.eye(D) - np.full((D, D), 1.0 / D)) @ E


def to_clr(name, arr, ref):
    """Convert a family of ALR draws to CLR (``Sigma`` transforms on both sides)."""
    P = arr.shape[1]
    T = _clr_matrix(P, _ref_index(ref, P + 1))
    if name == "Sigma":
        return T @ arr @ T.T
    return np.einsum("dp,spn->sdn", T, arr)


def write_summaries(out_dir, families, levels, coords, ref):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["d", "n", "mean"] + [f"{s}{_level_tag(l)}" for l in levels for s in ("lo", "hi")]
    written = []
    for name, arr in families.items():
        if coords == "clr" and name != "offset":
            arr = to_clr(name, arr, ref)
        io.write_table(out / f"summary_{name}.csv", summarize_array(arr, levels), cols)
        written.append(name)
    return written


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args):
    cfg = io.read_json(args.config)
    kind = cfg.get("simulation", "sim1")
    if kind not in SIM_KEYS:
        raise ConfigError(f"unknown simulation {kind!r}", field="simulation")
    unknown = set(cfg) - SIM_KEYS[kind]
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)}", field=sorted(unknown)[0])
    params = {k: v for k, v in cfg.items() if k != "simulation"}
    if args.seed is not None:
        params["seed"] = args.seed
    try:
        truth = simulate_sim1(**params) if kind == "sim1" else simulate_sim2(**params)
    except TypeError as exc:
        raise ConfigError(str(exc), field="simulation") from exc
    except ValueError as exc:
        if isinstance(exc, AddgpError):
            raise
        raise ConfigError(str(exc), field="simulation") from exc

    out = Path(args.out)
    (out / "truth" / "centered").mkdir(parents=True, exist_ok=True)
    samples = [f"s{n + 1}" for n in range(truth.N)]
    io.write_counts(out / "counts.csv", truth.Y, samples=samples)
    io.write_covariates(out / "covariates.csv", truth.covariates, samples)
    io.write_json(out / "model.json", truth.model_config)
    io.write_matrix_long(out / "truth" / "H.csv", truth.H_true)
    io.write_matrix_long(out / "truth" / "F.csv", truth.F_true)
    io.write_matrix_long(out / "truth" / "Sigma.csv", truth.Sigma)
    for name, f in truth.components.items():
        io.write_matrix_long(out / "truth" / f"{name}.csv", f)
    for name, f in truth.centered_components().items():
        io.write_matrix_long(out / "truth" / "centered" / f"{name}.csv", f)
    io.write_json(out / "manifest.json", {
        "command": "simulate", "version": __version__, "seed": truth.generator_params["seed"],
        "config_hash": io.digest(io.canonical_json(cfg)),
        "generator": truth.generator_params, "D": truth.D, "N": truth.N,
        "components": sorted(truth.components),
    })
    return EXIT_OK


def _load_inputs(args):
    Y, taxa, samples = io.read_counts(args.counts)
    cov = io.read_covariates(args.covariates, samples) if args.covariates else {}
    config = io.read_json(args.model)
    model = build_model(config, Y.shape[0], cov, Y.shape[1])
    grid = build_grid(model, (config.get("grid") or {}).get("covariates"))
    hashes = {
        "config_hash": io.digest(io.canonical_json(config)),
        "counts_hash": io.digest(Path(args.counts).read_bytes()),
        "covariates_hash": io.digest(Path(args.covariates).read_bytes()) if args.covariates else None,
    }
    return Y, taxa, samples, config, model, grid, hashes


def _run_hyperopt(Y, model, config, rng):
    opts = dict(config.get("hyperopt") or {})
    strategy = opts.pop("strategy", "bo")
    allowed = {"budget", "n_init", "n_iter", "kappa", "n_restarts"}
    unknown = set(opts) - allowed
    if unknown:
        raise ConfigError(f"unknown option(s) {sorted(unknown)}", field="hyperopt")
    obj = MarginalObjective(Y, model)
    state = optimize(obj, strategy=strategy, rng=rng, **opts)
    summary = {"strategy": strategy, "evaluations": len(state.trace),
               "best_objective": state.best_objective, "budget_exhausted": state.budget_exhausted}
    return model.with_params(state.values), state, summary


def cmd_fit(args):
    t_start = time.perf_counter()
    Y, taxa, samples, config, model, grid, hashes = _load_inputs(args)
    ss = np.random.SeedSequence(args.seed)
    rng_h, rng_s = (np.random.default_rng(s) for s in ss.spawn(2))
    timings = {"load": time.perf_counter() - t_start}

    hyper_summary = None
    if model.free_params():
        t0 = time.perf_counter()
        model, _, hyper_summary = _run_hyperopt(Y, model, config, rng_h)
        timings["hyperopt"] = time.perf_counter() - t0
        log.info("hyperparameters: %s", model.hyper_values())

    center = not args.no_center
    t0 = time.perf_counter()
    if args.baseline == "naddgp":
        draws = run_naddgp_baseline(Y, model, grid, args.draws, rng_s, center=center)
    else:
        map_opts = config.get("map") or {}
        draws = run_cu_sampler(Y, model, grid, args.draws, rng_s, center=center, map_opts=map_opts)
    timings["sampler"] = time.perf_counter() - t0
    timings.update({f"sampler.{k}": v for k, v in draws.timings.items()})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    families = io.write_draws(out, draws)
    eval_rows = [{"n": n, "observed": int(n < model.N),
                  "sample_id": samples[n] if n < model.N else f"grid{n - model.N + 1}",
                  **{f"x_{name}": float(draws.x_eval[q, n]) for q, name in enumerate(model.x_names)}}
                 for n in range(draws.x_eval.shape[1])]
    eval_cols = ["n", "observed", "sample_id"] + [f"x_{nm}" for nm in model.x_names]
    io.write_table(out / "eval_points.csv", eval_rows, eval_cols)
    levels = _parse_levels(args.levels)
    fam_arrays = io.draws_families(draws)
    write_summaries(out / f"summary_{args.coords}", fam_arrays, levels, args.coords, model.reference)
    timings["write"] = time.perf_counter() - t0

    manifest = {
        "command": "fit", "version": __version__, "seed": args.seed, "draws": args.draws,
        "method": draws.method, **hashes,
        "omega_hat": model.hyper_values(),
        "standardization": {k: list(v) for k, v in model.standardization.items()},
        "map": draws.diagnostics, "hyperopt": hyper_summary,
        "reference": _ref_index(model.reference, model.D), "taxa": taxa,
        "centered": draws.centered, "has_offset": draws.offset is not None,
        "families": families, "components": [c.name for c in model.components],
        "x_names": list(model.x_names),
        "n_observed": model.N, "n_eval": int(draws.x_eval.shape[1]),
        "eval_digest": io.digest(io.canonical_json(draws.x_eval.tolist()), model.N),
        "threads": args.threads,
    }
    io.write_json(out / "manifest.json", manifest)
    if args.timings:
        io.write_json(out / "timings.json", timings)
    log.info("timings: %s", {k: round(v, 3) for k, v in timings.items()})
    return EXIT_OK


def cmd_summarize(args):
    families, manifest = io.read_draws(args.draws)
    levels = _parse_levels(args.levels)
    out = Path(args.out) if args.out else Path(args.draws) / f"summary_{args.coords}"
    write_summaries(out, families, levels, args.coords, manifest.get("reference"))
    return EXIT_OK


def _coverage_targets(families, manifest):
    names = ["linear"] + [f"f_{c}" for c in manifest.get("components", [])] + ["F"]
    return [n for n in names if n in families]


def cmd_coverage(args):
    multi, man_m = io.read_draws(args.multi)
    base, man_b = io.read_draws(args.naddgp)
    if man_m.get("eval_digest") != man_b.get("eval_digest"):
        raise GridMismatch("the two fits were evaluated on different points")
    truth_dir = Path(args.truth)
    N = man_m["n_observed"]
    rows = []
    for fam in _coverage_targets(multi, man_m):
        tname = fam[2:] if fam.startswith("f_") else fam
        centered = man_m.get("centered") and fam != "F"
        tpath = truth_dir / ("centered" if centered else "") / f"{tname}.csv"
        if not tpath.exists():
            raise ConfigError(f"no truth table for {tname!r}", field=str(tpath))
        tv = io.read_matrix_long(tpath)
        if tv.shape != multi[fam].shape[1:2] + (N,) or fam not in base:
            raise GridMismatch(f"truth for {tname!r} has shape {tv.shape}, draws cover "
                               f"{multi[fam].shape[1:2] + (N,)}")
        cm = coverage(multi[fam][:, :, :N], tv, args.level)
        cb = coverage(base[fam][:, :, :N], tv, args.level)
        rows.append({"component": tname, "coverage_multi": cm, "coverage_naddgp": cb,
                     "log2_ratio": coverage_ratio(cm, cb)})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_table(out, rows, ["component", "coverage_multi", "coverage_naddgp", "log2_ratio"])
    return EXIT_OK


def cmd_hyperopt(args):
    Y, _, _, config, model, _, _ = _load_inputs(args)
    obj = MarginalObjective(Y, model)
    result = {"values": model.hyper_values()}
    if args.optimize:
        if not model.free_params():
            raise ConfigError("no free hyperparameters declared", field="hyperparameters")
        model, state, summary = _run_hyperopt(Y, model, config, np.random.default_rng(args.seed))
        result = {"values": model.hyper_values(), **summary,
                  "trace": [{"values": v, "objective": f} for v, f in state.trace]}
    else:
        values = {n: model.hyper[n].value for n in model.free_params()}
        result["objective"] = obj(values)
        result["log_marginal_laplace"] = obj.log_evidence(values)
    text = io.canonical_json(result)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="addgp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = bit-exact)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulated data set")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)

    def data_args(sp):
        sp.add_argument("--counts", required=True)
        sp.add_argument("--covariates")
        sp.add_argument("--model", required=True)

    f = sub.add_parser("fit", help="fit the model and write posterior draws")
    data_args(f)
    f.add_argument("--out", required=True)
    f.add_argument("--draws", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--baseline", choices=["naddgp"], default=None)
    f.add_argument("--no-center", action="store_true")
    f.add_argument("--levels", default="0.5,0.95")
    f.add_argument("--coords", choices=["alr", "clr"], default="alr")
    f.add_argument("--timings", action="store_true", help="also write timings.json")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("summarize", help="posterior means and credible intervals")
    m.add_argument("--draws", required=True)
    m.add_argument("--levels", default="0.5,0.95")
    m.add_argument("--coords", choices=["alr", "clr"], default="alr")
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize)

    c = sub.add_parser("coverage", help="compare credible-interval coverage of two fits")
    c.add_argument("--multi", required=True)
    c.add_argument("--naddgp", required=True)
    c.add_argument("--truth", required=True)
    c.add_argument("--level", type=float, default=0.95)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_coverage)

    h = sub.add_parser("hyperopt", help="evaluate (or optimize) the marginal-likelihood objective")
    data_args(h)
    h.add_argument("--optimize", action="store_true")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out")
    h.set_defaults(func=cmd_hyperopt)
    return p


def _run(args):
    if args.threads is not None and args.threads > 0:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    return args.func(args)


def main(argv=None):
    level = os.environ.get("ADDGP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except _DIMENSION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
