"""Command-line front end: design checks, simulation, oracle identification,
posterior fitting, and power sweeps.

All configs are JSON with a versioned ``schema`` field; datasets are
RFC-4180 CSV with LF endings.  Every command is deterministic given its
config and seed and emits a run manifest listing its outputs.  Exit codes:
0 success, 2 domain failure (check failed, identification hypotheses
violated), 64 usage or format error, 70 internal numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .design import check_design, minimum_design
from .inference import McmcOptions, decide, sample_posterior
from .linalg import CpDecompositionError
from .oracle import (
    IdentificationError,
    PopulationParams,
    forward_probabilities,
    identify_from_population,
)
from .power import available_jobs, default_rule, power_study
from .simulate import gen_params, scenario_config, simulate_dataset
from .strata import TrialShape

EXIT_OK = 0
EXIT_DOMAIN = 2
EXIT_USAGE = 64
EXIT_NUMERIC = 70


class UsageError(Exception):
    pass


class DomainFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical_json(obj).encode("utf-8")).hexdigest()


def write_manifest(path: str, command: str, config, seed, outputs, started):
    manifest = {
        "schema": "strata-id/manifest-v1",
        "command": command,
        "config_hash": config_hash(config),
        "master_seed": seed,
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        "outputs": sorted(outputs),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc}") from exc


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise UsageError(f"{path}: missing required key {key!r}")
    return doc[key]


def _check_overwrite(paths, force: bool):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise UsageError(
            "refusing to overwrite existing outputs (use --force): "
            + ", ".join(existing)
        )


# ---------------------------------------------------------------------------
# Parameter (de)serialization
# ---------------------------------------------------------------------------


def params_to_json(params: PopulationParams) -> dict:
    beta = np.where(np.isnan(params.beta), None, params.beta)
    return {
        "schema": "strata-id/params-v1",
        "theta": params.theta.tolist(),
        "a": params.a.tolist(),
        "beta": beta.tolist(),
        "sn_s": params.sn_s,
        "sp_s": params.sp_s,
        "sn_y": params.sn_y,
        "sp_y": params.sp_y,
        "x_dist": params.x_dist.tolist(),
        "z_dist": params.z_dist.tolist(),
        "r_dist": params.r_dist.tolist(),
    }


def params_from_json(doc: dict, path: str = "params") -> PopulationParams:
    try:
        beta = np.array(
            _require(doc, "beta", path), dtype=float
        )  # null entries become nan
        return PopulationParams(
            theta=np.asarray(_require(doc, "theta", path), dtype=float),
            a=np.asarray(_require(doc, "a", path), dtype=float),
            beta=beta,
            sn_s=float(doc.get("sn_s", 1.0)),
            sp_s=float(doc.get("sp_s", 1.0)),
            sn_y=float(doc.get("sn_y", 1.0)),
            sp_y=float(doc.get("sp_y", 1.0)),
            x_dist=doc.get("x_dist"),
            z_dist=doc.get("z_dist"),
            r_dist=doc.get("r_dist"),
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    started = time.time()
    doc = _load_json(args.design)
    if "generate" in doc:
        gen = doc["generate"]
        config = scenario_config(
            _require(gen, "scenario", args.design), n=10,
            seed=int(gen.get("seed", 0)),
        )
        params = gen_params(config).population
        p_a = params.a[:, 0, :].T
        p_sr = params.theta[:, 0, :].T
        sn_s, sp_s = params.sn_s, params.sp_s
        theorem = gen.get("theorem", "T2")
    else:
        p_a = np.asarray(_require(doc, "p_a_given_strata", args.design), float)
        p_sr = np.asarray(_require(doc, "p_strata_given_r", args.design), float)
        sn_s = float(doc.get("sn_s", 1.0))
        sp_s = float(doc.get("sp_s", 1.0))
        theorem = doc.get("theorem", "T2")
    try:
        report = check_design(p_a, p_sr, sn_s, sp_s, theorem)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = report.to_dict()
    result["schema"] = "strata-id/design-report-v1"
    result["minimum_design"] = dict(
        zip(("min_sites", "min_covariate_levels"), minimum_design(report.n_z))
    )
    out = args.out or "report.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out + ".manifest.json", "check", doc, None, [out], started)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_DOMAIN


def cmd_simulate(args) -> int:
    started = time.time()
    doc = _load_json(args.config)
    if doc.get("schema", "strata-id/sim-config-v1") != "strata-id/sim-config-v1":
        raise UsageError(f"{args.config}: unsupported schema {doc.get('schema')!r}")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    try:
        config = scenario_config(
            _require(doc, "scenario", args.config),
            n=int(_require(doc, "n", args.config)),
            seed=seed,
            measure_a_with_error=bool(doc.get("measure_a_with_error", False)),
            null_effect=bool(doc.get("null_effect", False)),
            oracle_fields=args.oracle or bool(doc.get("oracle_fields", False)),
        )
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    dataset_path = os.path.join(args.out, "dataset.csv")
    params_path = os.path.join(args.out, "params.json")
    _check_overwrite([dataset_path, params_path], args.force)

    generated = gen_params(config)
    dataset = simulate_dataset(generated.population, config)
    with open(dataset_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dataset.to_csv())
    with open(params_path, "w", encoding="utf-8") as fh:
        json.dump(params_to_json(generated.population), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(
        os.path.join(args.out, "manifest.json"),
        "simulate",
        config.to_dict(),
        seed,
        [dataset_path, params_path],
        started,
    )
    print(f"wrote {dataset_path} ({dataset.n} rows) and {params_path}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    started = time.time()
    doc = _load_json(args.params)
    params = params_from_json(doc, args.params)
    heterogeneous = params.n_x > 1 and (
        np.ptp(params.theta, axis=1).max() > 1e-12
        or np.ptp(params.a, axis=1).max() > 1e-12
    )
    if heterogeneous:
        # the factorization holds per pretreatment level, so identify each
        # level from its own conditional cells
        from .oracle import identify_heterogeneous

        levels, combined = identify_heterogeneous(
            params, sn_y=args.sn_y, seed=args.seed
        )
        result = {
            "schema": "strata-id/identified-v1",
            "per_level": [lv.to_dict() for lv in levels],
            "combined": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in combined.items()
            },
        }
        headline = (
            f"levels={len(levels)} sn_S={combined['sn_S']:.4f} "
            f"sp_S={combined['sp_S']:.4f} sp_Y={combined['sp_Y']:.4f}"
        )
    else:
        cells = forward_probabilities(params)
        identified = identify_from_population(
            cells,
            params.n_z,
            params.n_a,
            params.n_r,
            sn_y=args.sn_y,
            r_dist=params.r_dist,
            seed=args.seed,
        )
        result = identified.to_dict()
        result["schema"] = "strata-id/identified-v1"
        headline = (
            f"mode={identified.mode} residual={identified.rel_residual:.3e} "
            f"sn_S={identified.sn_s_hat:.4f} sp_S={identified.sp_s_hat:.4f} "
            f"sp_Y={identified.sp_y_hat:.4f}"
        )
    out = args.out or "identified.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out + ".manifest.json", "oracle", doc, args.seed, [out], started)
    print(f"{headline} -> {out}")
    return EXIT_OK


def _load_fit_data(path: str):
    if path.endswith(".json"):
        doc = _load_json(path)
        if doc.get("schema") != "strata-id/cells-v1":
            raise UsageError(f"{path}: expected schema strata-id/cells-v1")
        shape_doc = _require(doc, "shape", path)
        shape = TrialShape(
            n_z=int(shape_doc["n_z"]),
            n_r=int(shape_doc["n_r"]),
            n_a=int(shape_doc["n_a"]),
            n_x=int(shape_doc.get("n_x", 1)),
        )
        counts = np.asarray(_require(doc, "counts", path), dtype=np.int64)
        expected = (2, 2, shape.n_a, shape.n_z, shape.n_r, shape.n_x)
        if counts.shape != expected:
            raise UsageError(
                f"{path}: counts shape {counts.shape} != expected {expected}"
            )
        return counts, shape
    from .simulate import TrialDataset

    try:
        with open(path, "r", encoding="utf-8") as fh:
            dataset = TrialDataset.from_csv(fh.read())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    shape = TrialShape(
        n_z=int(dataset.z.max()),
        n_r=int(dataset.r.max()),
        n_a=int(dataset.a_obs.max()),
        n_x=int(dataset.x.max()),
    )
    return dataset.cell_counts(shape), shape


def cmd_fit(args) -> int:
    started = time.time()
    counts, shape = _load_fit_data(args.data)
    kernel = None
    if args.a_error_kernel:
        kern_doc = _load_json(args.a_error_kernel)
        kernel = np.asarray(_require(kern_doc, "kernel", args.a_error_kernel), float)
    priors_doc = _load_json(args.priors) if args.priors else None
    if priors_doc:
        _apply_prior_overrides(priors_doc, args.priors)
    options = McmcOptions(
        chains=args.chains,
        warmup=args.warmup,
        iters=args.iters,
        seed=args.seed,
        slice_every=args.slice_every,
        chain_workers=available_jobs(args.chains),
    )
    fit = sample_posterior(
        counts, shape, options, a_error_kernel=kernel,
        allow_unidentified=args.allow_unidentified,
    )
    rule = default_rule("two_arm_severe", shape.n_z)
    decision = decide(fit, rule)
    summary = fit.summary()
    summary["schema"] = "strata-id/fit-v1"
    summary["decision"] = decision
    summary["shape"] = {
        "n_z": shape.n_z, "n_r": shape.n_r, "n_a": shape.n_a, "n_x": shape.n_x
    }
    out = args.out or "fit.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [out]
    if args.draws_out:
        np.savez_compressed(args.draws_out, draws=fit.draws)
        outputs.append(args.draws_out)
    write_manifest(
        out + ".manifest.json", "fit",
        {"data": os.path.basename(args.data), "chains": args.chains,
         "iters": args.iters, "warmup": args.warmup},
        args.seed, outputs, started,
    )
    print(
        f"max_rhat={fit.diagnostics['max_rhat']:.3f} "
        f"posterior_prob={decision['posterior_prob']:.3f} "
        f"reject={decision['reject']} -> {out}"
    )
    return EXIT_OK


def _apply_prior_overrides(doc: dict, path: str):
    from . import inference

    for name, spec in doc.items():
        if name == "schema":
            continue
        if name not in inference.MISCLASS_PRIORS:
            raise UsageError(
                f"{path}: unknown prior {name!r} "
                f"(overridable: {sorted(inference.MISCLASS_PRIORS)})"
            )
        support = spec.get("support", inference.MISCLASS_PRIORS[name][:2])
        shape_ab = spec.get("shape", inference.MISCLASS_PRIORS[name][2:])
        inference.MISCLASS_PRIORS[name] = (
            float(support[0]), float(support[1]),
            float(shape_ab[0]), float(shape_ab[1]),
        )


def cmd_power(args) -> int:
    started = time.time()
    try:
        n_grid = [int(tok) for tok in args.n_grid.split(",") if tok]
    except ValueError as exc:
        raise UsageError(f"--n-grid must be comma-separated integers: {exc}") from exc
    if not n_grid:
        raise UsageError("--n-grid is empty")
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    rule = None  # resolved per scenario unless forced
    if args.rule == "transmission":
        from .inference import transmission_rule

        rule = transmission_rule()
    elif args.rule == "severe":
        from .inference import severe_rule

        probe = scenario_config(args.scenario, n=10, seed=0)
        rule = severe_rule(probe.shape.n_z)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "power.csv")
    reps_path = os.path.join(args.out, "replicates.json")
    _check_overwrite([csv_path, reps_path], args.force)

    mcmc = McmcOptions(
        chains=args.chains, warmup=args.warmup, iters=args.iters,
        slice_every=args.slice_every,
    )
    result = power_study(
        args.scenario,
        n_grid,
        args.reps,
        rule=rule,
        jobs=args.jobs,
        master_seed=args.seed,
        mcmc=mcmc,
        measure_a_with_error=args.a_error,
        null_effect=args.null,
    )
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(result.to_csv())
    reps = [
        {
            "n": r.n, "replicate": r.replicate, "seed": r.seed,
            "reject": r.reject, "posterior_prob": r.posterior_prob,
            "true_values": r.true_values, "ci_low": r.ci_low,
            "ci_high": r.ci_high, "covered": r.covered,
            "max_rhat": r.max_rhat, "failed": r.failed, "error": r.error,
        }
        for r in result.replicates
    ]
    with open(reps_path, "w", encoding="utf-8") as fh:
        json.dump(reps, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(
        os.path.join(args.out, "manifest.json"),
        "power",
        {"scenario": args.scenario, "n_grid": n_grid, "reps": args.reps,
         "rule": args.rule, "null": args.null, "a_error": args.a_error,
         "chains": args.chains, "warmup": args.warmup, "iters": args.iters,
         "slice_every": args.slice_every},
        args.seed,
        [csv_path, reps_path],
        started,
    )
    print(result.to_csv(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="strata-id",
        description="Design, simulate, identify, and analyze multi-arm "
        "vaccine-efficacy trials with misclassified outcomes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="check identifiability of a design")
    p.add_argument("design", help="design JSON (matrices or generate block)")
    p.add_argument("--out", help="report path (default report.json)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("simulate", help="simulate a trial dataset")
    p.add_argument("config", help="sim-config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite outputs")
    p.add_argument(
        "--oracle", action="store_true", help="include hidden-truth columns"
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="identify parameters from population cells")
    p.add_argument("params", help="population-params JSON")
    p.add_argument("--out", help="output path (default identified.json)")
    p.add_argument("--sn-y", type=float, default=None, dest="sn_y",
                   help="treat the outcome-test sensitivity as known")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit", help="fit the Bayesian model to trial data")
    p.add_argument("data", help="dataset CSV or cell-count JSON")
    p.add_argument("--priors", help="prior-overrides JSON")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=6000)
    p.add_argument("--iters", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slice-every", type=int, default=1, dest="slice_every")
    p.add_argument("--a-error-kernel", dest="a_error_kernel",
                   help="JSON with the covariate misreading kernel")
    p.add_argument("--allow-unidentified", action="store_true")
    p.add_argument("--out", help="fit summary path (default fit.json)")
    p.add_argument("--draws-out", dest="draws_out",
                   help="optional compressed draws archive (.npz)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("power", help="Monte Carlo power / Type-I study")
    p.add_argument("scenario", choices=(
        "two_arm_severe", "three_arm_severe", "two_arm_transmission"))
    p.add_argument("--n-grid", required=True, dest="n_grid",
                   help="comma-separated sample sizes")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--rule", choices=("auto", "severe", "transmission"),
                   default="auto",
                   help="decision rule (auto matches the scenario)")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel replicates (default: available cores, "
                   "capped by STRATA_ID_THREADS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--null", action="store_true",
                   help="simulate under no efficacy against the outcome")
    p.add_argument("--a-error", action="store_true", dest="a_error",
                   help="record the covariate through the misreading kernel")
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--warmup", type=int, default=800)
    p.add_argument("--iters", type=int, default=1200)
    p.add_argument("--slice-every", type=int, default=2, dest="slice_every")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_power)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainFailure, IdentificationError) as exc:
        print(f"domain failure: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"domain failure: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (CpDecompositionError, np.linalg.LinAlgError, FloatingPointError,
            RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
