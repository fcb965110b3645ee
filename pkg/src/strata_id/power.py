"""Monte Carlo power and Type-I-error studies over simulated trials.

Each replicate draws a fresh design from the scenario protocol, simulates a
trial of the requested size, fits the posterior, and applies the decision
rule; power is the rejection fraction with a Wilson score interval.
Replicates run in parallel processes, each on its own seed stream derived
from the master seed and replicate index, so partial runs are resumable and
reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .inference import (
    DecisionRule,
    McmcOptions,
    decide,
    sample_posterior,
    severe_rule,
    transmission_rule,
)
from .oracle import ve_estimands
from .simulate import gen_params, scenario_config, simulate_dataset

POWER_CSV_COLUMNS = (
    "trial",
    "measurements",
    "n",
    "replicates",
    "rejections",
    "power",
    "ci_lo",
    "ci_hi",
    "na",
)


def default_rule(scenario: str, n_z: int) -> DecisionRule:
    if scenario == "two_arm_transmission":
        return transmission_rule()
    return severe_rule(n_z)


def wilson_interval(successes: int, total: int, level: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if total == 0:
        return (float("nan"), float("nan"))
    from scipy import stats

    z = stats.norm.ppf(0.5 + level / 2.0)
    phat = successes / total
    denom = 1.0 + z**2 / total
    center = (phat + z**2 / (2 * total)) / denom
    half = (
        z * math.sqrt(phat * (1.0 - phat) / total + z**2 / (4 * total**2)) / denom
    )
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class ReplicateResult:
    """Outcome of one simulate-fit-decide replicate."""

    n: int
    replicate: int
    seed: int
    reject: bool
    posterior_prob: float
    true_values: dict
    ci_low: dict
    ci_high: dict
    covered: dict
    max_rhat: float
    failed: bool = False
    error: str = ""


@dataclass
class PowerRow:
    trial: str
    measurements: str
    n: int
    replicates: int
    rejections: int
    power: float
    ci_lo: float
    ci_hi: float
    na: int


@dataclass
class PowerStudyResult:
    rows: list[PowerRow] = field(default_factory=list)
    replicates: list[ReplicateResult] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(POWER_CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [
                    row.trial,
                    row.measurements,
                    row.n,
                    row.replicates,
                    row.rejections,
                    f"{row.power:.4f}",
                    f"{row.ci_lo:.4f}",
                    f"{row.ci_hi:.4f}",
                    row.na,
                ]
            )
        return buf.getvalue()


def replicate_seed(master_seed: int, n: int, replicate: int) -> int:
    """Deterministic per-replicate seed; documented so runs are resumable."""
    return int(
        np.random.SeedSequence([master_seed, n, replicate]).generate_state(1)[0]
    )


def run_replicate(
    scenario: str,
    n: int,
    replicate: int,
    master_seed: int,
    rule: DecisionRule,
    mcmc: McmcOptions,
    measure_a_with_error: bool = False,
    null_effect: bool = False,
) -> ReplicateResult:
    """Simulate one trial under a fresh design draw, fit it, apply the rule."""
    seed = replicate_seed(master_seed, n, replicate)
    try:
        config = scenario_config(
            scenario,
            n=n,
            seed=seed,
            measure_a_with_error=measure_a_with_error,
            null_effect=null_effect,
        )
        generated = gen_params(config)
        dataset = simulate_dataset(generated.population, config)
        counts = dataset.cell_counts(config.shape)
        kernel = config.a_error_kernel if measure_a_with_error else None
        fit_options = McmcOptions(
            chains=mcmc.chains,
            warmup=mcmc.warmup,
            iters=mcmc.iters,
            seed=seed,
            target_accept=mcmc.target_accept,
            slice_every=mcmc.slice_every,
            chain_workers=1,
        )
        fit = sample_posterior(
            counts,
            config.shape,
            fit_options,
            a_error_kernel=kernel,
            estimands=rule.specs(),
        )
        decision = decide(fit, rule)
        truth = ve_estimands(generated.population)
        true_values, ci_low, ci_high, covered = {}, {}, {}, {}
        for spec, _ in rule.thresholds:
            label = spec.label()
            true_values[label] = truth.lookup(spec)
            pooled = fit.pooled(label)
            ci_low[label] = float(np.quantile(pooled, 0.025))
            ci_high[label] = float(np.quantile(pooled, 0.975))
            covered[label] = bool(
                ci_low[label] <= true_values[label] <= ci_high[label]
            )
        return ReplicateResult(
            n=n,
            replicate=replicate,
            seed=seed,
            reject=bool(decision["reject"]),
            posterior_prob=decision["posterior_prob"],
            true_values=true_values,
            ci_low=ci_low,
            ci_high=ci_high,
            covered=covered,
            max_rhat=fit.diagnostics["max_rhat"],
        )
    except Exception as exc:  # per-replicate failures become NA entries
        return ReplicateResult(
            n=n,
            replicate=replicate,
            seed=seed,
            reject=False,
            posterior_prob=float("nan"),
            true_values={},
            ci_low={},
            ci_high={},
            covered={},
            max_rhat=float("nan"),
            failed=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def available_jobs(requested: int | None = None) -> int:
    cap = os.environ.get("STRATA_ID_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is not None:
        limit = min(limit, requested) if requested > 0 else limit
    return max(1, limit)


def power_study(
    scenario: str,
    n_grid: list[int],
    replicates: int,
    rule: DecisionRule | None = None,
    jobs: int | None = None,
    master_seed: int = 0,
    mcmc: McmcOptions | None = None,
    measure_a_with_error: bool = False,
    null_effect: bool = False,
) -> PowerStudyResult:
    """Rejection fraction of the decision rule across sample sizes.

    Every (sample size, replicate) pair is an independent simulate-fit-decide
    run on its own deterministic seed; results merge by replicate index, so
    the output is invariant to the degree of parallelism.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if rule is None:
        shape_probe = scenario_config(scenario, n=10, seed=0)
        rule = default_rule(scenario, shape_probe.shape.n_z)
    mcmc = mcmc or McmcOptions(chains=2, warmup=800, iters=1200, slice_every=2)

    tasks = [(n, rep) for n in n_grid for rep in range(replicates)]
    workers = available_jobs(jobs)
    args = [
        (scenario, n, rep, master_seed, rule, mcmc, measure_a_with_error,
         null_effect)
        for (n, rep) in tasks
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate_star, args))
    else:
        results = [_run_replicate_star(a) for a in args]

    results.sort(key=lambda r: (r.n, r.replicate))
    out = PowerStudyResult(replicates=results)
    trial = f"{scenario_config(scenario, n=10, seed=0).shape.n_z}-arm"
    meas = "A~" if measure_a_with_error else "A"
    for n in n_grid:
        group = [r for r in results if r.n == n]
        ok = [r for r in group if not r.failed]
        rejections = sum(r.reject for r in ok)
        power = rejections / len(ok) if ok else float("nan")
        lo, hi = wilson_interval(rejections, len(ok))
        out.rows.append(
            PowerRow(
                trial=trial,
                measurements=meas,
                n=n,
                replicates=len(ok),
                rejections=rejections,
                power=power,
                ci_lo=lo,
                ci_hi=hi,
                na=len(group) - len(ok),
            )
        )
    return out


def _run_replicate_star(args):
    return run_replicate(*args)
