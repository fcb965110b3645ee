"""Trial-data generation: scenario parameter draws and per-participant simulation.

Reproduces the generative protocol used for the worked power studies: strata
proportions drawn from site-level Dirichlet distributions, covariate mixtures
from a flat Dirichlet, log-odds shifts for a three-level pretreatment
covariate, fixed logistic outcome tables per scenario, and misclassification
of infection status, outcome, and (optionally) the categorical covariate.

Randomness is fully deterministic given the config: every simulated field
draws from its own stream, derived from the master seed by spawn index, with
draws ordered by participant.  Identical configs therefore produce
byte-identical datasets.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .oracle import PopulationParams
from .strata import TrialShape, arm_infection_mask

SCENARIOS = (
    "two_arm_severe",
    "three_arm_severe",
    "two_arm_transmission",
    "custom",
)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def softmax(v: np.ndarray) -> np.ndarray:
    """Map a log-odds vector (reference coordinate included) to the simplex."""
    e = np.exp(v - np.max(v))
    return e / e.sum()


def softmax_inv(theta: np.ndarray) -> np.ndarray:
    """Log-odds against the last coordinate; inverse of ``softmax``."""
    theta = np.asarray(theta, dtype=float)
    return np.log(theta) - np.log(theta[-1])


def neighbor_error_kernel(n_a: int, stay: float) -> np.ndarray:
    """Row-stochastic misreading kernel concentrated on adjacent levels.

    Interior levels keep mass ``stay`` and split the rest evenly between the
    two neighbors; boundary levels push all spillover to their single
    neighbor.
    """
    k = np.zeros((n_a, n_a))
    for a in range(n_a):
        k[a, a] = stay
        if a == 0:
            k[a, a + 1] = 1.0 - stay
        elif a == n_a - 1:
            k[a, a - 1] = 1.0 - stay
        else:
            k[a, a - 1] = k[a, a + 1] = (1.0 - stay) / 2.0
    return k


@dataclass(frozen=True)
class EffectTables:
    """Logistic outcome model: logit P(Y(z)=1 | u, A=k, X=x) =
    alpha[u, z] + delta[u, z, k] + omega[z, x]."""

    alpha: np.ndarray  # (n_strata, n_z), NaN where the stratum is uninfected
    delta: np.ndarray  # (n_strata, n_z, n_a)
    omega: np.ndarray  # (n_z, n_x)

    def beta(self) -> np.ndarray:
        """(n_strata, n_z, n_a, n_x) outcome probabilities, NaN where undefined."""
        logits = (
            self.alpha[:, :, None, None]
            + self.delta[:, :, :, None]
            + self.omega[None, :, None, :]
        )
        with np.errstate(invalid="ignore"):
            return 1.0 / (1.0 + np.exp(-logits))


def _two_arm_tables(n_a: int, n_x: int, null_effect: bool) -> EffectTables:
    alpha = np.full((4, 2), np.nan)
    delta = np.zeros((4, 2, n_a))
    k = np.arange(n_a, dtype=float)
    alpha[3, 0] = _logit(0.3)
    alpha[3, 1] = _logit(0.3) + math.log(0.4)
    delta[3, 0, :] = k * math.log(0.925)
    delta[3, 1, :] = k * math.log(0.825)
    alpha[1, 0] = _logit(0.15)
    delta[1, 0, :] = k * math.log(0.925)
    alpha[2, 1] = _logit(0.2)
    if null_effect:
        # no efficacy against the outcome in the always-infected stratum
        alpha[3, 1] = alpha[3, 0]
        delta[3, 1, :] = delta[3, 0, :]
    omega = np.tile(
        np.arange(n_x, dtype=float) * math.log(1.1), (2, 1)
    )  # omega[z, x] = (x - 1) log 1.1
    return EffectTables(alpha=alpha, delta=delta, omega=omega)


def _three_arm_tables(n_a: int, n_x: int, null_effect: bool) -> EffectTables:
    alpha = np.full((8, 3), np.nan)
    delta = np.zeros((8, 3, n_a))
    k = np.arange(n_a, dtype=float)
    # stratum indices: bit z-1 of the index is infection under arm z
    alpha[7, 0] = alpha[7, 1] = _logit(0.3)
    alpha[7, 2] = _logit(0.3) + math.log(0.4)
    for j in range(3):
        delta[7, j, :] = k * math.log(0.925)
    alpha[5, 0] = _logit(0.2)
    alpha[5, 2] = _logit(0.1)
    alpha[3, 0] = _logit(0.3)
    alpha[3, 1] = _logit(0.15)
    alpha[6, 1] = _logit(0.25)
    alpha[6, 2] = _logit(0.08)
    alpha[4, 2] = _logit(0.25)
    alpha[2, 1] = _logit(0.25)
    alpha[1, 0] = _logit(0.1)
    if null_effect:
        alpha[7, 2] = alpha[7, 0]
    omega = np.tile(np.arange(n_x, dtype=float) * math.log(1.1), (3, 1))
    return EffectTables(alpha=alpha, delta=delta, omega=omega)


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to simulate one trial dataset deterministically."""

    shape: TrialShape
    n: int
    seed: int
    scenario: str = "custom"
    measure_a_with_error: bool = False
    dirichlet_strata: tuple[float, ...] = ()
    effects: EffectTables | None = None
    misclass: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    a_error_kernel: np.ndarray | None = None
    oracle_fields: bool = False
    null_effect: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if any(c <= 0 for c in self.dirichlet_strata):
            raise ValueError("Dirichlet concentrations must be positive")
        if len(self.dirichlet_strata) != self.shape.n_strata:
            raise ValueError(
                f"need {self.shape.n_strata} strata concentrations, got "
                f"{len(self.dirichlet_strata)}"
            )
        if self.a_error_kernel is not None:
            kern = np.asarray(self.a_error_kernel, dtype=float)
            if kern.shape != (self.shape.n_a, self.shape.n_a):
                raise ValueError("A-error kernel shape mismatch")
            if np.any(np.abs(kern.sum(axis=1) - 1.0) > 1e-9) or np.any(kern < 0):
                raise ValueError("A-error kernel rows must be distributions")
            object.__setattr__(self, "a_error_kernel", kern)

    def to_dict(self) -> dict:
        return {
            "schema": "strata-id/sim-config-v1",
            "scenario": self.scenario,
            "shape": {
                "n_z": self.shape.n_z,
                "n_r": self.shape.n_r,
                "n_a": self.shape.n_a,
                "n_x": self.shape.n_x,
            },
            "n": self.n,
            "seed": self.seed,
            "measure_a_with_error": self.measure_a_with_error,
            "dirichlet_strata": list(self.dirichlet_strata),
            "alpha": np.where(
                np.isnan(self.effects.alpha), None, self.effects.alpha
            ).tolist(),
            "delta": self.effects.delta.tolist(),
            "omega": self.effects.omega.tolist(),
            "misclass": list(self.misclass),
            "a_error_kernel": (
                None
                if self.a_error_kernel is None
                else self.a_error_kernel.tolist()
            ),
            "oracle_fields": self.oracle_fields,
            "null_effect": self.null_effect,
        }


def scenario_config(
    scenario: str,
    n: int,
    seed: int,
    measure_a_with_error: bool = False,
    null_effect: bool = False,
    oracle_fields: bool = False,
) -> SimConfig:
    """Build the canonical configuration for one of the worked scenarios.

    Two-arm scenarios use 4 sites and a 3-level covariate, the three-arm one
    8 sites and 7 levels (the smallest identifiable designs); all use a
    uniform 3-level pretreatment covariate.
    """
    if scenario == "two_arm_severe":
        shape = TrialShape(n_z=2, n_r=4, n_a=3, n_x=3)
        cfg = SimConfig(
            shape=shape,
            n=n,
            seed=seed,
            scenario=scenario,
            measure_a_with_error=measure_a_with_error,
            dirichlet_strata=(91.0, 5.0, 0.5, 3.5),
            effects=_two_arm_tables(3, 3, null_effect),
            misclass=(0.8, 0.99, 0.99, 0.9),
            a_error_kernel=neighbor_error_kernel(3, 0.75),
            oracle_fields=oracle_fields,
            null_effect=null_effect,
        )
    elif scenario == "three_arm_severe":
        shape = TrialShape(n_z=3, n_r=8, n_a=7, n_x=3)
        cfg = SimConfig(
            shape=shape,
            n=n,
            seed=seed,
            scenario=scenario,
            measure_a_with_error=measure_a_with_error,
            dirichlet_strata=(91.0, 5.0, 0.1, 0.1, 0.1, 0.1, 0.1, 3.5),
            effects=_three_arm_tables(7, 3, null_effect),
            misclass=(0.8, 0.99, 0.99, 0.9),
            a_error_kernel=neighbor_error_kernel(7, 0.5),
            oracle_fields=oracle_fields,
            null_effect=null_effect,
        )
    elif scenario == "two_arm_transmission":
        cfg = household_mapping(
            scenario_config(
                "two_arm_severe", n, seed, measure_a_with_error,
                null_effect, oracle_fields,
            )
        )
    else:
        raise ValueError(f"no canned configuration for scenario {scenario!r}")
    return cfg


def household_mapping(config: SimConfig) -> SimConfig:
    """Recast a two-arm config as the household transmission study.

    The intermediate outcome becomes infection of the randomized household
    member and the final outcome infection of the contact, measured by the
    same imperfect test: the outcome test rates are tied to the infection
    test rates.  ``n`` counts households.  The natural estimand is the risk
    difference on the doubly-infected stratum.
    """
    if config.shape.n_z != 2:
        raise ValueError("household mapping applies to two-arm designs")
    sn_s, sp_s = config.misclass[0], config.misclass[1]
    return replace(
        config,
        scenario="two_arm_transmission",
        misclass=(sn_s, sp_s, sn_s, sp_s),
    )


@dataclass(frozen=True)
class GeneratedParams:
    """Population parameters plus the regression-form quantities they came from."""

    population: PopulationParams
    mu: np.ndarray  # (n_r, n_strata), reference (last) coordinate zero
    eta: np.ndarray  # (n_x, n_strata)
    nu: np.ndarray  # (n_strata, n_a)
    gamma: np.ndarray  # (n_x, n_a)
    effects: EffectTables


def gen_params(config: SimConfig) -> GeneratedParams:
    """Draw one design's population parameters per the scenario protocol.

    Site-level strata proportions are i.i.d. Dirichlet draws; per-stratum
    covariate mixtures are flat Dirichlet draws; pretreatment-covariate
    shifts are standard normal log-odds offsets against the reference level.
    Deterministic given ``config.seed``.
    """
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    )
    shape = config.shape
    n_u = shape.n_strata

    theta_ref = rng.dirichlet(np.asarray(config.dirichlet_strata), size=shape.n_r)
    mu = np.array([softmax_inv(t) for t in theta_ref])
    eta = np.zeros((shape.n_x, n_u))
    for x in range(1, shape.n_x):
        eta[x, : n_u - 1] = rng.normal(0.0, 1.0, size=n_u - 1)
    theta = np.stack(
        [[softmax(mu[r] + eta[x]) for x in range(shape.n_x)] for r in range(shape.n_r)]
    )

    a_ref = rng.dirichlet(2.0 * np.ones(shape.n_a), size=n_u)
    nu = np.array([softmax_inv(a) for a in a_ref])
    gamma = np.zeros((shape.n_x, shape.n_a))
    for x in range(1, shape.n_x):
        gamma[x, : shape.n_a - 1] = rng.normal(0.0, 1.0, size=shape.n_a - 1)
    a = np.stack(
        [[softmax(nu[u] + gamma[x]) for x in range(shape.n_x)] for u in range(n_u)]
    )

    sn_s, sp_s, sn_y, sp_y = config.misclass
    population = PopulationParams(
        theta=theta,
        a=a,
        beta=config.effects.beta(),
        sn_s=sn_s,
        sp_s=sp_s,
        sn_y=sn_y,
        sp_y=sp_y,
    )
    return GeneratedParams(
        population=population, mu=mu, eta=eta, nu=nu, gamma=gamma,
        effects=config.effects,
    )


@dataclass
class TrialDataset:
    """Per-participant trial records; 1-based categorical codes.

    Hidden truth columns (``a_true``, ``stratum``, ``y_true``) are retained
    only when the config asked for oracle output.  ``y_true`` is -1 when the
    participant is uninfected under the assigned arm (outcome undefined).
    """

    z: np.ndarray
    r: np.ndarray
    x: np.ndarray
    a_obs: np.ndarray
    s_obs: np.ndarray
    y_obs: np.ndarray
    a_true: np.ndarray | None = None
    stratum: np.ndarray | None = None
    y_true: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def oracle(self) -> bool:
        return self.a_true is not None

    def cell_counts(self, shape: TrialShape) -> np.ndarray:
        """(2, 2, n_a, n_z, n_r, n_x) observed cell counts."""
        counts = np.zeros(
            (2, 2, shape.n_a, shape.n_z, shape.n_r, shape.n_x), dtype=np.int64
        )
        np.add.at(
            counts,
            (self.s_obs, self.y_obs, self.a_obs - 1, self.z - 1, self.r - 1,
             self.x - 1),
            1,
        )
        return counts

    def to_csv(self) -> str:
        """RFC-4180 CSV with LF line endings."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["id", "z", "r", "x", "a_obs", "s_obs", "y_obs"]
        if self.oracle:
            header += ["a_true", "stratum", "y_true"]
        writer.writerow(header)
        for i in range(self.n):
            row = [
                i + 1, self.z[i], self.r[i], self.x[i],
                self.a_obs[i], self.s_obs[i], self.y_obs[i],
            ]
            if self.oracle:
                row += [self.a_true[i], self.stratum[i], self.y_true[i]]
            writer.writerow(row)
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "TrialDataset":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        required = ["id", "z", "r", "x", "a_obs", "s_obs", "y_obs"]
        if header[: len(required)] != required:
            raise ValueError(
                f"dataset header must start with {','.join(required)}"
            )
        oracle = len(header) > len(required)
        rows = [list(map(int, row)) for row in reader if row]
        arr = np.asarray(rows, dtype=np.int64)
        if arr.size == 0:
            raise ValueError("dataset is empty")
        ds = TrialDataset(
            z=arr[:, 1], r=arr[:, 2], x=arr[:, 3],
            a_obs=arr[:, 4], s_obs=arr[:, 5], y_obs=arr[:, 6],
        )
        if oracle:
            ds.a_true, ds.stratum, ds.y_true = arr[:, 7], arr[:, 8], arr[:, 9]
        return ds


def _field_rng(seed: int, stream: int) -> np.random.Generator:
    """Stream ``stream`` of the master seed; one stream per simulated field."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,)))
    )


def _categorical_rows(rng, probs_by_row: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs_by_row``; returns 0-based codes."""
    cum = np.cumsum(probs_by_row, axis=1)
    u = rng.random(len(probs_by_row))
    return (u[:, None] > cum).sum(axis=1)


def simulate_dataset(params: PopulationParams, config: SimConfig) -> TrialDataset:
    """Simulate one trial: assignment, latent stratum, covariates, outcomes,
    and their misclassified measurements.

    Participants are allocated to sites in equal deterministic blocks (site 1
    first; remainders go to the earliest sites), then every random field is
    drawn from its own seed-derived stream in participant order.
    """
    shape = config.shape
    n = config.n
    base, extra = divmod(n, shape.n_r)
    sizes = [base + (1 if r < extra else 0) for r in range(shape.n_r)]
    r_codes = np.repeat(np.arange(shape.n_r), sizes)

    z_codes = _categorical_rows(
        _field_rng(config.seed, 1), np.tile(params.z_dist, (n, 1))
    )
    x_codes = _categorical_rows(
        _field_rng(config.seed, 2), np.tile(params.x_dist, (n, 1))
    )
    strata = _categorical_rows(
        _field_rng(config.seed, 3), params.theta[r_codes, x_codes]
    )
    a_true = _categorical_rows(
        _field_rng(config.seed, 4), params.a[strata, x_codes]
    )

    mask = arm_infection_mask(shape.n_z)
    infected = mask[z_codes, strata].astype(bool)
    beta0 = np.nan_to_num(params.beta, nan=0.0)
    p_y = beta0[strata, z_codes, a_true, x_codes]
    y_true = (_field_rng(config.seed, 5).random(n) < p_y).astype(np.int64)
    y_true[~infected] = 0

    p_ytilde = np.where(y_true == 1, params.sn_y, 1.0 - params.sp_y)
    y_obs = (_field_rng(config.seed, 6).random(n) < p_ytilde).astype(np.int64)
    p_stilde = np.where(infected, params.sn_s, 1.0 - params.sp_s)
    s_obs = (_field_rng(config.seed, 7).random(n) < p_stilde).astype(np.int64)

    if config.measure_a_with_error:
        if config.a_error_kernel is None:
            raise ValueError("measure_a_with_error requires an A-error kernel")
        a_obs = _categorical_rows(
            _field_rng(config.seed, 8), config.a_error_kernel[a_true]
        )
    else:
        a_obs = a_true.copy()

    y_true_out = np.where(infected, y_true, -1)
    ds = TrialDataset(
        z=z_codes + 1,
        r=r_codes + 1,
        x=x_codes + 1,
        a_obs=a_obs + 1,
        s_obs=s_obs,
        y_obs=y_obs,
    )
    if config.oracle_fields:
        ds.a_true = a_true + 1
        ds.stratum = strata
        ds.y_true = y_true_out
    return ds
