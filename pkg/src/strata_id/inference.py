"""Finite-sample estimation for the misclassified multinomial trial model.

The exact marginal likelihood is a multinomial over observed cells per
(arm, site, pretreatment-covariate level), with cell probabilities from the
population forward map; latent strata (and the latent covariate, when it is
recorded with error) are summed out analytically, so evaluation cost is
independent of the sample size.  Estimation is Bayesian: a blockwise adaptive
random-walk Metropolis sampler targets the posterior under the documented
priors, with split-Rhat and bulk/tail effective-sample-size diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .design import minimum_design
from .oracle import EstimandError, PopulationParams, misclassify_cells
from .simulate import TrialDataset
from .strata import EstimandSpec, TrialShape, arm_infection_mask, stratum_from_index

LOG_2PI = math.log(2.0 * math.pi)

# Shifted-Beta priors for the four test rates: (lo, hi, a, b).
MISCLASS_PRIORS = {
    "sn_s": (0.5, 1.0, 4.0, 2.0),
    "sp_s": (0.5, 1.0, 10.0, 2.0),
    "sn_y": (0.5, 1.0, 5.0, 2.0),
    "sp_y": (0.5, 1.0, 4.0, 2.0),
}
MISCLASS_NAMES = ("sn_s", "sp_s", "sn_y", "sp_y")


# ---------------------------------------------------------------------------
# Parameter layout and transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Index bookkeeping for the unconstrained parameter vector.

    Stacks, in order: strata log-odds by site (``mu``), pretreatment-covariate
    shifts on strata (``eta``), covariate-mixture log-odds (``nu``), their
    pretreatment shifts (``gamma``), outcome logits per (stratum, arm) pair
    and covariate level (``alpha``), outcome pretreatment shifts (``omega``),
    and the four logit-rescaled test rates.  Reference coordinates (last
    stratum, last covariate level, first pretreatment level) are fixed at
    zero and not stored.
    """

    shape: TrialShape
    pairs: tuple[tuple[int, int], ...]
    slices: dict
    blocks: dict
    prior_mean: np.ndarray
    prior_sd: np.ndarray
    dim: int

    @staticmethod
    def build(shape: TrialShape) -> "ParamLayout":
        n_u = shape.n_strata
        mask = arm_infection_mask(shape.n_z)
        pairs = tuple(
            (u, z) for u in range(n_u) for z in range(shape.n_z) if mask[z, u] == 1.0
        )
        sizes = {
            "mu": shape.n_r * (n_u - 1),
            "eta": (shape.n_x - 1) * (n_u - 1),
            "nu": n_u * (shape.n_a - 1),
            "gamma": (shape.n_x - 1) * (shape.n_a - 1),
            "alpha": len(pairs) * shape.n_a,
            "omega": (shape.n_x - 1) * shape.n_z,
            "misclass": 4,
        }
        slices = {}
        offset = 0
        for name, size in sizes.items():
            slices[name] = slice(offset, offset + size)
            offset += size
        dim = offset

        prior_mean = np.zeros(dim)
        prior_sd = np.ones(dim)
        # strata intercepts: unit-variance normal centered at (1, 1, 0, ...)
        mu_mean = np.zeros(n_u - 1)
        mu_mean[: min(2, n_u - 1)] = 1.0
        prior_mean[slices["mu"]] = np.tile(mu_mean, shape.n_r)
        prior_sd[slices["eta"]] = 0.5
        # wide priors on covariate mixtures for the first, second, and last
        # strata (ascending index), tighter elsewhere
        nu_sd = np.full((n_u, max(shape.n_a - 1, 0)), 0.5)
        for u in (0, 1, n_u - 1):
            nu_sd[u] = 1.7
        prior_sd[slices["nu"]] = nu_sd.ravel()
        prior_sd[slices["gamma"]] = 0.5
        prior_sd[slices["alpha"]] = 1.7
        prior_sd[slices["omega"]] = 1.0

        blocks = {
            name: np.arange(slices[name].start, slices[name].stop)
            for name in sizes
            if sizes[name] > 0
        }
        return ParamLayout(
            shape=shape,
            pairs=pairs,
            slices=slices,
            blocks=blocks,
            prior_mean=prior_mean,
            prior_sd=prior_sd,
            dim=dim,
        )


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def constrain_rates(t: np.ndarray) -> np.ndarray:
    """Map unconstrained coordinates onto the (0.5, 1) prior supports."""
    los = np.array([MISCLASS_PRIORS[n][0] for n in MISCLASS_NAMES])
    his = np.array([MISCLASS_PRIORS[n][1] for n in MISCLASS_NAMES])
    return los + (his - los) * _sigmoid(np.asarray(t, dtype=float))


def unconstrain_rates(v: np.ndarray) -> np.ndarray:
    los = np.array([MISCLASS_PRIORS[n][0] for n in MISCLASS_NAMES])
    his = np.array([MISCLASS_PRIORS[n][1] for n in MISCLASS_NAMES])
    frac = (np.asarray(v, dtype=float) - los) / (his - los)
    return special.logit(frac)


def _batch_softmax_last(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _component_arrays(vecs: np.ndarray, layout: ParamLayout):
    """Reshape a (T, dim) batch of draws into model component arrays.

    Returns ``(theta, a, beta_pairs, rates)`` with a leading draw axis:
    ``theta`` (T, n_r, n_x, n_u), ``a`` (T, n_u, n_x, n_a), ``beta_pairs``
    (T, n_pairs, n_a, n_x), ``rates`` (T, 4).
    """
    s = layout.shape
    n_u = s.n_strata
    t_dim = vecs.shape[0]
    sl = layout.slices

    mu = vecs[:, sl["mu"]].reshape(t_dim, s.n_r, n_u - 1)
    mu = np.concatenate([mu, np.zeros((t_dim, s.n_r, 1))], axis=2)
    eta = vecs[:, sl["eta"]].reshape(t_dim, s.n_x - 1, n_u - 1)
    eta = np.concatenate([eta, np.zeros((t_dim, s.n_x - 1, 1))], axis=2)
    eta = np.concatenate([np.zeros((t_dim, 1, n_u)), eta], axis=1)
    theta = _batch_softmax_last(mu[:, :, None, :] + eta[:, None, :, :])

    nu = vecs[:, sl["nu"]].reshape(t_dim, n_u, s.n_a - 1)
    nu = np.concatenate([nu, np.zeros((t_dim, n_u, 1))], axis=2)
    gamma = vecs[:, sl["gamma"]].reshape(t_dim, s.n_x - 1, s.n_a - 1)
    gamma = np.concatenate([gamma, np.zeros((t_dim, s.n_x - 1, 1))], axis=2)
    gamma = np.concatenate([np.zeros((t_dim, 1, s.n_a)), gamma], axis=1)
    a = _batch_softmax_last(nu[:, :, None, :] + gamma[:, None, :, :])

    alpha = vecs[:, sl["alpha"]].reshape(t_dim, len(layout.pairs), s.n_a)
    omega = vecs[:, sl["omega"]].reshape(t_dim, s.n_x - 1, s.n_z)
    omega = np.concatenate([np.zeros((t_dim, 1, s.n_z)), omega], axis=1)
    pair_arms = np.array([z for (_, z) in layout.pairs])
    omega_by_pair = omega[:, :, pair_arms].transpose(0, 2, 1)  # (T, n_pairs, n_x)
    logits = alpha[:, :, :, None] + omega_by_pair[:, :, None, :]
    beta_pairs = _sigmoid(logits)  # (T, n_pairs, n_a, n_x)

    rates = constrain_rates(vecs[:, sl["misclass"]])
    return theta, a, beta_pairs, rates


def params_from_vector(vec: np.ndarray, layout: ParamLayout) -> PopulationParams:
    """Materialize one unconstrained vector as population parameters."""
    theta, a, beta_pairs, rates = _component_arrays(vec[None, :], layout)
    s = layout.shape
    beta = np.full((s.n_strata, s.n_z, s.n_a, s.n_x), np.nan)
    for p, (u, z) in enumerate(layout.pairs):
        beta[u, z] = beta_pairs[0, p]
    return PopulationParams(
        theta=theta[0],
        a=a[0],
        beta=beta,
        sn_s=float(rates[0, 0]),
        sp_s=float(rates[0, 1]),
        sn_y=float(rates[0, 2]),
        sp_y=float(rates[0, 3]),
    )


def vector_from_params(
    params: PopulationParams, layout: ParamLayout
) -> np.ndarray:
    """Inverse of ``params_from_vector`` (reference-level representation).

    Exact only when the parameters are representable in the regression form
    (outcome logits additive in covariate level); used by tests and
    initialization helpers.
    """
    s = layout.shape
    vec = np.zeros(layout.dim)
    theta_log = np.log(params.theta)
    mu = theta_log[:, 0, :] - theta_log[:, 0, -1:]
    vec[layout.slices["mu"]] = mu[:, :-1].ravel()
    if s.n_x > 1:
        eta = (theta_log[0, :, :] - theta_log[0, :, -1:]) - mu[0]
        vec[layout.slices["eta"]] = eta[1:, :-1].ravel()
    a_log = np.log(params.a)
    nu = a_log[:, 0, :] - a_log[:, 0, -1:]
    vec[layout.slices["nu"]] = nu[:, :-1].ravel()
    if s.n_x > 1:
        gamma = (a_log[0, :, :] - a_log[0, :, -1:]) - nu[0]
        vec[layout.slices["gamma"]] = gamma[1:, :-1].ravel()
    logit_beta = special.logit(np.clip(params.beta, 1e-12, 1 - 1e-12))
    alpha = np.array([logit_beta[u, z, :, 0] for (u, z) in layout.pairs])
    vec[layout.slices["alpha"]] = alpha.ravel()
    if s.n_x > 1:
        omega = np.zeros((s.n_x - 1, s.n_z))
        for p, (u, z) in enumerate(layout.pairs):
            omega[:, z] = logit_beta[u, z, 0, 1:] - logit_beta[u, z, 0, 0]
        vec[layout.slices["omega"]] = omega.ravel()
    vec[layout.slices["misclass"]] = unconstrain_rates(
        np.array([params.sn_s, params.sp_s, params.sn_y, params.sp_y])
    )
    return vec


# ---------------------------------------------------------------------------
# Likelihood and prior
# ---------------------------------------------------------------------------


def cell_probabilities_by_x(
    params: PopulationParams, a_error_kernel: np.ndarray | None = None
) -> np.ndarray:
    """Observed-cell probabilities per pretreatment level.

    Returns a (2, 2, n_a, n_z, n_r, n_x) array of P(observed status, observed
    outcome, recorded covariate | arm, site, pretreatment level); the
    covariate axis is mixed through ``a_error_kernel`` when the covariate is
    recorded with error.
    """
    mask = arm_infection_mask(params.n_z)
    beta0 = np.nan_to_num(params.beta, nan=0.0)
    p11 = np.einsum("zu,uxk,rxu,uzkx->kzrx", mask, params.a, params.theta, beta0)
    p1plus = np.einsum("zu,uxk,rxu->kzrx", mask, params.a, params.theta)
    p0 = np.einsum("zu,uxk,rxu->kzrx", 1.0 - mask, params.a, params.theta)
    q = misclassify_cells(
        np.stack([p1plus - p11, p11]), p0,
        params.sn_s, params.sp_s, params.sn_y, params.sp_y,
    )
    if a_error_kernel is not None:
        q = np.einsum("syazrx,ak->sykzrx", q, np.asarray(a_error_kernel, float))
    return q


def _as_cell_counts(data, shape: TrialShape) -> np.ndarray:
    if isinstance(data, TrialDataset):
        return data.cell_counts(shape)
    counts = np.asarray(data)
    expected = (2, 2, shape.n_a, shape.n_z, shape.n_r, shape.n_x)
    if counts.shape != expected:
        raise ValueError(f"cell counts must have shape {expected}, got {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("cell counts must be nonnegative")
    return counts


def log_likelihood(
    params: PopulationParams,
    data,
    a_error_kernel: np.ndarray | None = None,
) -> float:
    """Multinomial log-likelihood of a dataset or cell-count array.

    Latent strata (and the latent covariate under a recording kernel) are
    marginalized inside the cell probabilities; the pretreatment covariate is
    conditioned on.  The multinomial coefficient is dropped, so doubling all
    counts exactly doubles the value.  Returns ``-inf`` when a zero-probability
    cell has a positive count.
    """
    shape = TrialShape(
        n_z=params.n_z, n_r=params.n_r, n_a=params.n_a, n_x=params.n_x
    )
    counts = _as_cell_counts(data, shape)
    q = cell_probabilities_by_x(params, a_error_kernel)
    positive = counts > 0
    if np.any(q[positive] <= 0.0):
        return float("-inf")
    return float(np.sum(counts[positive] * np.log(q[positive])))


def _shifted_beta_logpdf(v: float, lo: float, hi: float, a: float, b: float) -> float:
    if not lo < v < hi:
        return float("-inf")
    chi = (v - lo) / (hi - lo)
    return float(
        (a - 1.0) * math.log(chi)
        + (b - 1.0) * math.log1p(-chi)
        - special.betaln(a, b)
        - math.log(hi - lo)
    )


def log_prior(vec: np.ndarray, layout: ParamLayout) -> float:
    """Joint log-prior density on the unconstrained scale.

    Independent normals on every regression coordinate plus shifted-Beta
    densities on the four test rates, with the change-of-variables term for
    their logit rescaling onto (0.5, 1).
    """
    vec = np.asarray(vec, dtype=float)
    sl = layout.slices["misclass"]
    z = (vec[: sl.start] - layout.prior_mean[: sl.start]) / layout.prior_sd[: sl.start]
    total = float(
        -0.5 * np.dot(z, z)
        - np.sum(np.log(layout.prior_sd[: sl.start]))
        - 0.5 * sl.start * LOG_2PI
    )
    t = vec[sl]
    rates = constrain_rates(t)
    sig = _sigmoid(t)
    for i, name in enumerate(MISCLASS_NAMES):
        lo, hi, a, b = MISCLASS_PRIORS[name]
        total += _shifted_beta_logpdf(float(rates[i]), lo, hi, a, b)
        # Jacobian of v = lo + (hi - lo) * sigmoid(t)
        total += math.log(hi - lo) + math.log(sig[i]) + math.log1p(-sig[i])
    return total


def log_posterior(
    vec: np.ndarray,
    layout: ParamLayout,
    counts: np.ndarray,
    a_error_kernel: np.ndarray | None = None,
) -> float:
    lp = log_prior(vec, layout)
    if not np.isfinite(lp):
        return float("-inf")
    return lp + log_likelihood(
        params_from_vector(vec, layout), counts, a_error_kernel
    )


def make_log_posterior(
    layout: ParamLayout,
    counts: np.ndarray,
    a_error_kernel: np.ndarray | None = None,
):
    """Closure evaluating the posterior without per-call validation.

    Algebraically identical to ``log_posterior``; index arrays, masks, and
    the positive-count cell list are precomputed once, which matters inside
    the sampler loop.
    """
    s = layout.shape
    mask = arm_infection_mask(s.n_z)
    mask_t = np.ascontiguousarray(mask.T)[:, :, None, None]  # (u, z, 1, 1)
    pair_u = np.array([u for (u, _) in layout.pairs])
    pair_z = np.array([z for (_, z) in layout.pairs])
    counts = np.asarray(counts, dtype=float)
    positive = counts > 0
    counts_pos = counts[positive]
    kernel = None if a_error_kernel is None else np.asarray(a_error_kernel, float)
    sl_mis = layout.slices["misclass"]
    normal_mean = layout.prior_mean[: sl_mis.start]
    normal_sd = layout.prior_sd[: sl_mis.start]
    normal_const = float(
        -np.sum(np.log(normal_sd)) - 0.5 * sl_mis.start * LOG_2PI
    )
    beta_consts = {
        name: float(special.betaln(a, b))
        for name, (_, _, a, b) in MISCLASS_PRIORS.items()
    }

    def logpost(vec: np.ndarray) -> float:
        z = (vec[: sl_mis.start] - normal_mean) / normal_sd
        lp = normal_const - 0.5 * float(np.dot(z, z))
        t = vec[sl_mis]
        rates = constrain_rates(t)
        sig = _sigmoid(t)
        for i, name in enumerate(MISCLASS_NAMES):
            lo, hi, a, b = MISCLASS_PRIORS[name]
            chi = (rates[i] - lo) / (hi - lo)
            if not 0.0 < chi < 1.0:
                return float("-inf")
            lp += (
                (a - 1.0) * math.log(chi)
                + (b - 1.0) * math.log1p(-chi)
                - beta_consts[name]
                + math.log(sig[i])
                + math.log1p(-sig[i])
            )

        theta, a_arr, beta_pairs, _ = _component_arrays(vec[None, :], layout)
        theta, a_arr = theta[0], a_arr[0]
        beta_full = np.zeros((s.n_strata, s.n_z, s.n_a, s.n_x))
        beta_full[pair_u, pair_z] = beta_pairs[0]
        a_t = a_arr.transpose(0, 2, 1)[:, None, :, :]  # (u, 1, k, x)
        ma = mask_t * a_t
        p11 = np.einsum("uzkx,rxu->kzrx", ma * beta_full, theta)
        p1plus = np.einsum("uzkx,rxu->kzrx", ma, theta)
        tot = np.einsum("uxk,rxu->krx", a_arr, theta)
        p0 = tot[:, None] - p1plus
        sn_s, sp_s, sn_y, sp_y = rates
        q = misclassify_cells(
            np.stack([p1plus - p11, p11]), p0, sn_s, sp_s, sn_y, sp_y
        )
        if kernel is not None:
            q = np.einsum("syazrx,ak->sykzrx", q, kernel)
        q_pos = q[positive]
        if np.any(q_pos <= 0.0):
            return float("-inf")
        return lp + float(np.dot(counts_pos, np.log(q_pos)))

    return logpost


# ---------------------------------------------------------------------------
# Estimand draws
# ---------------------------------------------------------------------------


def estimand_draws(
    vecs: np.ndarray, layout: ParamLayout, specs: list[EstimandSpec]
) -> dict:
    """Evaluate named estimands for a batch of parameter draws.

    Marginal quantities use uniform site weights and the model's pretreatment
    mixing, matching the closed-form population estimands.
    """
    s = layout.shape
    theta, a, beta_pairs, rates = _component_arrays(vecs, layout)
    t_dim = vecs.shape[0]
    mask = arm_infection_mask(s.n_z)
    x_dist = np.full(s.n_x, 1.0 / s.n_x)
    r_dist = np.full(s.n_r, 1.0 / s.n_r)

    risks = np.einsum("trxu,zu,r,x->tz", theta, mask, r_dist, x_dist)
    p_u_given_x = np.einsum("trxu,r->txu", theta, r_dist)
    joint_xu = x_dist[None, :, None] * p_u_given_x
    p_x_given_u = joint_xu / joint_xu.sum(axis=1, keepdims=True)

    beta_full = np.zeros((t_dim, s.n_strata, s.n_z, s.n_a, s.n_x))
    for p, (u, z) in enumerate(layout.pairs):
        beta_full[:, u, z] = beta_pairs[:, p]
    e_marg = np.einsum("tuzkx,txu,tuxk->tuz", beta_full, p_x_given_u, a)
    joint_xku = joint_xu[:, :, :, None] * a.transpose(0, 2, 1, 3)
    p_x_given_uk = joint_xku / joint_xku.sum(axis=1, keepdims=True)
    e_cond = np.einsum("tuzkx,txuk->tuzk", beta_full, p_x_given_uk)
    r_y = rates[:, 2] + rates[:, 3] - 1.0

    out = {}
    with np.errstate(invalid="ignore", divide="ignore"):
        for spec in specs:
            j, k = spec.arms
            if spec.kind == "VE_S":
                val = 1.0 - risks[:, j - 1] / risks[:, k - 1]
            elif spec.kind == "VE_I_marginal":
                u = spec.stratum.index
                val = 1.0 - e_marg[:, u, j - 1] / e_marg[:, u, k - 1]
            elif spec.kind == "VE_T":
                u = spec.stratum.index
                val = e_marg[:, u, k - 1] - e_marg[:, u, j - 1]
            elif spec.kind == "VE_I_conditional":
                u = spec.stratum.index
                lvl = spec.covariate_level - 1
                val = 1.0 - e_cond[:, u, j - 1, lvl] / e_cond[:, u, k - 1, lvl]
            elif spec.kind == "composite":
                u = spec.stratum.index
                jj, kk, ref = spec.composite_arms
                val = (
                    e_marg[:, u, kk - 1] - e_marg[:, u, jj - 1]
                ) / e_marg[:, u, ref - 1]
            else:
                raise EstimandError(f"unknown estimand kind {spec.kind}")
            out[spec.label()] = val
    out["_r_y"] = r_y
    return out


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction on split chains; ``chains`` is (m, n)."""
    m, n = chains.shape
    half = n // 2
    seqs = np.vstack([chains[:, :half], chains[:, half : 2 * half]])
    means = seqs.mean(axis=1)
    variances = seqs.var(axis=1, ddof=1)
    w = variances.mean()
    b_over_n = means.var(ddof=1)
    if w <= 0.0:
        return 1.0 if b_over_n <= 0.0 else float("inf")
    var_hat = (half - 1) / half * w + b_over_n
    return float(np.sqrt(var_hat / w))


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    flat = chains.ravel()
    ranks = special.ndtri(
        (np.argsort(np.argsort(flat)) + 0.625) / (flat.size + 0.25)
    )
    return ranks.reshape(chains.shape)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    x = x - x.mean(axis=-1, keepdims=True)
    size = 2 * n
    f = np.fft.rfft(x, size, axis=-1)
    acov = np.fft.irfft(f * np.conjugate(f), size, axis=-1)[..., :n]
    return acov / n


def ess_basic(chains: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence."""
    m, n = chains.shape
    if n < 4 or np.allclose(chains, chains.ravel()[0]):
        return float("nan")
    acov = _autocov(chains)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    mean_var = acov.mean(axis=0)
    var_hat = (n - 1.0) / n * w
    if m > 1:
        var_hat += chains.mean(axis=1).var(ddof=1)
    if var_hat <= 0:
        return float("nan")
    rho = 1.0 - (w - mean_var) / var_hat
    # Geyer pairs: keep while sums positive, force monotone decline
    max_pairs = (n - 1) // 2
    tau = 1.0
    prev_pair = np.inf
    total = 0.0
    for t in range(1, max_pairs + 1):
        pair = rho[2 * t - 1] + rho[2 * t] if 2 * t < n else rho[2 * t - 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        total += pair
        prev_pair = pair
    tau = 1.0 + 2.0 * total
    return float(m * n / tau)


def ess_bulk(chains: np.ndarray) -> float:
    return ess_basic(_rank_normalize(chains))


def ess_tail(chains: np.ndarray) -> float:
    """Minimum ESS of the 5% and 95% quantile indicators."""
    out = []
    for qt in (0.05, 0.95):
        cut = np.quantile(chains, qt)
        out.append(ess_basic((chains <= cut).astype(float)))
    return float(np.nanmin(out))


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------


@dataclass
class McmcOptions:
    chains: int = 4
    warmup: int = 1000
    iters: int = 1500
    seed: int = 0
    target_accept: float = 0.23
    init_attempts: int = 100
    slice_every: int = 1  # univariate slice sweep cadence; 0 disables
    global_moves: int = 4  # whole-vector proposals per sweep
    chain_workers: int = 1  # processes running chains concurrently


def _slice_sweep(target, current, cur_lp, widths, rng, max_steps=6):
    """One pass of univariate slice sampling (stepping out + shrinkage)."""
    for i in range(len(current)):
        log_y = cur_lp - rng.exponential()
        w = widths[i]
        x0 = current[i]
        left = x0 - w * rng.random()
        right = left + w

        def at(v):
            current[i] = v
            return target(current)

        steps = max_steps
        while steps > 0 and at(left) > log_y:
            left -= w
            steps -= 1
        steps = max_steps
        while steps > 0 and at(right) > log_y:
            right += w
            steps -= 1
        while True:
            cand = left + (right - left) * rng.random()
            lp = at(cand)
            if lp > log_y:
                cur_lp = lp
                break
            if cand < x0:
                left = cand
            else:
                right = cand
            if right - left < 1e-13:
                current[i] = x0
                cur_lp = at(x0)
                break
    return current, cur_lp


@dataclass
class FitResult:
    """Posterior draws with diagnostics and derived estimand draws."""

    draws: np.ndarray  # (chains, kept, dim)
    layout: ParamLayout
    estimand_draws: dict
    point: dict
    diagnostics: dict
    metadata: dict

    def pooled(self, label: str) -> np.ndarray:
        return np.asarray(self.estimand_draws[label]).reshape(-1)

    def summary(self) -> dict:
        out = {
            "point": self.point,
            "diagnostics": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.diagnostics.items()
            },
            "metadata": self.metadata,
            "estimands": {},
        }
        for label, draws in self.estimand_draws.items():
            pooled = np.asarray(draws).reshape(-1)
            out["estimands"][label] = {
                "mean": float(np.mean(pooled)),
                "sd": float(np.std(pooled)),
                "q2.5": float(np.quantile(pooled, 0.025)),
                "q50": float(np.quantile(pooled, 0.5)),
                "q97.5": float(np.quantile(pooled, 0.975)),
            }
        return out


def _prior_draw(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    vec = rng.normal(layout.prior_mean, layout.prior_sd)
    # strata intercepts start at the prior mean; test rates at prior draws
    vec[layout.slices["mu"]] = layout.prior_mean[layout.slices["mu"]]
    draws = []
    for name in MISCLASS_NAMES:
        lo, hi, a, b = MISCLASS_PRIORS[name]
        draws.append(lo + (hi - lo) * rng.beta(a, b))
    vec[layout.slices["misclass"]] = unconstrain_rates(np.array(draws))
    return vec


def _chol_with_jitter(cov: np.ndarray) -> np.ndarray:
    jitter = 1e-10 * max(np.trace(cov) / len(cov), 1e-12)
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            jitter *= 100.0
    return np.diag(np.sqrt(np.clip(np.diag(cov), 1e-12, None)))


def _run_chain(
    chain_index: int,
    layout: ParamLayout,
    counts: np.ndarray,
    kernel: np.ndarray | None,
    options: McmcOptions,
):
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(options.seed, spawn_key=(chain_index,)))
    )
    target = make_log_posterior(layout, counts, kernel)

    current = None
    for _ in range(options.init_attempts):
        cand = _prior_draw(layout, rng)
        lp = target(cand)
        if np.isfinite(lp):
            current, cur_lp = cand, lp
            break
    if current is None:
        raise RuntimeError(
            f"no finite posterior density after {options.init_attempts} "
            "initialization attempts"
        )

    def block_log_prior(vec, name, idx):
        if name == "misclass":
            t = vec[idx]
            rates = constrain_rates(t)
            sig = _sigmoid(t)
            total = 0.0
            for i, rn in enumerate(MISCLASS_NAMES):
                lo, hi, a, b = MISCLASS_PRIORS[rn]
                total += _shifted_beta_logpdf(float(rates[i]), lo, hi, a, b)
                total += math.log(hi - lo) + math.log(sig[i]) + math.log1p(-sig[i])
            return total
        z = (vec[idx] - layout.prior_mean[idx]) / layout.prior_sd[idx]
        return float(-0.5 * np.dot(z, z) - np.sum(np.log(layout.prior_sd[idx])))

    def prior_block_draw(name, idx):
        if name == "misclass":
            draws = []
            for rn in MISCLASS_NAMES:
                lo, hi, a, b = MISCLASS_PRIORS[rn]
                draws.append(lo + (hi - lo) * rng.beta(a, b))
            return unconstrain_rates(np.array(draws))
        return rng.normal(layout.prior_mean[idx], layout.prior_sd[idx])

    # Block moves handle local exploration; whole-vector moves pick up
    # cross-block correlations.  Every block carries its own Robbins-Monro
    # scalar scale and a proposal Cholesky refreshed from the accumulating
    # warmup draws; a slice of moves are wide jumps (tail crossings) or
    # independence draws from the block prior (instant mixing for
    # prior-dominated coordinates).
    blocks = list(layout.blocks.items())
    blocks += [("all", np.arange(layout.dim))] * max(options.global_moves, 1)
    log_scales = {name: math.log(0.25 / math.sqrt(len(idx))) for name, idx in blocks}
    chol = {name: np.eye(len(idx)) for name, idx in blocks}
    accept_counts = {name: 0 for name, _ in blocks}
    proposals = {name: 0 for name, _ in blocks}

    total_iters = options.warmup + options.iters
    kept = np.empty((options.iters, layout.dim))
    warmup_buffer = np.empty((options.warmup, layout.dim))
    refreshes = {
        options.warmup // 3: 6,
        (2 * options.warmup) // 3: 3,
        (9 * options.warmup) // 10: 2,
    }
    slice_widths = np.ones(layout.dim)

    for it in range(total_iters):
        warming = it < options.warmup
        if options.slice_every and it % options.slice_every == 0:
            current, cur_lp = _slice_sweep(
                target, current, cur_lp, slice_widths, rng
            )
        for name, idx in blocks:
            kind = rng.random()
            prop = current.copy()
            if kind < 0.15 and name != "all":
                # independence draw from the block prior; prior terms cancel
                # in the Hastings ratio, leaving the likelihood ratio plus
                # the prior terms re-added through the joint target
                prop[idx] = prior_block_draw(name, idx)
                prop_lp = target(prop)
                log_alpha = (
                    prop_lp
                    - cur_lp
                    - block_log_prior(prop, name, idx)
                    + block_log_prior(current, name, idx)
                )
                adapt = False
            else:
                scale = math.exp(log_scales[name])
                if kind > 0.92:
                    scale *= 8.0
                step = scale * (chol[name] @ rng.standard_normal(len(idx)))
                prop[idx] = prop[idx] + step
                prop_lp = target(prop)
                log_alpha = prop_lp - cur_lp
                adapt = kind <= 0.92
            accepted = math.log(rng.random()) < log_alpha
            if accepted:
                current, cur_lp = prop, prop_lp
            if warming:
                if adapt:
                    # Robbins-Monro drift toward the target acceptance rate
                    alpha = min(1.0, math.exp(min(log_alpha, 0.0)))
                    gamma = (it + 1) ** -0.6
                    log_scales[name] += gamma * (alpha - options.target_accept)
            else:
                proposals[name] += 1
                accept_counts[name] += accepted
        if warming:
            warmup_buffer[it] = current
            if it + 1 in refreshes:
                window = warmup_buffer[(it + 1) // refreshes[it + 1] : it + 1]
                sd = window.std(axis=0)
                slice_widths = np.where(sd > 1e-8, 2.5 * sd, slice_widths)
                for name, idx in blocks:
                    cov = np.cov(window[:, idx], rowvar=False).reshape(
                        len(idx), len(idx)
                    )
                    if np.all(np.isfinite(cov)) and np.trace(cov) > 0:
                        chol[name] = _chol_with_jitter(cov)
                        log_scales[name] = math.log(2.38 / math.sqrt(len(idx)))
        else:
            kept[it - options.warmup] = current

    acceptance = {
        name: (accept_counts[name] / proposals[name] if proposals[name] else 0.0)
        for name, _ in blocks
    }
    return kept, acceptance


def sample_posterior(
    data,
    shape: TrialShape,
    options: McmcOptions | None = None,
    a_error_kernel: np.ndarray | None = None,
    estimands: list[EstimandSpec] | None = None,
    allow_unidentified: bool = False,
) -> FitResult:
    """Blockwise adaptive random-walk Metropolis over the model posterior.

    ``data`` is a dataset or cell-count array.  Scale adaptation (Robbins-
    Monro toward 0.23 acceptance per block, with a diagonal preconditioner
    estimated mid-warmup) runs during warmup only; chains are deterministic
    given the seed, each drawing from its own derived stream.

    Designs below the minimum identifiable size are refused unless
    ``allow_unidentified`` is set (the refusal can be overridden for
    sensitivity work; the result metadata records the warning).
    """
    options = options or McmcOptions()
    counts = _as_cell_counts(data, shape)
    metadata = {
        "stratum_order": "ascending index; wide covariate-mixture priors on "
        "strata 0, 1, and the always-infected stratum",
        "sn_y_note": "sn_Y is not identified by these designs; its posterior "
        "is prior-dominated and VE ratios do not depend on it",
    }
    min_r, min_a = minimum_design(shape.n_z)
    if shape.n_r < min_r or shape.n_a < min_a:
        message = (
            f"design (n_r={shape.n_r}, n_a={shape.n_a}) is below the minimum "
            f"identifiable size ({min_r}, {min_a})"
        )
        if not allow_unidentified:
            raise ValueError(message + "; pass allow_unidentified=True to force")
        metadata["identification_warning"] = message

    layout = ParamLayout.build(shape)
    if estimands is None:
        estimands = default_estimands(shape.n_z)

    if options.chain_workers > 1 and options.chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(
            max_workers=min(options.chain_workers, options.chains)
        ) as pool:
            results = list(
                pool.map(
                    _run_chain,
                    range(options.chains),
                    [layout] * options.chains,
                    [counts] * options.chains,
                    [a_error_kernel] * options.chains,
                    [options] * options.chains,
                )
            )
    else:
        results = [
            _run_chain(chain, layout, counts, a_error_kernel, options)
            for chain in range(options.chains)
        ]
    kept_all = [kept for kept, _ in results]
    acceptance_all = [acc for _, acc in results]
    draws = np.stack(kept_all)  # (chains, iters, dim)

    rhat = np.array(
        [split_rhat(draws[:, :, d]) for d in range(layout.dim)]
    )
    bulk = np.array([ess_bulk(draws[:, :, d]) for d in range(layout.dim)])
    tail = np.array([ess_tail(draws[:, :, d]) for d in range(layout.dim)])

    flat = draws.reshape(-1, layout.dim)
    est = estimand_draws(flat, layout, estimands)
    est_by_chain = {
        label: np.asarray(v).reshape(options.chains, options.iters)
        for label, v in est.items()
    }
    est_diag = {
        label: {
            "rhat": split_rhat(chains),
            "ess_bulk": ess_bulk(chains),
            "ess_tail": ess_tail(chains),
        }
        for label, chains in est_by_chain.items()
        if not label.startswith("_")
    }

    rates = constrain_rates(flat[:, layout.slices["misclass"]])
    point = {
        "posterior_mean": flat.mean(axis=0).tolist(),
        "rates_mean": {
            name: float(rates[:, i].mean()) for i, name in enumerate(MISCLASS_NAMES)
        },
    }
    diagnostics = {
        "rhat": rhat,
        "ess_bulk": bulk,
        "ess_tail": tail,
        "acceptance": acceptance_all,
        "estimands": est_diag,
        "max_rhat": float(np.nanmax(rhat)),
        "frac_rhat_below_1_01": float(np.mean(rhat < 1.01)),
    }
    return FitResult(
        draws=draws,
        layout=layout,
        estimand_draws=est_by_chain,
        point=point,
        diagnostics=diagnostics,
        metadata=metadata,
    )


def map_estimate(
    data,
    shape: TrialShape,
    a_error_kernel: np.ndarray | None = None,
    seed: int = 0,
    max_iter: int = 500,
) -> tuple[np.ndarray, float]:
    """Posterior mode by quasi-Newton ascent with finite-difference gradients.

    A fast point estimate; decision rules use posterior draws, not this.
    """
    layout = ParamLayout.build(shape)
    counts = _as_cell_counts(data, shape)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    x0 = _prior_draw(layout, rng)

    def neg(v):
        val = log_posterior(v, layout, counts, a_error_kernel)
        return -val if np.isfinite(val) else 1e12

    res = optimize.minimize(
        neg, x0, method="L-BFGS-B", options={"maxiter": max_iter}
    )
    return res.x, -float(res.fun)


# ---------------------------------------------------------------------------
# Decision rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionRule:
    """Joint posterior-probability rule over estimand thresholds."""

    thresholds: tuple[tuple[EstimandSpec, float], ...]
    posterior_prob_cutoff: float

    def __post_init__(self):
        if not 0.0 <= self.posterior_prob_cutoff < 1.0 or not self.thresholds:
            raise ValueError("need thresholds and a cutoff in [0, 1)")

    def specs(self) -> list[EstimandSpec]:
        return [spec for spec, _ in self.thresholds]


def severe_rule(n_z: int) -> DecisionRule:
    """Reject when jointly confident of efficacy against outcome and infection.

    Posterior probability at least 0.9 that the newest arm beats arm 1 by
    more than 0.1 on the post-infection outcome (always-infected stratum) and
    by more than 0.3 on infection.
    """
    always = stratum_from_index(2**n_z - 1, n_z)
    return DecisionRule(
        thresholds=(
            (
                EstimandSpec(
                    kind="VE_I_marginal", arms=(n_z, 1), stratum=always
                ),
                0.1,
            ),
            (EstimandSpec(kind="VE_S", arms=(n_z, 1)), 0.3),
        ),
        posterior_prob_cutoff=0.9,
    )


def transmission_rule() -> DecisionRule:
    """Household-study rule: efficacy against transmission at cutoff 0.95."""
    always = stratum_from_index(3, 2)
    return DecisionRule(
        thresholds=(
            (EstimandSpec(kind="VE_T", arms=(2, 1), stratum=always), 0.0),
            (EstimandSpec(kind="VE_S", arms=(2, 1)), 0.3),
        ),
        posterior_prob_cutoff=0.95,
    )


def default_estimands(n_z: int) -> list[EstimandSpec]:
    always = stratum_from_index(2**n_z - 1, n_z)
    specs = [
        EstimandSpec(kind="VE_S", arms=(n_z, 1)),
        EstimandSpec(kind="VE_I_marginal", arms=(n_z, 1), stratum=always),
    ]
    if n_z == 2:
        specs.append(EstimandSpec(kind="VE_T", arms=(2, 1), stratum=always))
    return specs


def decide(fit: FitResult, rule: DecisionRule) -> dict:
    """Evaluate a decision rule on posterior draws.

    ``posterior_prob`` is the fraction of draws satisfying every threshold
    jointly; the null is rejected when it reaches the rule's cutoff.
    """
    labels = [spec.label() for spec in rule.specs()]
    missing = [lab for lab in labels if lab not in fit.estimand_draws]
    if missing:
        extra = estimand_draws(
            fit.draws.reshape(-1, fit.layout.dim), fit.layout, rule.specs()
        )
        for lab in missing:
            fit.estimand_draws[lab] = np.asarray(extra[lab]).reshape(
                fit.draws.shape[0], fit.draws.shape[1]
            )
    pooled = [fit.pooled(spec.label()) for spec in rule.specs()]
    if any(len(p) == 0 for p in pooled):
        raise ValueError("no posterior draws available")
    ok = np.ones_like(pooled[0], dtype=bool)
    for draws, (_, cutoff) in zip(pooled, rule.thresholds):
        ok &= draws > cutoff
    prob = float(np.mean(ok))
    return {
        "posterior_prob": prob,
        "reject": prob >= rule.posterior_prob_cutoff,
        "cutoff": rule.posterior_prob_cutoff,
        "thresholds": {
            spec.label(): thr for spec, thr in rule.thresholds
        },
    }
