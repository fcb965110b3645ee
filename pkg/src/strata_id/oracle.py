"""Population-level forward map and its constructive inverse.

``forward_probabilities`` maps a complete generative parameter set to the
exact observable cell probabilities of a multi-arm, multi-site trial, with or
without misclassification of infection status and the post-infection outcome.
``identify_from_population`` runs the inverse pipeline: a constrained
triple-product decomposition of the observed (infection status, covariate)
array whose first factor is restricted to the misclassification family,
followed by closed-form recovery of the outcome layer.  Also houses the
closed-form estimands, the asymptotic identification regions for the outcome
test rates, and the two-arm sensitivity algebra for designs where point
identification is unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .design import check_design
from .linalg import CpConstraints, als_step, pseudoinverse, triple_product
from .strata import arm_infection_mask

CELL_SUM_TOL = 1e-12


class IdentificationError(RuntimeError):
    """Raised when population cells violate the identification hypotheses."""


class EstimandError(ValueError):
    """Raised for undefined estimands (zero denominators, bad strata)."""


def _as_simplex(arr, axis, name, tol=1e-8):
    arr = np.asarray(arr, dtype=float)
    if np.any(arr < -tol):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} does not sum to 1 along axis {axis}")
    return arr


@dataclass(frozen=True)
class PopulationParams:
    """Complete generative parameter set at the population level.

    Attributes
    ----------
    theta : ndarray, shape (n_r, n_x, n_strata)
        Strata proportions per site and pretreatment-covariate level.
    a : ndarray, shape (n_strata, n_x, n_a)
        Covariate mixture per stratum and pretreatment-covariate level.
    beta : ndarray, shape (n_strata, n_z, n_a, n_x)
        Post-infection outcome probabilities; NaN where the stratum is not
        infected under the arm.  The trailing axis carries
        pretreatment-covariate levels so the forward map stays exact when the
        outcome model shifts with that covariate.
    sn_s, sp_s, sn_y, sp_y : float
        Sensitivities and specificities for the infection test and the
        outcome measurement.
    x_dist, z_dist, r_dist : ndarray
        Marginal weights for the pretreatment covariate, randomization arms,
        and sites.  ``r_dist`` weights the site mixture when marginal
        estimands are formed.
    """

    theta: np.ndarray
    a: np.ndarray
    beta: np.ndarray
    sn_s: float = 1.0
    sp_s: float = 1.0
    sn_y: float = 1.0
    sp_y: float = 1.0
    x_dist: np.ndarray | None = None
    z_dist: np.ndarray | None = None
    r_dist: np.ndarray | None = None

    def __post_init__(self):
        theta = _as_simplex(self.theta, 2, "theta")
        a = _as_simplex(self.a, 2, "a")
        beta = np.asarray(self.beta, dtype=float)
        n_r, n_x, n_u = theta.shape
        n_z = int(round(np.log2(n_u)))
        if 2**n_z != n_u:
            raise ValueError(f"{n_u} strata is not a power of two")
        if a.shape[0] != n_u or a.shape[1] != n_x:
            raise ValueError(f"a has shape {a.shape}, wanted ({n_u}, {n_x}, n_a)")
        if beta.shape != (n_u, n_z, a.shape[2], n_x):
            raise ValueError(
                f"beta has shape {beta.shape}, wanted "
                f"({n_u}, {n_z}, {a.shape[2]}, {n_x})"
            )
        mask = arm_infection_mask(n_z)  # (n_z, n_u)
        defined = ~np.isnan(beta)
        expected = np.broadcast_to(
            (mask.T == 1.0)[:, :, None, None], beta.shape
        )
        if not np.array_equal(defined, expected):
            raise ValueError(
                "beta must be defined exactly where the stratum is infected "
                "under the arm (NaN elsewhere)"
            )
        with np.errstate(invalid="ignore"):
            if np.any((beta < 0) | (beta > 1)):
                raise ValueError("beta entries must be probabilities")
        for name in ("sn_s", "sp_s", "sn_y", "sp_y"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "beta", beta)
        for name, size in (("x_dist", n_x), ("z_dist", n_z), ("r_dist", n_r)):
            v = getattr(self, name)
            v = np.full(size, 1.0 / size) if v is None else np.asarray(v, float)
            if v.shape != (size,):
                raise ValueError(f"{name} must have length {size}")
            object.__setattr__(self, name, _as_simplex(v, 0, name))

    @property
    def n_r(self) -> int:
        return self.theta.shape[0]

    @property
    def n_x(self) -> int:
        return self.theta.shape[1]

    @property
    def n_strata(self) -> int:
        return self.theta.shape[2]

    @property
    def n_z(self) -> int:
        return int(round(np.log2(self.n_strata)))

    @property
    def n_a(self) -> int:
        return self.a.shape[2]

    @staticmethod
    def from_single_x(theta, a, beta, **kwargs) -> "PopulationParams":
        """Build params without pretreatment-covariate variation.

        ``theta`` is (n_r, n_strata), ``a`` is (n_strata, n_a) and ``beta``
        is (n_strata, n_z, n_a).
        """
        theta = np.asarray(theta, float)[:, None, :]
        a = np.asarray(a, float)[:, None, :]
        beta = np.asarray(beta, float)[:, :, :, None]
        return PopulationParams(theta=theta, a=a, beta=beta, **kwargs)


@dataclass(frozen=True)
class ObservableCells:
    """Observable cell probabilities, marginal over the pretreatment covariate.

    ``p`` holds the error-free cells and ``q`` the misclassified ones, both
    with axes (s, y, covariate k, arm z, site r).  The (s=0, y=1) slice of
    ``p`` is structurally zero: absent infection the outcome is undefined.
    Cells are conditional on (arm, site), so each (z, r) slab sums to one.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ("p", "q"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 5 or arr.shape[:2] != (2, 2):
                raise ValueError(f"{name} must have shape (2, 2, n_a, n_z, n_r)")
            if np.any(arr < -CELL_SUM_TOL):
                raise ValueError(f"{name} has negative cells")
            slab = arr.sum(axis=(0, 1, 2))
            if np.any(np.abs(slab - 1.0) > 1e-9):
                raise ValueError(f"per-(z, r) cells of {name} must sum to 1")
            object.__setattr__(self, name, arr)
        if np.any(self.p[0, 1] != 0.0):
            raise ValueError("p[0, 1] cells are structurally absent")

    @property
    def n_a(self) -> int:
        return self.p.shape[2]

    @property
    def n_z(self) -> int:
        return self.p.shape[3]

    @property
    def n_r(self) -> int:
        return self.p.shape[4]


def noiseless_cells(params: PopulationParams) -> tuple[np.ndarray, np.ndarray]:
    """Error-free mixture probabilities, marginalized over the x covariate.

    Returns ``(p1y, p0)`` with ``p1y`` of shape (2, n_a, n_z, n_r) holding the
    infected cells by outcome value and ``p0`` of shape (n_a, n_z, n_r) the
    uninfected cells.
    """
    mask = arm_infection_mask(params.n_z)
    beta0 = np.nan_to_num(params.beta, nan=0.0)
    w = params.x_dist
    # p11[k,z,r] = sum_{u,x} w_x 1{u_z=1} a[u,x,k] theta[r,x,u] beta[u,z,k,x]
    p11 = np.einsum(
        "zu,uxk,rxu,uzkx,x->kzr", mask, params.a, params.theta, beta0, w
    )
    p1plus = np.einsum("zu,uxk,rxu,x->kzr", mask, params.a, params.theta, w)
    p10 = p1plus - p11
    p0 = np.einsum("zu,uxk,rxu,x->kzr", 1.0 - mask, params.a, params.theta, w)
    return np.stack([p10, p11]), p0


def misclassify_cells(
    p1y: np.ndarray,
    p0: np.ndarray,
    sn_s: float,
    sp_s: float,
    sn_y: float,
    sp_y: float,
) -> np.ndarray:
    """Apply the three-term misclassification expansion to error-free cells.

    Returns the (2, 2, n_a, n_z, n_r) array of observed-cell probabilities.
    """
    p10, p11 = p1y[0], p1y[1]
    q = np.empty((2, 2) + p0.shape)
    for s in (0, 1):
        ws = sn_s if s == 1 else 1.0 - sn_s
        vs = 1.0 - sp_s if s == 1 else sp_s
        for y in (0, 1):
            wy = sn_y if y == 1 else 1.0 - sn_y
            vy = 1.0 - sp_y if y == 1 else sp_y
            q[s, y] = ws * (wy * p11 + vy * p10) + vs * vy * p0
    return q


def forward_probabilities(params: PopulationParams) -> ObservableCells:
    """Exact observable cell probabilities implied by ``params``.

    The error-free cells mix strata proportions, covariate mixtures, and
    outcome probabilities per arm and site; the misclassified cells apply the
    sensitivity/specificity expansion for the infection test and outcome
    measurement on top.
    """
    p1y, p0 = noiseless_cells(params)
    p = np.zeros((2, 2) + p0.shape)
    p[1] = p1y
    p[0, 0] = p0
    q = misclassify_cells(p1y, p0, params.sn_s, params.sp_s, params.sn_y, params.sp_y)
    return ObservableCells(p=p, q=q)


def apply_covariate_error(cells: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Mix the covariate axis of a cell array through a misreading kernel.

    ``kernel[a, k]`` is the probability of recording level ``k + 1`` when the
    true level is ``a + 1``; rows must sum to one.
    """
    kernel = _as_simplex(kernel, 1, "A-error kernel")
    return np.einsum("syazr,ak->sykzr", cells, kernel)


# ---------------------------------------------------------------------------
# Inverse pipeline
# ---------------------------------------------------------------------------

HALF_INTERVALS = {"upper": (0.5, 1.0), "lower": (0.0, 0.5)}


def _structured_factor_basis(n_z: int):
    """Masks (m_sn, m_sp, m_const) so the infection-status factor is
    ``sn * m_sn + sp * m_sp + m_const``."""
    bits = arm_infection_mask(n_z)
    m_sn = np.vstack([bits, -bits])
    m_sp = np.vstack([-(1.0 - bits), (1.0 - bits)])
    m_const = np.vstack([1.0 - bits, bits])
    return m_sn, m_sp, m_const


def _stilde_array(cells_q: np.ndarray) -> np.ndarray:
    """(2 n_z, n_r, n_a) array of P(observed status, covariate | arm, site)."""
    marg = cells_q.sum(axis=1)  # (s, k, z, r)
    n_a, n_z, n_r = marg.shape[1:]
    x = np.empty((2 * n_z, n_r, n_a))
    for z in range(n_z):
        x[z] = marg[1, :, z, :].T
        x[n_z + z] = marg[0, :, z, :].T
    return x


def _update_sn_sp(x, b, c, basis, box):
    """Closed-form least-squares update of (sn, sp) given the other factors."""
    m_sn, m_sp, m_const = basis
    kr = np.einsum("kr,jr->kjr", c, b).reshape(-1, b.shape[1]).T  # (R, K*J)
    i_dim = x.shape[0]
    x1 = x.transpose(0, 2, 1).reshape(i_dim, -1)
    g1 = m_sn @ kr
    g2 = m_sp @ kr
    y = x1 - m_const @ kr
    g11 = float(np.vdot(g1, g1))
    g22 = float(np.vdot(g2, g2))
    g12 = float(np.vdot(g1, g2))
    b1 = float(np.vdot(g1, y))
    b2 = float(np.vdot(g2, y))
    det = g11 * g22 - g12 * g12
    if det <= 1e-300:
        return None
    sn = (b1 * g22 - b2 * g12) / det
    sp = (b2 * g11 - b1 * g12) / det
    lo, hi = box
    return float(np.clip(sn, lo, hi)), float(np.clip(sp, lo, hi))


def _structured_fit(
    x: np.ndarray,
    n_z: int,
    sn0: float,
    sp0: float,
    b0: np.ndarray | None,
    c0: np.ndarray | None,
    box: tuple[float, float],
    rng: np.random.Generator,
    max_iter: int,
    conv_tol: float,
    profile_only: bool = False,
    stall_factor: float = 1e-8,
):
    """Block coordinate descent over (sn, sp, strata-by-site, covariate mix).

    The infection-status factor stays inside the misclassification family by
    construction: the (sn, sp) block is a two-variable linear least-squares
    problem solved exactly each sweep.  Best-effort; never raises.
    """
    basis = _structured_factor_basis(n_z)
    n_u = 2**n_z
    n_r, n_a = x.shape[1], x.shape[2]
    constraints = CpConstraints(
        rows_of_b_sum_to_one=True, columns_of_c_sum_to_one=True, nonneg=True
    )
    sn, sp = sn0, sp0
    b = rng.dirichlet(np.ones(n_u), size=n_r) if b0 is None else b0.copy()
    c = rng.dirichlet(np.ones(n_a), size=n_u).T if c0 is None else c0.copy()
    norm_x = np.linalg.norm(x)
    rel = np.inf
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        a_mat = sn * basis[0] + sp * basis[1] + basis[2]
        _, b, c = als_step(x, a_mat, b, c, constraints, update_a=False)
        if not profile_only:
            upd = _update_sn_sp(x, b, c, basis, box)
            if upd is not None:
                sn, sp = upd
        a_mat = sn * basis[0] + sp * basis[1] + basis[2]
        rel = np.linalg.norm(x - triple_product(a_mat, b, c)) / norm_x
        if rel <= conv_tol:
            break
        if prev - rel <= stall_factor * max(rel, 1e-300) and it > 20:
            break
        prev = rel
    return sn, sp, b, c, rel, it


def _pack_state(sn, sp, b, c, box):
    """Map a feasible state onto the unconstrained polish coordinates."""
    lo, hi = box
    tb = np.log(np.clip(b, 1e-12, None))
    tb = (tb - tb[:, -1:])[:, :-1]
    tc = np.log(np.clip(c, 1e-12, None))
    tc = (tc - tc[-1:, :])[:-1, :]
    frac = (np.array([sn, sp]) - lo) / (hi - lo)
    ts = np.arctanh(np.clip(2.0 * frac - 1.0, -1 + 1e-9, 1 - 1e-9))
    return np.concatenate([ts, tb.ravel(), tc.ravel()])


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _unpack_state(v, n_r, n_a, n_u, box):
    lo, hi = box
    sn, sp = lo + (hi - lo) * (np.tanh(v[:2]) + 1.0) / 2.0
    tb = v[2 : 2 + n_r * (n_u - 1)].reshape(n_r, n_u - 1)
    b = _softmax(np.hstack([tb, np.zeros((n_r, 1))]), axis=1)
    tc = v[2 + n_r * (n_u - 1) :].reshape(n_a - 1, n_u)
    c = _softmax(np.vstack([tc, np.zeros((1, n_u))]), axis=0)
    return float(sn), float(sp), b, c


def _polish(x, n_z, sn, sp, b, c, box, fix_sn_sp=False):
    """Levenberg-Marquardt refinement of a candidate decomposition.

    Factors stay in the constraint family by construction (softmax rows and
    columns; the test rates squashed into the declared half-interval).
    Returns the refined state and its relative residual.
    """
    basis = _structured_factor_basis(n_z)
    n_u = 2**n_z
    n_r, n_a = x.shape[1], x.shape[2]
    norm_x = np.linalg.norm(x)
    if fix_sn_sp:
        sn_fixed, sp_fixed = sn, sp

    def resid(v):
        s1, s2, bb, cc = _unpack_state(v, n_r, n_a, n_u, box)
        if fix_sn_sp:
            s1, s2 = sn_fixed, sp_fixed
        a_mat = s1 * basis[0] + s2 * basis[1] + basis[2]
        return (x - triple_product(a_mat, bb, cc)).ravel()

    v0 = _pack_state(sn, sp, b, c, box)
    sol = optimize.least_squares(
        resid, v0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000
    )
    sn, sp, b, c = _unpack_state(sol.x, n_r, n_a, n_u, box)
    if fix_sn_sp:
        sn, sp = sn_fixed, sp_fixed
    a_mat = sn * basis[0] + sp * basis[1] + basis[2]
    rel = np.linalg.norm(x - triple_product(a_mat, b, c)) / norm_x
    return sn, sp, b, c, rel


def fit_structured_decomposition(
    cells_q: np.ndarray,
    n_z: int,
    half_interval: str = "upper",
    restarts: int = 20,
    conv_tol: float = 1e-10,
    seed: int = 0,
):
    """Profile the misclassification family over the status-by-covariate array.

    A coarse (sn, sp) grid inside the declared half-interval (random fills
    beyond it, one initialization per restart) seeds short runs of block
    coordinate descent; each triaged state is refined locally and the first
    refinement reaching ``conv_tol`` wins.  Returns ``(sn, sp, theta_by_site,
    covariate_mix, rel_residual)``.
    """
    x = _stilde_array(cells_q)
    box = HALF_INTERVALS[half_interval]
    lo, hi = box
    span = hi - lo
    pts = np.linspace(lo + 0.15 * span, hi - 0.02 * span, 4)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    starts: list[tuple[float, float]] = [(lo + 0.98 * span, lo + 0.98 * span)]
    starts += [(sn0, sp0) for sn0 in pts for sp0 in pts]
    while len(starts) < restarts:
        starts.append(
            (rng.uniform(lo + 0.05 * span, hi), rng.uniform(lo + 0.05 * span, hi))
        )
    starts = starts[: max(restarts, 1)]

    best = None
    for sn0, sp0 in starts:
        cand = _structured_fit(
            x, n_z, sn0, sp0, None, None, box, rng,
            max_iter=150, conv_tol=conv_tol, stall_factor=1e-4,
        )
        if cand[4] > conv_tol:
            cand = _polish(x, n_z, cand[0], cand[1], cand[2], cand[3], box)
        if best is None or cand[4] < best[4]:
            best = cand
        if best[4] <= conv_tol:
            break
    # Near-solutions can stall on nearly-flat directions (strata with
    # vanishing mass); alternating descent sweeps with refinement digs the
    # residual out without extra restarts.
    sn, sp, b, c, rel = best[:5]
    rounds = 0
    while conv_tol < rel < 1e-4 and rounds < 3:
        sn, sp, b, c, rel, _ = _structured_fit(
            x, n_z, sn, sp, b, c, box, rng,
            max_iter=500, conv_tol=conv_tol, stall_factor=1e-6,
        )
        if rel > conv_tol:
            sn, sp, b, c, rel = _polish(x, n_z, sn, sp, b, c, box)
        rounds += 1
    return sn, sp, b, c, rel


@dataclass
class IdentifiedQuantities:
    """Everything the observed-data distribution pins down.

    Outcome probabilities are reported as ``p_tilde`` (observed-outcome rates
    per stratum, arm, and covariate level) plus interval regions; point values
    of the underlying outcome probabilities appear only when the outcome-test
    sensitivity is supplied.
    """

    theta_hat: np.ndarray
    a_hat: np.ndarray
    sn_s_hat: float
    sp_s_hat: float
    sp_y_hat: float
    p_tilde: np.ndarray
    ve_s: np.ndarray
    ve_i_cond: np.ndarray
    ve_i_marg: np.ndarray
    ve_t_marg: np.ndarray | None
    sn_y_region: tuple[float, float]
    beta_region_low: np.ndarray
    beta_region_high: np.ndarray
    beta_hat: np.ndarray | None
    mode: str
    rel_residual: float
    messages: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "mode": self.mode,
            "rel_residual": self.rel_residual,
            "sn_S": self.sn_s_hat,
            "sp_S": self.sp_s_hat,
            "sp_Y": self.sp_y_hat,
            "theta": arr(self.theta_hat),
            "a": arr(self.a_hat),
            "p_tilde": arr(self.p_tilde),
            "ve_S": arr(self.ve_s),
            "ve_I_conditional": arr(self.ve_i_cond),
            "ve_I_marginal": arr(self.ve_i_marg),
            "ve_T_marginal": arr(self.ve_t_marg),
            "sn_Y_region": list(self.sn_y_region),
            "beta_region_low": arr(self.beta_region_low),
            "beta_region_high": arr(self.beta_region_high),
            "beta": arr(self.beta_hat),
            "messages": list(self.messages),
        }


def p_tilde_from_params(beta: np.ndarray, sn_y: float, sp_y: float) -> np.ndarray:
    """Observed-outcome rates implied by outcome probabilities and test rates."""
    r_y = sn_y + sp_y - 1.0
    return r_y * beta + (1.0 - sp_y)


def _ve_tables_from_p_tilde(p_tilde, sp_y, a_hat, r_y=None):
    """VE tables from observed-outcome rates; ratios cancel the unknown scale.

    ``p_tilde`` has axes (stratum, arm, covariate); NaN marks undefined
    entries.  ``r_y`` enables the risk-difference table.
    """
    c = 1.0 - sp_y
    num = p_tilde - c  # scale * beta
    with np.errstate(invalid="ignore", divide="ignore"):
        ve_cond = 1.0 - num[:, :, None, :] / num[:, None, :, :]
        mnum = np.nansum(num * a_hat[:, None, :], axis=2)
        mnum = np.where(np.all(np.isnan(num), axis=2), np.nan, mnum)
        ve_marg = 1.0 - mnum[:, :, None] / mnum[:, None, :]
        ve_t = None
        if r_y is not None:
            ve_t = (mnum[:, None, :] - mnum[:, :, None]) / r_y
    return ve_cond, ve_marg, ve_t


def _ve_s_from_theta(theta_by_site: np.ndarray, mask: np.ndarray, r_dist):
    risks = np.einsum("ru,zu,r->z", theta_by_site, mask, r_dist)
    with np.errstate(invalid="ignore", divide="ignore"):
        return 1.0 - risks[:, None] / risks[None, :], risks


def identify_from_population(
    cells: ObservableCells,
    n_z: int,
    n_a: int,
    n_r: int,
    half_interval: str = "upper",
    sn_y: float | None = None,
    r_dist: np.ndarray | None = None,
    restarts: int = 20,
    conv_tol: float = 1e-10,
    seed: int = 0,
) -> IdentifiedQuantities:
    """Recover every identified quantity from exact population cells.

    Pipeline: (1) form the status-by-covariate-by-site array; (2) fit the
    constrained triple-product decomposition whose first factor is profiled
    over the misclassification family; (3) the declared half-interval pins the
    stratum labeling; (4) read off the infection-test rates, strata
    proportions, and covariate mixtures; (5) invert the site mixture to get
    observed-outcome rates per stratum; (6) read the outcome-test specificity
    off the never-infected entries; (7) form efficacy estimands as ratios in
    which the remaining unknown scale cancels.

    Raises ``IdentificationError`` when the decomposition does not converge,
    the recovered rates leave the declared half-interval, or the recovered
    factors violate the rank hypotheses.
    """
    if half_interval not in HALF_INTERVALS:
        raise ValueError(f"half_interval must be one of {list(HALF_INTERVALS)}")
    if (cells.n_a, cells.n_z, cells.n_r) != (n_a, n_z, n_r):
        raise ValueError(
            f"cells have (n_a, n_z, n_r)=({cells.n_a}, {cells.n_z}, {cells.n_r}), "
            f"call said ({n_a}, {n_z}, {n_r})"
        )
    messages: list[str] = []

    # Error-free dispatch: try the boundary point first; exact fit means the
    # fixed binary factor of the error-free argument applies.
    x = _stilde_array(cells.q)
    box = HALF_INTERVALS[half_interval]
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    mode = "T2"
    if half_interval == "upper":
        sn, sp, b, c, rel, _ = _structured_fit(
            x, n_z, 1.0, 1.0, None, None, box, rng,
            max_iter=150, conv_tol=conv_tol, profile_only=True, stall_factor=1e-4,
        )
        if rel > conv_tol:
            sn, sp, b, c, rel = _polish(
                x, n_z, 1.0, 1.0, b, c, box, fix_sn_sp=True
            )
        if rel <= conv_tol:
            mode = "T1"
    if mode == "T2":
        sn, sp, b, c, rel = fit_structured_decomposition(
            cells.q, n_z, half_interval=half_interval, restarts=restarts,
            conv_tol=conv_tol, seed=seed,
        )
    if rel > conv_tol:
        raise IdentificationError(
            f"structured decomposition did not converge (relative residual "
            f"{rel:.3e}); identification hypotheses may be violated"
        )
    lo, hi = box
    eps = 1e-7
    interior = (lo + eps < sn <= hi + eps) and (lo + eps < sp <= hi + eps)
    if not interior:
        raise IdentificationError(
            f"recovered (sn_S, sp_S)=({sn:.4f}, {sp:.4f}) is outside the "
            f"declared {half_interval} half-interval; identification "
            "hypotheses violated"
        )

    theta_hat = b  # (n_r, n_strata)
    a_hat = c.T  # (n_strata, n_a)
    report = check_design(a_hat.T, theta_hat.T, sn, sp, theorem="T2")
    if not report.passed:
        raise IdentificationError(
            "recovered factors violate the rank hypotheses: "
            + "; ".join(report.messages)
        )
    messages.extend(report.warnings)

    # Outcome layer: invert the site mixture on the joint
    # (observed outcome = 1, covariate) rates.
    mask = arm_infection_mask(n_z)
    jy = cells.q[:, 1].sum(axis=0)  # (n_a, n_z, n_r): P(Ytilde=1, A=k | z, r)
    theta_pinv = pseudoinverse(theta_hat.T)  # (n_r, n_strata)
    w = np.einsum("kzr,ru->kzu", jy, theta_pinv)
    with np.errstate(invalid="ignore", divide="ignore"):
        py = w / a_hat.T[:, None, :]  # (n_a, n_z, n_strata)
    sp_y_hat = float(np.clip(1.0 - np.mean(py[:, 0, 0]), 0.0, 1.0))
    p_tilde = np.where(
        mask.T[:, :, None] == 1.0, py.transpose(2, 1, 0), np.nan
    )  # (n_strata, n_z, n_a)

    r_dist = (
        np.full(n_r, 1.0 / n_r) if r_dist is None else np.asarray(r_dist, float)
    )
    ve_s, _ = _ve_s_from_theta(theta_hat, mask, r_dist)
    r_y = None if sn_y is None else sn_y + sp_y_hat - 1.0
    ve_cond, ve_marg, ve_t = _ve_tables_from_p_tilde(p_tilde, sp_y_hat, a_hat, r_y)

    try:
        region = identification_region(p_tilde, sp_y_hat)
    except ValueError as exc:
        region = IdentificationRegion(
            sn_y=(np.nan, np.nan),
            beta_low=np.full_like(p_tilde, np.nan),
            beta_high=np.full_like(p_tilde, np.nan),
        )
        messages.append(f"identification region unavailable: {exc}")
    beta_hat = None
    if sn_y is not None:
        beta_hat = (p_tilde - (1.0 - sp_y_hat)) / r_y
    else:
        messages.append(
            "sn_Y unknown: outcome probabilities reported as intervals only"
        )

    return IdentifiedQuantities(
        theta_hat=theta_hat,
        a_hat=a_hat,
        sn_s_hat=float(sn),
        sp_s_hat=float(sp),
        sp_y_hat=sp_y_hat,
        p_tilde=p_tilde,
        ve_s=ve_s,
        ve_i_cond=ve_cond,
        ve_i_marg=ve_marg,
        ve_t_marg=ve_t,
        sn_y_region=region.sn_y,
        beta_region_low=region.beta_low,
        beta_region_high=region.beta_high,
        beta_hat=beta_hat,
        mode=mode,
        rel_residual=rel,
        messages=messages,
    )


def params_at_level(params: PopulationParams, x: int) -> PopulationParams:
    """Restriction of the parameters to one pretreatment-covariate level."""
    return PopulationParams(
        theta=params.theta[:, x : x + 1, :],
        a=params.a[:, x : x + 1, :],
        beta=params.beta[:, :, :, x : x + 1],
        sn_s=params.sn_s,
        sp_s=params.sp_s,
        sn_y=params.sn_y,
        sp_y=params.sp_y,
        z_dist=params.z_dist,
        r_dist=params.r_dist,
    )


def identify_heterogeneous(
    params: PopulationParams,
    half_interval: str = "upper",
    sn_y: float | None = None,
    restarts: int = 20,
    conv_tol: float = 1e-10,
    seed: int = 0,
) -> tuple[list[IdentifiedQuantities], dict]:
    """Identification when the pretreatment covariate shifts the design.

    The factorization underlying the inverse pipeline holds conditionally on
    each pretreatment level, not after marginalizing over a heterogeneous
    one, so each level is identified from its own conditional cells and the
    marginal estimands are assembled from the per-level recoveries.
    """
    levels = []
    for x in range(params.n_x):
        cells_x = forward_probabilities(params_at_level(params, x))
        levels.append(
            identify_from_population(
                cells_x,
                params.n_z,
                params.n_a,
                params.n_r,
                half_interval=half_interval,
                sn_y=sn_y,
                r_dist=params.r_dist,
                restarts=restarts,
                conv_tol=conv_tol,
                seed=seed + x,
            )
        )
    mask = arm_infection_mask(params.n_z)
    sn_s = float(np.mean([lv.sn_s_hat for lv in levels]))
    sp_s = float(np.mean([lv.sp_s_hat for lv in levels]))
    sp_y = float(np.mean([lv.sp_y_hat for lv in levels]))
    # infection risks and outcome scale-mixtures pooled over levels
    risks = np.zeros(params.n_z)
    theta_bar = np.zeros((params.n_x, 2**params.n_z))
    mnum = np.zeros((params.n_x, 2**params.n_z, params.n_z))
    for x, lv in enumerate(levels):
        _, risks_x = _ve_s_from_theta(lv.theta_hat, mask, params.r_dist)
        risks += params.x_dist[x] * risks_x
        theta_bar[x] = params.r_dist @ lv.theta_hat
        shifted = np.nan_to_num(lv.p_tilde - (1.0 - sp_y), nan=0.0)
        mnum[x] = np.einsum("uzk,uk->uz", shifted, lv.a_hat)
    with np.errstate(invalid="ignore", divide="ignore"):
        ve_s = 1.0 - risks[:, None] / risks[None, :]
        w_xu = params.x_dist[:, None] * theta_bar
        w_xu /= w_xu.sum(axis=0, keepdims=True)
        pooled = np.einsum("xu,xuz->uz", w_xu, mnum)
        pooled = np.where(mask.T == 1.0, pooled, np.nan)
        ve_i_marg = 1.0 - pooled[:, :, None] / pooled[:, None, :]
    combined = {
        "sn_S": sn_s,
        "sp_S": sp_s,
        "sp_Y": sp_y,
        "ve_S": ve_s,
        "ve_I_marginal": ve_i_marg,
    }
    return levels, combined


# ---------------------------------------------------------------------------
# Estimands
# ---------------------------------------------------------------------------


@dataclass
class VeEstimands:
    """Closed-form estimand tables computed from generative parameters."""

    ve_s: np.ndarray  # (n_z, n_z): 1 - risk_j / risk_k
    ve_i_cond: np.ndarray  # (n_strata, n_z, n_z, n_a)
    ve_i_marg: np.ndarray  # (n_strata, n_z, n_z)
    ve_t_marg: np.ndarray  # (n_strata, n_z, n_z): risk differences
    infection_risks: np.ndarray  # (n_z,)
    outcome_means: np.ndarray  # (n_strata, n_z): E[Y(z_j) | stratum]

    def composite(self, stratum_index: int, j: int, k: int, ref: int) -> float:
        """Difference of two efficacy ratios sharing reference arm ``ref``."""
        return float(
            self.ve_i_marg[stratum_index, j - 1, ref - 1]
            - self.ve_i_marg[stratum_index, k - 1, ref - 1]
        )

    def lookup(self, spec) -> float:
        """Scalar value of a named estimand."""
        j, k = spec.arms
        if spec.kind == "VE_S":
            return float(self.ve_s[j - 1, k - 1])
        if spec.kind == "composite":
            return self.composite(spec.stratum.index, *spec.composite_arms)
        u = spec.stratum.index
        if spec.kind == "VE_I_conditional":
            return float(self.ve_i_cond[u, j - 1, k - 1, spec.covariate_level - 1])
        if spec.kind == "VE_I_marginal":
            return float(self.ve_i_marg[u, j - 1, k - 1])
        if spec.kind == "VE_T":
            return float(self.ve_t_marg[u, j - 1, k - 1])
        raise EstimandError(f"unknown estimand kind {spec.kind}")


def ve_estimands(params: PopulationParams) -> VeEstimands:
    """Exact vaccine-efficacy estimands implied by generative parameters.

    Marginal quantities mix over sites and the pretreatment covariate with
    the weights carried by ``params``; conditional ones fix the covariate
    level and mix over the pretreatment covariate given stratum and level.
    """
    mask = arm_infection_mask(params.n_z)
    # infection risks per arm
    risks = np.einsum(
        "rxu,zu,r,x->z", params.theta, mask, params.r_dist, params.x_dist
    )
    if np.any(risks == 0.0):
        raise EstimandError("an arm has zero infection risk; VE_S undefined")
    ve_s = 1.0 - risks[:, None] / risks[None, :]

    # P(x | stratum) and P(x | stratum, covariate level)
    p_u_given_x = np.einsum("rxu,r->xu", params.theta, params.r_dist)
    joint_xu = params.x_dist[:, None] * p_u_given_x  # (n_x, n_u)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_x_given_u = joint_xu / joint_xu.sum(axis=0, keepdims=True)
        joint_xku = joint_xu[:, :, None] * params.a.transpose(1, 0, 2)  # x,u,k
        p_x_given_uk = joint_xku / joint_xku.sum(axis=0, keepdims=True)

    beta0 = np.nan_to_num(params.beta, nan=0.0)
    defined = ~np.isnan(params.beta[:, :, 0, 0])  # (n_u, n_z)
    # E[Y(z_j) | u, A=k] mixes over x given (u, k)
    e_cond = np.einsum("uzkx,xuk->uzk", beta0, p_x_given_uk)
    # E[Y(z_j) | u] mixes over (x, k) given u
    e_marg = np.einsum("uzkx,xu,uxk->uz", beta0, p_x_given_u, params.a)
    e_cond = np.where(defined[:, :, None], e_cond, np.nan)
    e_marg = np.where(defined, e_marg, np.nan)

    with np.errstate(invalid="ignore", divide="ignore"):
        ve_i_cond = 1.0 - e_cond[:, :, None, :] / e_cond[:, None, :, :]
        ve_i_marg = 1.0 - e_marg[:, :, None] / e_marg[:, None, :]
    ve_t_marg = e_marg[:, None, :] - e_marg[:, :, None]

    return VeEstimands(
        ve_s=ve_s,
        ve_i_cond=ve_i_cond,
        ve_i_marg=ve_i_marg,
        ve_t_marg=ve_t_marg,
        infection_risks=risks,
        outcome_means=e_marg,
    )


# ---------------------------------------------------------------------------
# Identification region for the outcome layer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentificationRegion:
    """Asymptotic region for the outcome-test sensitivity and probabilities."""

    sn_y: tuple[float, float]
    beta_low: np.ndarray
    beta_high: np.ndarray


def identification_region(p_tilde: np.ndarray, sp_y: float) -> IdentificationRegion:
    """Interval of outcome parameters consistent with observed-outcome rates.

    ``p_tilde`` entries must lie strictly inside ``(1 - sp_y, 1)``; NaN marks
    undefined (stratum, arm) pairs and is ignored.
    """
    p_tilde = np.asarray(p_tilde, dtype=float)
    finite = p_tilde[~np.isnan(p_tilde)]
    if finite.size == 0:
        raise ValueError("p_tilde has no defined entries")
    max_p = float(np.max(finite))
    if max_p >= 1.0:
        raise ValueError(f"max observed-outcome rate {max_p} >= 1; inconsistent")
    if np.any(finite <= 1.0 - sp_y):
        raise ValueError(
            "observed-outcome rates at or below the false-positive floor "
            f"(1 - sp_Y = {1.0 - sp_y:g}); inconsistent inputs"
        )
    shifted = p_tilde - (1.0 - sp_y)
    with np.errstate(invalid="ignore"):
        low = shifted / sp_y
        high = shifted / (max_p + sp_y - 1.0)
    return IdentificationRegion(sn_y=(max_p, 1.0), beta_low=low, beta_high=high)


# ---------------------------------------------------------------------------
# Two-arm sensitivity algebra (no sites, no covariates)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoArmSensitivityResult:
    """Reparameterized quantities for one sensitivity point.

    ``feasible`` is False when the point maps outside the probability
    simplexes; the raw values are still reported so the caller can see the
    violation rather than receiving silently clamped numbers.
    """

    theta_01: float
    theta_10: float
    theta_00: float
    phi_11: float
    phi_01: float
    phi_10: float
    phi_00: float
    ve: float
    feasible: bool
    messages: tuple[str, ...] = ()


def two_arm_sensitivity(
    p_obs: dict,
    beta_10_1: float,
    beta_01_2: float,
    theta_11: float,
    phi_10: float = 0.0,
) -> TwoArmSensitivityResult:
    """Map a sensitivity point to the identifiable two-arm subspace.

    ``p_obs`` holds the four observable cells ``p110, p111, p100, p101``
    (infected under placebo/vaccine, by outcome).  The three sensitivity
    parameters index the unidentified directions; ``phi_10`` (joint outcome
    under vaccine only) is a fourth unidentified coordinate needed to place
    the joint outcome probabilities, and defaults to zero.
    """
    p110, p111 = float(p_obs["p110"]), float(p_obs["p111"])
    p100, p101 = float(p_obs["p100"]), float(p_obs["p101"])
    for name, v in {"p110": p110, "p111": p111, "p100": p100, "p101": p101}.items():
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} is not a probability")
    for name, v in {
        "beta_10_1": beta_10_1,
        "beta_01_2": beta_01_2,
        "theta_11": theta_11,
        "phi_10": phi_10,
    }.items():
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} is not a probability")

    p1plus0 = p110 + p100
    p1plus1 = p111 + p101
    messages: list[str] = []
    if theta_11 > min(p1plus0, p1plus1) + 1e-12:
        messages.append(
            f"theta_11={theta_11:g} exceeds min(p_1+0, p_1+1)="
            f"{min(p1plus0, p1plus1):g}"
        )

    theta_01 = p1plus0 - theta_11
    theta_10 = p1plus1 - theta_11
    theta_00 = 1.0 - theta_11 - theta_10 - theta_01
    if theta_11 > 0:
        phi_11 = (p111 - beta_10_1 * p1plus1) / theta_11 - phi_10 + beta_10_1
        phi_01 = (
            (p110 + beta_10_1 * p1plus1 - beta_01_2 * p1plus0 - p111) / theta_11
            + phi_10
            + beta_01_2
            - beta_10_1
        )
    else:
        phi_11 = np.nan
        phi_01 = np.nan
        messages.append("theta_11=0: always-infected outcome layer undefined")
    phi_00 = 1.0 - phi_11 - phi_01 - phi_10

    denom = p110 + beta_01_2 * (theta_11 - p1plus0)
    if denom == 0.0:
        raise EstimandError("efficacy denominator is zero at this point")
    ve = 1.0 - (p111 + beta_10_1 * (theta_11 - p1plus1)) / denom

    checks = {
        "theta_01": theta_01,
        "theta_10": theta_10,
        "theta_00": theta_00,
        "phi_11": phi_11,
        "phi_01": phi_01,
        "phi_00": phi_00,
        "beta_11_1": phi_11 + phi_10,
        "beta_11_2": phi_11 + phi_01,
    }
    for name, v in checks.items():
        if not np.isfinite(v) or v < -1e-12 or v > 1.0 + 1e-12:
            messages.append(f"{name}={v:.6g} outside [0, 1]")
    return TwoArmSensitivityResult(
        theta_01=theta_01,
        theta_10=theta_10,
        theta_00=theta_00,
        phi_11=phi_11,
        phi_01=phi_01,
        phi_10=phi_10,
        phi_00=phi_00,
        ve=ve,
        feasible=not messages,
        messages=tuple(messages),
    )


def two_arm_observables(
    theta_01: float,
    theta_10: float,
    theta_11: float,
    beta_01_2: float,
    beta_10_1: float,
    beta_11_1: float,
    beta_11_2: float,
) -> dict:
    """Forward map of the two-arm model: stratum/outcome params to cells."""
    return {
        "p110": theta_01 * beta_01_2 + theta_11 * beta_11_2,
        "p111": theta_10 * beta_10_1 + theta_11 * beta_11_1,
        "p100": theta_01 * (1.0 - beta_01_2) + theta_11 * (1.0 - beta_11_2),
        "p101": theta_10 * (1.0 - beta_10_1) + theta_11 * (1.0 - beta_11_1),
    }
