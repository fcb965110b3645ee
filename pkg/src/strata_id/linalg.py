"""Dense linear-algebra kernel: ranks, Kruskal rank, pseudoinverse, and a
constrained CP (triple-product) decomposition solver.

Everything here operates on small arrays (at most a few hundred entries), so
plain SVD-based routines and an exhaustive subset search for the Kruskal rank
are both exact enough and fast enough.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RANK_TOL = 1e-10
KRUSKAL_MAX_COLS = 24


class CpDecompositionError(RuntimeError):
    """Raised when no restart of the CP solver reaches the requested residual."""

    def __init__(self, message: str, best_rel_residual: float):
        super().__init__(f"{message} (best relative residual {best_rel_residual:.3e})")
        self.best_rel_residual = best_rel_residual


def numerical_rank(b: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    if b.size == 0:
        return 0
    s = np.linalg.svd(b, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def kruskal_rank(b: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> int:
    """Largest ``k`` such that every ``k``-column subset of ``b`` has rank ``k``.

    Exhaustive subset search, smallest ``k`` first, stopping at the first
    deficient subset.  Returns 0 if any column is numerically zero.  Matrices
    with more than 24 columns are rejected rather than silently attempted.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.size == 0:
        raise ValueError("kruskal_rank needs a non-empty 2-d matrix")
    n_rows, n_cols = b.shape
    if n_cols > KRUSKAL_MAX_COLS:
        raise ValueError(
            f"matrix has {n_cols} columns; Kruskal-rank search is capped at "
            f"{KRUSKAL_MAX_COLS}"
        )
    max_k = min(n_rows, n_cols)
    for k in range(1, max_k + 1):
        for cols in itertools.combinations(range(n_cols), k):
            if numerical_rank(b[:, cols], tol) < k:
                return k - 1
    return max_k


def pseudoinverse(b: np.ndarray, rcond: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose inverse via SVD, singular values cut at ``rcond * max``."""
    b = np.asarray(b, dtype=float)
    if b.size == 0:
        return b.T.copy()
    return np.linalg.pinv(b, rcond=rcond)


def triple_product(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Three-way array ``X`` with ``X[i,j,k] = sum_r a[i,r] b[j,r] c[k,r]``."""
    a, b, c = (np.asarray(m, dtype=float) for m in (a, b, c))
    if not (a.ndim == b.ndim == c.ndim == 2):
        raise ValueError("triple_product needs three matrices")
    if not (a.shape[1] == b.shape[1] == c.shape[1]):
        raise ValueError(
            f"inner dimensions differ: {a.shape[1]}, {b.shape[1]}, {c.shape[1]}"
        )
    return np.einsum("ir,jr,kr->ijk", a, b, c)


@dataclass
class CpConstraints:
    """Constraints enforced during ``cp_decompose``.

    ``fixed_a`` pins the first factor verbatim; the two sum flags renormalize
    rows of B / columns of C onto the probability simplex after every update,
    and ``nonneg`` clamps negative entries first.
    """

    fixed_a: np.ndarray | None = None
    rows_of_b_sum_to_one: bool = False
    columns_of_c_sum_to_one: bool = False
    nonneg: bool = False


@dataclass
class CpFactors:
    """Result of a CP decomposition ``X ~ [a, b, c]``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    rel_residual: float
    n_iter: int
    converged: bool
    restart: int = 0
    constraints: CpConstraints = field(default_factory=CpConstraints)

    def reconstruct(self) -> np.ndarray:
        return triple_product(self.a, self.b, self.c)


def _khatri_rao(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Columnwise Kronecker product; row (i1, i2) ordered with i1 major."""
    r = m1.shape[1]
    return np.einsum("ir,jr->ijr", m1, m2).reshape(-1, r)


def _project_simplex_rows(m: np.ndarray) -> np.ndarray:
    m = np.clip(m, 0.0, None)
    sums = m.sum(axis=1, keepdims=True)
    bad = sums[:, 0] <= 0
    if np.any(bad):
        m[bad] = 1.0 / m.shape[1]
        sums = m.sum(axis=1, keepdims=True)
    return m / sums


def _ls_factor(unfolding: np.ndarray, m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    # Solves min ||unfolding - F * (m1 (x) m2)^T||_F for F.
    gram = (m1.T @ m1) * (m2.T @ m2)
    return unfolding @ _khatri_rao(m1, m2) @ np.linalg.pinv(gram)


def _apply_constraints(b, c, constraints: CpConstraints):
    if constraints.nonneg:
        b = np.clip(b, 0.0, None)
        c = np.clip(c, 0.0, None)
    if constraints.rows_of_b_sum_to_one:
        b = _project_simplex_rows(b)
    if constraints.columns_of_c_sum_to_one:
        c = _project_simplex_rows(c.T).T
    return b, c


def als_step(x, a, b, c, constraints: CpConstraints, update_a: bool):
    """One sweep of alternating least squares with constraint projection."""
    i_dim, j_dim, k_dim = x.shape
    if update_a:
        x1 = x.transpose(0, 2, 1).reshape(i_dim, k_dim * j_dim)
        a = _ls_factor(x1, c, b)
        if constraints.nonneg:
            a = np.clip(a, 0.0, None)
    x2 = x.transpose(1, 2, 0).reshape(j_dim, k_dim * i_dim)
    b = _ls_factor(x2, c, a)
    b, c = _apply_constraints(b, c, constraints)
    x3 = x.transpose(2, 1, 0).reshape(k_dim, j_dim * i_dim)
    c = _ls_factor(x3, b, a)
    b, c = _apply_constraints(b, c, constraints)
    return a, b, c


def _random_factors(x, rank, constraints, rng):
    i_dim, j_dim, k_dim = x.shape
    if constraints.fixed_a is not None:
        a = np.array(constraints.fixed_a, dtype=float)
    else:
        a = rng.dirichlet(np.ones(i_dim), size=rank).T * x.sum()
    b = rng.dirichlet(np.ones(rank), size=j_dim)
    c = rng.dirichlet(np.ones(k_dim), size=rank).T
    b, c = _apply_constraints(b, c, constraints)
    return a, b, c


def run_als(
    x: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    constraints: CpConstraints,
    max_iter: int,
    conv_tol: float,
    stall_tol: float = 1e-4,
) -> CpFactors:
    """Iterate ALS sweeps from the given factors until the relative residual
    reaches ``conv_tol`` or stops improving.  Best-effort: never raises."""
    x = np.asarray(x, dtype=float)
    norm_x = np.linalg.norm(x)
    if norm_x == 0.0:
        return CpFactors(a * 0, b * 0, c * 0, 0.0, 0, True, constraints=constraints)
    update_a = constraints.fixed_a is None
    prev = np.inf
    rel = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        a, b, c = als_step(x, a, b, c, constraints, update_a)
        rel = np.linalg.norm(x - triple_product(a, b, c)) / norm_x
        if rel <= conv_tol:
            return CpFactors(a, b, c, rel, it, True, constraints=constraints)
        # stall: relative improvement below stall_tol for this sweep
        if prev - rel <= stall_tol * max(rel, 1e-300) and it > 10:
            break
        prev = rel
    return CpFactors(a, b, c, rel, it, rel <= conv_tol, constraints=constraints)


def _lm_polish(x, a, b, c, constraints: CpConstraints, conv_tol: float) -> CpFactors:
    """Levenberg-Marquardt refinement of an ALS state.

    Simplex-constrained factors are parameterized by softmax so the
    constraints hold by construction; a fixed first factor is excluded from
    the optimization.  Pulls slowly-converging ALS iterates ("swamps") down
    to the requested residual.
    """
    from scipy import optimize

    norm_x = np.linalg.norm(x)
    free_a = constraints.fixed_a is None
    j_dim, k_dim = b.shape[0], c.shape[0]
    rank = b.shape[1]

    def softmax(logits, axis):
        e = np.exp(logits - logits.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def pack():
        parts = []
        if free_a:
            parts.append(a.ravel())
        if constraints.rows_of_b_sum_to_one:
            tb = np.log(np.clip(b, 1e-12, None))
            parts.append((tb - tb[:, -1:])[:, :-1].ravel())
        else:
            parts.append(b.ravel())
        if constraints.columns_of_c_sum_to_one:
            tc = np.log(np.clip(c, 1e-12, None))
            parts.append((tc - tc[-1:, :])[:-1, :].ravel())
        else:
            parts.append(c.ravel())
        return np.concatenate(parts)

    def unpack(v):
        pos = 0
        if free_a:
            aa = v[: a.size].reshape(a.shape)
            pos = a.size
        else:
            aa = constraints.fixed_a
        if constraints.rows_of_b_sum_to_one:
            nb = j_dim * (rank - 1)
            tb = v[pos : pos + nb].reshape(j_dim, rank - 1)
            bb = softmax(np.hstack([tb, np.zeros((j_dim, 1))]), axis=1)
            pos += nb
        else:
            bb = v[pos : pos + b.size].reshape(b.shape)
            pos += b.size
        if constraints.columns_of_c_sum_to_one:
            tc = v[pos:].reshape(k_dim - 1, rank)
            cc = softmax(np.vstack([tc, np.zeros((1, rank))]), axis=0)
        else:
            cc = v[pos:].reshape(c.shape)
        return aa, bb, cc

    def resid(v):
        aa, bb, cc = unpack(v)
        return (x - triple_product(aa, bb, cc)).ravel()

    sol = optimize.least_squares(
        resid, pack(), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
        max_nfev=4000,
    )
    aa, bb, cc = unpack(sol.x)
    rel = np.linalg.norm(x - triple_product(aa, bb, cc)) / norm_x
    return CpFactors(aa, bb, cc, rel, 0, rel <= conv_tol, constraints=constraints)


def cp_decompose(
    x: np.ndarray,
    rank: int,
    constraints: CpConstraints | None = None,
    restarts: int = 20,
    max_iter: int = 2000,
    conv_tol: float = 1e-10,
    seed: int = 0,
    init: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> CpFactors:
    """Constrained CP decomposition of a three-way array by multi-start ALS.

    Parameters
    ----------
    x : ndarray, shape (I, J, K)
    rank : int
        Number of components; the caller is responsible for the rank
        conditions under which the decomposition is unique.
    constraints : CpConstraints
        Fixed first factor and/or simplex renormalization of B rows and C
        columns.
    restarts : int
        Independent random initializations; each restart draws from a
        deterministic stream derived from ``(seed, restart index)``.
    init : optional (a, b, c)
        Warm start used for restart 0.

    Raises
    ------
    CpDecompositionError
        If no restart reaches ``conv_tol`` relative residual.
    """
    constraints = constraints or CpConstraints()
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ValueError("x must be a three-way array")
    if constraints.fixed_a is not None and constraints.fixed_a.shape != (
        x.shape[0],
        rank,
    ):
        raise ValueError(
            f"fixed_a shape {constraints.fixed_a.shape} does not match "
            f"({x.shape[0]}, {rank})"
        )
    best: CpFactors | None = None
    for restart in range(max(restarts, 1)):
        rng = np.random.Generator(np.random.Philox(key=[seed, restart]))
        if restart == 0 and init is not None:
            a, b, c = (np.array(m, dtype=float) for m in init)
        else:
            a, b, c = _random_factors(x, rank, constraints, rng)
        result = run_als(x, a, b, c, constraints, max_iter, conv_tol)
        if not result.converged and result.rel_residual < 1e-2:
            polished = _lm_polish(
                x, result.a, result.b, result.c, constraints, conv_tol
            )
            if polished.rel_residual < result.rel_residual:
                result = polished
        result.restart = restart
        if best is None or result.rel_residual < best.rel_residual:
            best = result
        if best.converged:
            break
    if not best.converged:
        raise CpDecompositionError(
            f"CP decomposition did not reach conv_tol={conv_tol:g} after "
            f"{restarts} restarts",
            best.rel_residual,
        )
    return best


def match_columns(reference: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """Greedy column assignment of ``estimate`` onto ``reference``.

    For each reference column in order, picks the unused estimate column with
    the smallest Euclidean distance (ties broken by lowest column index).
    Returns the permutation ``perm`` such that ``estimate[:, perm]`` aligns
    with ``reference``.
    """
    if reference.shape != estimate.shape:
        raise ValueError("shapes must match for column matching")
    n = reference.shape[1]
    free = list(range(n))
    perm = np.empty(n, dtype=int)
    for j in range(n):
        dists = [np.linalg.norm(reference[:, j] - estimate[:, m]) for m in free]
        pick = int(np.argmin(dists))
        perm[j] = free.pop(pick)
    return perm
