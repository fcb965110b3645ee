"""Structural matrices of the identification argument and design checks.

The two fixed matrices built here encode, for every principal stratum, the
distribution of (possibly misclassified) observed infection status by arm.
``check_design`` verifies the rank hypotheses a proposed design must satisfy
for the strata proportions, covariate mixtures, and post-infection outcome
distributions to be recoverable from population data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import DEFAULT_RANK_TOL, kruskal_rank, numerical_rank
from .strata import arm_infection_mask

SIMPLEX_TOL = 1e-8

THEOREMS = ("T1", "T2", "C2", "C3")
_NOISY_THEOREMS = ("T2", "C3")


def build_S_matrix(n_z: int) -> np.ndarray:
    """Infection-by-arm matrix for noiseless measurement.

    Shape (2 n_z, 2**n_z).  Column ``j`` stacks the stratum bit vector of
    index ``j`` over its complement, so rows pair up as (observed infected,
    arm i) / (observed uninfected, arm i) and each such pair sums to one.
    """
    if not 2 <= n_z <= 4:
        raise ValueError(f"n_z must be in 2..4, got {n_z}")
    bits = arm_infection_mask(n_z)
    return np.vstack([bits, 1.0 - bits])


def build_Stilde_matrix(n_z: int, sn_s: float, sp_s: float) -> np.ndarray:
    """Infection-by-arm matrix under misclassified infection tests.

    Entry (i, j) for i < n_z is the probability of a positive test under arm
    i given stratum j; rows n_z.. carry the complementary negative-test
    probabilities.  With ``sn_s = sp_s = 1`` this reduces to
    ``build_S_matrix``.
    """
    if not (0.0 <= sn_s <= 1.0 and 0.0 <= sp_s <= 1.0):
        raise ValueError("sn_s and sp_s must be probabilities")
    bits = arm_infection_mask(n_z)
    top = np.where(bits == 1.0, sn_s, 1.0 - sp_s)
    bottom = np.where(bits == 1.0, 1.0 - sn_s, sp_s)
    return np.vstack([top, bottom])


def same_half_interval(sn: float, sp: float) -> bool:
    """True when both rates lie in [0, 1/2) or both in (1/2, 1].

    Exactly 1/2 fails: the column-domain argument that pins the stratum
    labeling degenerates there.
    """
    return (sn < 0.5 and sp < 0.5) or (sn > 0.5 and sp > 0.5)


def minimum_design(n_z: int) -> tuple[int, int]:
    """Smallest (site count, covariate level count) admitting identification.

    The strata-by-site matrix must have full row rank ``2**n_z`` and the
    covariate mixture matrix Kruskal rank at least ``2**n_z - 1``.
    """
    if n_z < 2:
        raise ValueError("n_z must be >= 2")
    return 2**n_z, 2**n_z - 1


@dataclass
class DesignCheckReport:
    """Outcome of checking one design against one identification theorem."""

    theorem: str
    n_z: int
    krank_a: int
    rank_sr: int
    half_interval_ok: bool
    passed: bool
    messages: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "n_z": self.n_z,
            "krank_A": self.krank_a,
            "rank_SR": self.rank_sr,
            "half_interval_ok": self.half_interval_ok,
            "passed": self.passed,
            "messages": list(self.messages),
            "warnings": list(self.warnings),
        }


def _check_simplex_columns(m: np.ndarray, name: str):
    if np.any(m < -SIMPLEX_TOL):
        raise ValueError(f"{name} has negative entries")
    sums = m.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(
            f"columns of {name} must sum to 1 within {SIMPLEX_TOL:g} "
            f"(worst deviation {worst:.3e})"
        )


def check_design(
    p_a_given_strata: np.ndarray,
    p_strata_given_r: np.ndarray,
    sn_s: float = 1.0,
    sp_s: float = 1.0,
    theorem: str = "T2",
    tol: float = DEFAULT_RANK_TOL,
) -> DesignCheckReport:
    """Check every hypothesis of the requested identification theorem.

    Parameters
    ----------
    p_a_given_strata : ndarray, shape (n_a, 2**n_z)
        Covariate distribution per stratum; columns on the simplex.
    p_strata_given_r : ndarray, shape (2**n_z, n_r)
        Strata proportions per site; columns on the simplex.
    theorem : {"T1", "T2", "C2", "C3"}
        ``T1``/``C2`` are the error-free results (no condition on the test
        rates); ``T2``/``C3`` additionally require ``sn_s`` and ``sp_s`` to
        share a half-interval of [0, 1].
    """
    if theorem not in THEOREMS:
        raise ValueError(f"theorem must be one of {THEOREMS}")
    p_a = np.asarray(p_a_given_strata, dtype=float)
    p_sr = np.asarray(p_strata_given_r, dtype=float)
    n_strata = p_a.shape[1]
    n_z = int(round(np.log2(n_strata)))
    if 2**n_z != n_strata:
        raise ValueError(f"column count {n_strata} is not a power of two")
    if p_sr.shape[0] != n_strata:
        raise ValueError(
            f"strata dimension mismatch: {p_a.shape[1]} columns vs "
            f"{p_sr.shape[0]} rows"
        )
    _check_simplex_columns(p_a, "P(A|strata)")
    _check_simplex_columns(p_sr, "P(strata|R)")

    messages: list[str] = []
    warnings: list[str] = []

    krank_a = kruskal_rank(p_a, tol)
    need_krank = n_strata - 1
    if krank_a < need_krank:
        messages.append(
            f"Kruskal rank of P(A|strata) is {krank_a}, needs >= {need_krank}"
        )
    rank_sr = numerical_rank(p_sr, tol)
    if rank_sr < n_strata:
        messages.append(f"rank of P(strata|R) is {rank_sr}, needs {n_strata}")
        min_r, min_a = minimum_design(n_z)
        if p_sr.shape[1] < min_r:
            messages.append(
                f"design has {p_sr.shape[1]} sites; at least {min_r} required"
            )
    if p_a.shape[0] < need_krank:
        messages.append(
            f"design has {p_a.shape[0]} covariate levels; at least "
            f"{need_krank} required"
        )

    if theorem in _NOISY_THEOREMS:
        half_ok = same_half_interval(sn_s, sp_s)
        if not half_ok:
            messages.append(
                f"sn_S={sn_s:g}, sp_S={sp_s:g} do not share a half-interval "
                "of [0, 1]"
            )
    else:
        half_ok = True

    # Near-deficient designs pass but are flagged (margin below 10x the rank
    # tolerance makes downstream recovery numerically fragile).
    sv_sr = np.linalg.svd(p_sr, compute_uv=False)
    if rank_sr == n_strata and sv_sr[-1] < 10 * tol * sv_sr[0]:
        warnings.append(
            f"P(strata|R) is nearly rank-deficient (relative margin "
            f"{sv_sr[-1] / sv_sr[0]:.2e})"
        )

    passed = not messages
    return DesignCheckReport(
        theorem=theorem,
        n_z=n_z,
        krank_a=krank_a,
        rank_sr=rank_sr,
        half_interval_ok=half_ok,
        passed=passed and half_ok,
        messages=messages,
        warnings=warnings,
    )
