"""Canonical encodings of principal strata, trial shapes, and estimand bookkeeping.

A principal stratum is the vector of counterfactual infection indicators across
all treatment arms.  Strata are encoded as binary vectors with a canonical
base-10 index; bit ``i`` (0-based, least significant first) is the infection
indicator under arm ``i + 1``.  Every structural matrix in this package orders
its stratum columns by ascending index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StratumVector:
    """A principal stratum: counterfactual infection under each arm.

    Attributes
    ----------
    bits : tuple of int
        ``bits[i]`` is the infection indicator under arm ``i + 1``.  The
        first element is the least-significant digit of the base-2
        representation of ``index``.
    index : int
        Canonical base-10 index in ``[0, 2**len(bits) - 1]``.
    """

    bits: tuple[int, ...]
    index: int = field(default=-1)

    def __post_init__(self):
        if len(self.bits) < 1:
            raise ValueError("stratum needs at least one arm")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"stratum bits must be 0/1, got {self.bits}")
        derived = index_from_bits(self.bits)
        if self.index == -1:
            object.__setattr__(self, "index", derived)
        elif self.index != derived:
            raise ValueError(f"index {self.index} does not encode bits {self.bits}")

    @property
    def n_z(self) -> int:
        return len(self.bits)

    def infected_under(self, arm: int) -> bool:
        """True if this stratum is infected under 1-based arm ``arm``."""
        return self.bits[arm - 1] == 1


def stratum_from_index(j: int, m: int) -> StratumVector:
    """Map a base-10 index to the length-``m`` stratum vector.

    The first bit is least significant, so ``stratum_from_index(4, 3)``
    has bits ``(0, 0, 1)``.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0 <= j <= 2**m - 1:
        raise ValueError(f"index {j} out of range [0, {2**m - 1}] for m={m}")
    return StratumVector(bits=tuple((j >> i) & 1 for i in range(m)), index=j)


def index_from_bits(bits) -> int:
    """Binary-to-base-10 conversion, first bit least significant."""
    return sum(int(b) << i for i, b in enumerate(bits))


def all_strata(n_z: int) -> list[StratumVector]:
    """All ``2**n_z`` strata in ascending index order."""
    return [stratum_from_index(j, n_z) for j in range(2**n_z)]


def arm_infection_mask(n_z: int) -> np.ndarray:
    """(n_z, 2**n_z) float array; entry (z, u) is 1.0 when stratum ``u`` is
    infected under arm ``z + 1``.  Columns follow ascending stratum index."""
    return np.array(
        [stratum_from_index(j, n_z).bits for j in range(2**n_z)], dtype=float
    ).T


def comparable_strata(n_z: int, arms: set[int]) -> list[StratumVector]:
    """Strata infected under every arm in ``arms`` (1-based), ascending index.

    These are the strata on which post-infection contrasts between the given
    arms are defined.
    """
    if not arms:
        raise ValueError("arms must be non-empty")
    if any(not 1 <= a <= n_z for a in arms):
        raise ValueError(f"arm indices must be in 1..{n_z}, got {sorted(arms)}")
    return [u for u in all_strata(n_z) if all(u.bits[a - 1] == 1 for a in arms)]


ALWAYS_INFECTED = "always_infected"


def always_infected_stratum(n_z: int) -> StratumVector:
    return stratum_from_index(2**n_z - 1, n_z)


@dataclass(frozen=True)
class TrialShape:
    """Dimensions of a multi-arm, multi-site trial design.

    ``n_z`` arms, ``n_r`` sites, ``n_a`` covariate levels, ``n_x``
    pretreatment-covariate levels.
    """

    n_z: int
    n_r: int
    n_a: int
    n_x: int = 1

    def __post_init__(self):
        if self.n_z < 2:
            raise ValueError(f"need at least 2 treatments, got n_z={self.n_z}")
        for name in ("n_r", "n_a", "n_x"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_strata(self) -> int:
        return 2**self.n_z


@dataclass(frozen=True)
class EstimandSpec:
    """Names one vaccine-efficacy estimand.

    ``kind`` is one of ``VE_S``, ``VE_I_conditional``, ``VE_I_marginal``,
    ``VE_T`` (risk difference on a stratum) or ``composite``.  ``arms`` is the
    ordered pair ``(j, k)`` compared as ``1 - risk(j)/risk(k)`` (difference for
    ``VE_T``); ``composite_arms = (j, k, ref)`` names the difference of two
    ratios sharing a reference arm.
    """

    kind: str
    arms: tuple[int, int] = (2, 1)
    stratum: StratumVector | None = None
    covariate_level: int | None = None
    composite_arms: tuple[int, int, int] | None = None

    _KINDS = ("VE_S", "VE_I_conditional", "VE_I_marginal", "VE_T", "composite")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown estimand kind {self.kind!r}")
        if self.kind in ("VE_I_conditional", "VE_I_marginal", "VE_T"):
            if self.stratum is None:
                raise ValueError(f"{self.kind} requires a stratum")
            j, k = self.arms
            if not (self.stratum.infected_under(j) and self.stratum.infected_under(k)):
                raise ValueError(
                    f"{self.kind} on stratum {self.stratum.bits} undefined for arms "
                    f"({j}, {k}): principal effects need infection under both arms"
                )
        if self.kind == "VE_I_conditional" and self.covariate_level is None:
            raise ValueError("VE_I_conditional requires covariate_level")
        if self.kind == "composite" and self.composite_arms is None:
            raise ValueError("composite requires composite_arms=(j, k, ref)")

    def label(self) -> str:
        if self.kind == "VE_S":
            return f"VE_S,{self.arms[0]}{self.arms[1]}"
        tag = "".join(str(b) for b in self.stratum.bits) if self.stratum else "?"
        if self.kind == "composite":
            j, k, ref = self.composite_arms
            return f"VE_I({tag}),{j}{ref}-{k}{ref}"
        base = f"VE_I({tag}),{self.arms[0]}{self.arms[1]}"
        if self.kind == "VE_T":
            base = f"VE_T({tag}),{self.arms[0]}{self.arms[1]}"
        if self.covariate_level is not None:
            base += f"|A={self.covariate_level}"
        return base


def count_params_and_dof(shape: TrialShape) -> tuple[int, int, int]:
    """Parameter and degree-of-freedom counts for the multi-site model.

    Returns ``(params_infection_covariate, params_outcome, dof)`` where the
    first counts the free strata-by-site proportions plus covariate mixture
    weights, the second the post-infection outcome parameters, and the third
    the degrees of freedom in the observed cell probabilities.
    """
    n_u = shape.n_strata
    params_infection_covariate = shape.n_r * (n_u - 1) + n_u * (shape.n_a - 1)
    params_outcome = shape.n_a * (n_u - 1)
    dof = shape.n_r * shape.n_z * (2 * shape.n_a - 1)
    return params_infection_covariate, params_outcome, dof


def count_basic_model(n_z: int) -> tuple[int, int]:
    """Parameter vs. degree-of-freedom count for the single-site, no-covariate model.

    Returns ``(n_params, dof)`` with ``n_params = 2**n_z - 1 +
    sum_j C(n_z, j) (2**j - 1)`` and ``dof = 2 n_z``; the gap is why that model
    is unidentified.
    """
    n_params = 2**n_z - 1 + sum(
        math.comb(n_z, j) * (2**j - 1) for j in range(1, n_z + 1)
    )
    return n_params, 2 * n_z
