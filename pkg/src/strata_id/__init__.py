"""Nonparametric identification and design of multi-arm vaccine-efficacy
trials with misclassified binary outcomes.

Subpackages: stratum encodings (``strata``), the dense linear-algebra kernel
(``linalg``), structural-matrix design checks (``design``), the population
forward map and its constructive inverse (``oracle``), trial simulation
(``simulate``), Bayesian estimation (``inference``), Monte Carlo power
studies (``power``), and the command-line interface (``cli``).
"""

__version__ = "0.1.0"

from .design import (
    DesignCheckReport,
    build_S_matrix,
    build_Stilde_matrix,
    check_design,
    minimum_design,
)
from .inference import (
    DecisionRule,
    FitResult,
    McmcOptions,
    decide,
    log_likelihood,
    log_prior,
    sample_posterior,
    severe_rule,
    transmission_rule,
)
from .linalg import (
    CpConstraints,
    CpDecompositionError,
    CpFactors,
    cp_decompose,
    kruskal_rank,
    numerical_rank,
    pseudoinverse,
    triple_product,
)
from .oracle import (
    IdentificationError,
    IdentifiedQuantities,
    ObservableCells,
    PopulationParams,
    forward_probabilities,
    identification_region,
    identify_from_population,
    two_arm_sensitivity,
    ve_estimands,
)
from .power import power_study
from .simulate import (
    SimConfig,
    TrialDataset,
    gen_params,
    household_mapping,
    scenario_config,
    simulate_dataset,
)
from .strata import (
    EstimandSpec,
    StratumVector,
    TrialShape,
    comparable_strata,
    count_params_and_dof,
    stratum_from_index,
)

__all__ = [
    "__version__",
    "DesignCheckReport",
    "build_S_matrix",
    "build_Stilde_matrix",
    "check_design",
    "minimum_design",
    "DecisionRule",
    "FitResult",
    "McmcOptions",
    "decide",
    "log_likelihood",
    "log_prior",
    "sample_posterior",
    "severe_rule",
    "transmission_rule",
    "CpConstraints",
    "CpDecompositionError",
    "CpFactors",
    "cp_decompose",
    "kruskal_rank",
    "numerical_rank",
    "pseudoinverse",
    "triple_product",
    "IdentificationError",
    "IdentifiedQuantities",
    "ObservableCells",
    "PopulationParams",
    "forward_probabilities",
    "identification_region",
    "identify_from_population",
    "two_arm_sensitivity",
    "ve_estimands",
    "power_study",
    "SimConfig",
    "TrialDataset",
    "gen_params",
    "household_mapping",
    "scenario_config",
    "simulate_dataset",
    "EstimandSpec",
    "StratumVector",
    "TrialShape",
    "comparable_strata",
    "count_params_and_dof",
    "stratum_from_index",
]
