"""linkedcausal: treatment-effect estimation from linked two-source data.

A primary study observes (z, x, y) on everyone while an extra confounder
block v is available only for the linked sub-cohort (r = 1).  The package
fits four variation-independent working models and combines them into
point estimators for the average treatment effect and the causal risk
ratio, including an influence-function-based estimator that stays
consistent when any one of three model pairs is correct.  Bootstrap and
plug-in inference, an optimal two-phase sampling design module, and a
Monte Carlo harness round out the toolkit.
"""

__version__ = "0.1.0"

from .core import (
    FeatureMap,
    LinkedDataset,
    LinkedRecord,
    ModelSpec,
    build_design,
    from_arrays,
    load_csv,
    write_csv,
)
from .design import CostSpec, DesignSolution, GammaEstimates
from .design import asymptotic_variance, estimate_gammas, optimal_allocation
from .errors import (
    ConsistencyError,
    DegeneracyError,
    LinkedCausalError,
    MissingDataError,
    NonpositiveDenominatorError,
    NumericError,
    ParseError,
    SingularDesignError,
    ValidationError,
)
from .estimators import (
    EifTerms,
    EstimateReport,
    compute_estimates,
    eif_phi,
    tau_hajek,
    tau_impute,
    tau_ipw,
    tau_om,
    tau_om_stab,
    tau_tr,
    xi_impute,
    xi_ipw,
    xi_om,
    xi_tr,
)
from .inference import InferenceReport, MarDiagnostic
from .inference import bootstrap, eif_variance, mar_check
from .nuisance import (
    ImputationFit,
    LogisticFit,
    NuisanceFit,
    OutcomeFit,
    delta,
    draw_imputations,
    fit_imputation,
    fit_linear,
    fit_logistic,
    fit_nuisances,
    predict_outcome,
    predict_propensity,
    predict_selection,
)
from .sim import DgmSpec, McResult, ScenarioSpec
from .sim import generate, generate_with_potentials, run_monte_carlo, true_nuisance_fit
