"""Point estimators for the average treatment effect and causal risk ratio.

Six strategies are exposed, all operating on a fitted :class:`NuisanceFit`:
double weighting (with a Hajek variant), selection-weighted outcome
regression (with a stabilised variant), imputation-based marginalisation,
and the influence-function-based combination that is consistent whenever
any one of the three nuisance pairs is correctly specified.

Estimators never refit nuisances; fitting and estimation are separate
stages so misspecified model specs can be injected.  Every empirical mean
runs over the full n records; rows outside the linked cohort contribute
exactly the terms their selection indicator leaves alive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import LinkedDataset
from .errors import (
    DegenerateArmError,
    NonpositiveDenominatorError,
    ValidationError,
)
from .nuisance import (
    DEFAULT_DRAWS,
    NuisanceFit,
    RngLike,
    as_generator,
    delta_pair,
    predict_outcome,
    predict_propensity,
    predict_selection,
)

ESTIMATOR_NAMES = ("ipw", "hajek", "om", "om-stab", "impute", "tr")
TARGETS = ("ate", "crr")


@dataclass(frozen=True)
class EifTerms:
    """Per-record influence-function ingredients.

    phi1/phi0 follow the efficient influence function for the two arm
    means: for unlinked records the weighted bracket vanishes and the
    terms reduce to the imputation-integrated outcome mean delta.  The
    linked-row prediction pieces are kept so estimators sharing one run
    reuse them instead of re-evaluating the models.
    """

    phi1: np.ndarray
    phi0: np.ndarray
    delta1: np.ndarray
    delta0: np.ndarray
    rho_linked: Optional[np.ndarray] = None
    pi_linked: Optional[np.ndarray] = None
    mu1_linked: Optional[np.ndarray] = None
    mu0_linked: Optional[np.ndarray] = None
    truncation_count: int = 0
    weight_max: float = 0.0


@dataclass
class EstimateReport:
    method: str
    target: str
    estimate: float
    D: Optional[int] = None
    seed: Optional[int] = None
    truncation_count: int = 0
    weight_max: float = 0.0
    notes: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "target": self.target,
            "estimate": self.estimate,
            "D": self.D,
            "seed": self.seed,
            "truncation_count": self.truncation_count,
            "weight_max": self.weight_max,
            "notes": list(self.notes),
        }


def _weights(dataset: LinkedDataset, fit: NuisanceFit):
    """Cached per-call weighting pieces: rho on linked rows, pi on linked."""
    linked = dataset.linked
    rho_l = predict_selection(fit, dataset, rows="linked")
    pi_l = predict_propensity(fit, dataset, rows="linked")
    return linked, rho_l, pi_l


def _tau_ipw_from(dataset: LinkedDataset, rho_l, pi_l) -> float:
    linked = dataset.linked
    z = dataset.z[linked]
    y = dataset.y[linked]
    arm1 = z * y / (rho_l * pi_l)
    arm0 = (1 - z) * y / (rho_l * (1.0 - pi_l))
    return float((arm1.sum() - arm0.sum()) / dataset.n)


def tau_ipw(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    """Double inverse weighting by selection and treatment probabilities."""
    _, rho_l, pi_l = _weights(dataset, fit)
    return _tau_ipw_from(dataset, rho_l, pi_l)


def _tau_hajek_from(dataset: LinkedDataset, rho_l, pi_l) -> float:
    linked = dataset.linked
    z = dataset.z[linked]
    y = dataset.y[linked]
    w1 = z / (rho_l * pi_l)
    w0 = (1 - z) / (rho_l * (1.0 - pi_l))
    s1, s0 = w1.sum(), w0.sum()
    if s1 <= 0.0 or s0 <= 0.0:
        raise DegenerateArmError("an arm has zero total weight")
    return float((w1 @ y) / s1 - (w0 @ y) / s0)


def tau_hajek(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    """Per-arm normalised weighting; invariant to outcome location shifts."""
    _, rho_l, pi_l = _weights(dataset, fit)
    return _tau_hajek_from(dataset, rho_l, pi_l)


def _om_terms(dataset: LinkedDataset, fit: NuisanceFit):
    linked = dataset.linked
    rho_l = predict_selection(fit, dataset, rows="linked")
    mu1 = predict_outcome(fit, 1, dataset, rows="linked")
    mu0 = predict_outcome(fit, 0, dataset, rows="linked")
    return rho_l, mu1, mu0


def _tau_om_from(dataset: LinkedDataset, rho_l, mu1, mu0,
                 stabilized: bool) -> float:
    total = float(((mu1 - mu0) / rho_l).sum() / dataset.n)
    if not stabilized:
        return total
    denom = (1.0 / rho_l).sum() / dataset.n
    if denom <= 0.0:
        raise NonpositiveDenominatorError("mean selection weight is nonpositive")
    return total / denom


def tau_om(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    """Selection-weighted outcome-regression contrast."""
    rho_l, mu1, mu0 = _om_terms(dataset, fit)
    return _tau_om_from(dataset, rho_l, mu1, mu0, stabilized=False)


def tau_om_stab(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    """tau_om normalised by the mean inverse selection weight."""
    rho_l, mu1, mu0 = _om_terms(dataset, fit)
    return _tau_om_from(dataset, rho_l, mu1, mu0, stabilized=True)


def tau_impute(dataset: LinkedDataset, fit: NuisanceFit,
               D: int = DEFAULT_DRAWS, rng: RngLike = 0) -> float:
    """Marginalised outcome contrast with shared draws across arms."""
    d1, d0 = delta_pair(fit, dataset, D=D, rng=as_generator(rng))
    return float(np.mean(d1 - d0))


def eif_phi(dataset: LinkedDataset, fit: NuisanceFit,
            D: int = DEFAULT_DRAWS, rng: RngLike = 0) -> EifTerms:
    """Evaluate the arm-mean influence-function terms for every record."""
    before = fit.truncation.count
    d1, d0 = delta_pair(fit, dataset, D=D, rng=as_generator(rng))
    linked = dataset.linked
    rho_l = predict_selection(fit, dataset, rows="linked")
    pi_l = predict_propensity(fit, dataset, rows="linked")
    mu1 = predict_outcome(fit, 1, dataset, rows="linked")
    mu0 = predict_outcome(fit, 0, dataset, rows="linked")
    z = dataset.z[linked]
    y = dataset.y[linked]
    mu_obs = np.where(z == 1, mu1, mu0)
    resid = y - mu_obs
    denom = np.where(z == 1, pi_l, 1.0 - pi_l)
    phi1 = d1.copy()
    phi0 = d0.copy()
    phi1[linked] += (z * resid / denom + mu1 - d1[linked]) / rho_l
    phi0[linked] += ((1 - z) * resid / denom + mu0 - d0[linked]) / rho_l
    wmax = float((1.0 / (rho_l * denom)).max()) if rho_l.size else 0.0
    return EifTerms(phi1=phi1, phi0=phi0, delta1=d1, delta0=d0,
                    rho_linked=rho_l, pi_linked=pi_l, mu1_linked=mu1,
                    mu0_linked=mu0,
                    truncation_count=fit.truncation.count - before,
                    weight_max=wmax)


def tau_tr(dataset: LinkedDataset, fit: NuisanceFit,
           D: int = DEFAULT_DRAWS, rng: RngLike = 0) -> float:
    terms = eif_phi(dataset, fit, D=D, rng=rng)
    return float(np.mean(terms.phi1 - terms.phi0))


# --------------------------------------------------------------------------
# causal risk ratio


def _require_nonnegative_outcome(dataset: LinkedDataset) -> None:
    if dataset.y.min() < 0.0:
        raise ValidationError("risk-ratio estimands need a nonnegative outcome")


def _ratio(num: float, den: float) -> float:
    if den <= 0.0:
        raise NonpositiveDenominatorError(
            f"denominator estimate {den:.6g} is nonpositive")
    return float(num / den)


def _xi_ipw_from(dataset: LinkedDataset, rho_l, pi_l) -> float:
    linked = dataset.linked
    z = dataset.z[linked]
    y = dataset.y[linked]
    num = (z * y / (rho_l * pi_l)).sum() / dataset.n
    den = ((1 - z) * y / (rho_l * (1.0 - pi_l))).sum() / dataset.n
    return _ratio(num, den)


def xi_ipw(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    _require_nonnegative_outcome(dataset)
    _, rho_l, pi_l = _weights(dataset, fit)
    return _xi_ipw_from(dataset, rho_l, pi_l)


def _xi_om_from(dataset: LinkedDataset, rho_l, mu1, mu0) -> float:
    return _ratio((mu1 / rho_l).sum() / dataset.n,
                  (mu0 / rho_l).sum() / dataset.n)


def xi_om(dataset: LinkedDataset, fit: NuisanceFit) -> float:
    _require_nonnegative_outcome(dataset)
    rho_l, mu1, mu0 = _om_terms(dataset, fit)
    return _xi_om_from(dataset, rho_l, mu1, mu0)


def xi_impute(dataset: LinkedDataset, fit: NuisanceFit,
              D: int = DEFAULT_DRAWS, rng: RngLike = 0) -> float:
    _require_nonnegative_outcome(dataset)
    d1, d0 = delta_pair(fit, dataset, D=D, rng=as_generator(rng))
    return _ratio(float(np.mean(d1)), float(np.mean(d0)))


def xi_tr(dataset: LinkedDataset, fit: NuisanceFit,
          D: int = DEFAULT_DRAWS, rng: RngLike = 0) -> float:
    """Ratio of the influence-function arm means; no plug-in seed enters."""
    _require_nonnegative_outcome(dataset)
    terms = eif_phi(dataset, fit, D=D, rng=rng)
    return _ratio(float(np.mean(terms.phi1)), float(np.mean(terms.phi0)))


# --------------------------------------------------------------------------
# shared pipeline


def estimate_from_terms(name: str, target: str, dataset: LinkedDataset,
                        fit: NuisanceFit, terms: Optional[EifTerms]) -> float:
    """One estimator evaluated on precomputed influence terms.

    Sharing ``terms`` across estimators realises common random numbers for
    every quantity that depends on the imputation draws.
    """
    if terms is None and name in ("impute", "tr"):
        raise ValidationError(f"{name} requires precomputed influence terms")
    cached = terms is not None and terms.rho_linked is not None
    if target == "ate":
        if name == "ipw":
            return (_tau_ipw_from(dataset, terms.rho_linked, terms.pi_linked)
                    if cached else tau_ipw(dataset, fit))
        if name == "hajek":
            return (_tau_hajek_from(dataset, terms.rho_linked, terms.pi_linked)
                    if cached else tau_hajek(dataset, fit))
        if name == "om":
            return (_tau_om_from(dataset, terms.rho_linked, terms.mu1_linked,
                                 terms.mu0_linked, stabilized=False)
                    if cached else tau_om(dataset, fit))
        if name == "om-stab":
            return (_tau_om_from(dataset, terms.rho_linked, terms.mu1_linked,
                                 terms.mu0_linked, stabilized=True)
                    if cached else tau_om_stab(dataset, fit))
        if name == "impute":
            return float(np.mean(terms.delta1 - terms.delta0))
        if name == "tr":
            return float(np.mean(terms.phi1 - terms.phi0))
    elif target == "crr":
        _require_nonnegative_outcome(dataset)
        if name == "ipw":
            return (_xi_ipw_from(dataset, terms.rho_linked, terms.pi_linked)
                    if cached else xi_ipw(dataset, fit))
        if name == "hajek":
            raise ValidationError("hajek has no risk-ratio form; use ipw")
        if name == "om":
            return (_xi_om_from(dataset, terms.rho_linked, terms.mu1_linked,
                                terms.mu0_linked)
                    if cached else xi_om(dataset, fit))
        if name == "om-stab":
            raise ValidationError("om-stab has no risk-ratio form; use om")
        if name == "impute":
            return _ratio(float(np.mean(terms.delta1)),
                          float(np.mean(terms.delta0)))
        if name == "tr":
            return _ratio(float(np.mean(terms.phi1)), float(np.mean(terms.phi0)))
    else:
        raise ValidationError(f"unknown target {target!r}")
    raise ValidationError(f"unknown estimator {name!r}")


def needs_draws(names: Sequence[str]) -> bool:
    return any(n in ("impute", "tr") for n in names)


def compute_estimates(dataset: LinkedDataset, fit: NuisanceFit,
                      names: Sequence[str], target: str = "ate",
                      D: int = DEFAULT_DRAWS, rng: RngLike = 0,
                      ) -> tuple[dict[str, float], Optional[EifTerms]]:
    """Evaluate several estimators with one shared set of imputation draws."""
    for n in names:
        if n not in ESTIMATOR_NAMES:
            raise ValidationError(f"unknown estimator {n!r}")
    terms = None
    if needs_draws(names):
        terms = eif_phi(dataset, fit, D=D, rng=rng)
    out = {n: estimate_from_terms(n, target, dataset, fit, terms) for n in names}
    return out, terms
