"""Optimal second-phase sampling ratio under a linear cost constraint.

From pilot data collected with a constant selection probability, the
asymptotic variance of the combined estimator decomposes into two moment
terms: Gamma1 from the fully-observed influence component and Gamma2 from
the linked-only component.  The budget C buys n first-phase units at C1
each and a fraction rho of second-phase (v) collections at C2 each, and
the variance as a function of rho has a closed-form minimiser.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, floor, sqrt

import numpy as np

from .core import LinkedDataset, build_design
from .errors import SingularCorrectionError, ValidationError
from .nuisance import (
    DEFAULT_DRAWS,
    NuisanceFit,
    RngLike,
    as_generator,
    delta_pair,
    predict_outcome,
    predict_propensity,
)

DEFAULT_GRID_POINTS = 200
DEFAULT_RHO_MIN = 0.005


@dataclass(frozen=True)
class CostSpec:
    """Total budget C, per-unit first-phase cost C1, per-unit v cost C2."""

    C: float
    C1: float
    C2: float

    def __post_init__(self):
        if self.C1 <= 0.0 or self.C2 <= 0.0 or self.C <= 0.0:
            raise ValidationError("costs must be positive")
        if self.C < self.C1:
            raise ValidationError("budget below the cost of one first-phase unit")


@dataclass
class GammaEstimates:
    gamma1: float
    gamma2: float
    n_pilot: int
    linked_pilot: int
    rho_hat: float
    corrections_used: bool = True

    def to_json_dict(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "n_pilot": self.n_pilot,
            "linked_pilot": self.linked_pilot,
            "rho_hat": self.rho_hat,
            "corrections_used": self.corrections_used,
            # theta-derivative corrections are omitted: their expectation
            # vanishes under the working union model
            "theta_correction": "omitted",
        }


@dataclass
class DesignSolution:
    rho_star: float
    n_star: float
    curve: np.ndarray  # (m, 2) columns rho, asymptotic variance
    gammas: GammaEstimates
    costs: CostSpec

    @property
    def n_star_floor(self) -> int:
        return floor(self.n_star)

    @property
    def n_star_ceil(self) -> int:
        return ceil(self.n_star)

    def to_json_dict(self) -> dict:
        return {
            "gamma1": self.gammas.gamma1,
            "gamma2": self.gammas.gamma2,
            "rho_star": self.rho_star,
            "n_star": self.n_star,
            "n_star_floor": self.n_star_floor,
            "n_star_ceil": self.n_star_ceil,
            "costs": {"C": self.costs.C, "C1": self.costs.C1, "C2": self.costs.C2},
        }


def asymptotic_variance(rho, g: GammaEstimates, c: CostSpec):
    """Variance of the combined estimator at second-phase ratio rho."""
    rho = np.asarray(rho, dtype=float)
    return (c.C2 * g.gamma1 * rho / c.C
            + c.C1 * g.gamma2 / (c.C * rho)
            + (c.C1 * g.gamma1 + c.C2 * g.gamma2) / c.C)


def _score_pieces(pilot: LinkedDataset, fit: NuisanceFit):
    """Per-linked-row scores and expectation matrices for (beta, gamma)."""
    linked = pilot.linked
    Xpi = build_design(pilot, fit.spec.propensity, rows="linked")
    Xmu = build_design(pilot, fit.spec.outcome, rows="linked")
    z = pilot.z[linked].astype(float)
    y = pilot.y[linked]
    pi = predict_propensity(fit, pilot, rows="linked")
    mu_obs_eta = Xmu @ fit.outcome.coef
    if fit.outcome.family == "binary":
        mu_obs = 1.0 / (1.0 + np.exp(-mu_obs_eta))
        w_mu = mu_obs * (1.0 - mu_obs)
    else:
        mu_obs = mu_obs_eta
        w_mu = np.ones_like(mu_obs)
    n1 = Xpi.shape[0]
    S_pi = (z - pi)[:, None] * Xpi
    S_mu = (y - mu_obs)[:, None] * Xmu
    A_pi = -(Xpi.T @ ((pi * (1.0 - pi))[:, None] * Xpi)) / n1
    A_mu = -(Xmu.T @ (w_mu[:, None] * Xmu)) / n1
    return S_pi, S_mu, A_pi, A_mu


def _mu_dot(fit: NuisanceFit, pilot: LinkedDataset, z_level: int) -> np.ndarray:
    """d mu(z,.)/d gamma on linked rows."""
    X = build_design(pilot, fit.spec.outcome, rows="linked", z_override=z_level)
    if fit.outcome.family == "binary":
        mu = 1.0 / (1.0 + np.exp(-(X @ fit.outcome.coef)))
        return (mu * (1.0 - mu))[:, None] * X
    return X


def estimate_gammas(pilot: LinkedDataset, fit: NuisanceFit,
                    D: int = DEFAULT_DRAWS, rng: RngLike = 0,
                    drop_corrections: bool = False) -> GammaEstimates:
    """Estimate the two variance components from constant-selection pilot data.

    The selection probability is taken as the empirical linked fraction.
    The linked-only component carries correction terms for the estimation
    of the propensity and outcome coefficients, built from analytic score
    derivatives; pass ``drop_corrections=True`` to fall back to the
    uncorrected form when the expectation matrices are ill conditioned.
    """
    gen = as_generator(rng)
    n = pilot.n
    linked = pilot.linked
    n1 = int(linked.sum())
    rho = n1 / n
    d1, d0, g1, g0 = delta_pair(fit, pilot, D=D, rng=gen, want_dgamma=True)

    z = pilot.z[linked].astype(float)
    y = pilot.y[linked]
    pi = predict_propensity(fit, pilot, rows="linked")
    mu1 = predict_outcome(fit, 1, pilot, rows="linked")
    mu0 = predict_outcome(fit, 0, pilot, rows="linked")
    bracket = (z * (y - mu1) / pi + mu1 - d1[linked]
               - (1.0 - z) * (y - mu0) / (1.0 - pi) - mu0 + d0[linked])

    tau_hat = float(np.mean(d1 - d0) + np.sum(bracket) / (rho * n))
    S1 = d1 - d0 - tau_hat
    S2 = bracket.copy()

    corrections_used = not drop_corrections
    if corrections_used:
        S_pi, S_mu, A_pi, A_mu = _score_pieces(pilot, fit)
        Xpi = build_design(pilot, fit.spec.propensity, rows="linked")
        # d tau / d beta, averaged over the full sample (R/rho weighting)
        db_terms = (-(z * (y - mu1) * (1.0 - pi) / pi)
                    - ((1.0 - z) * (y - mu0) * pi / (1.0 - pi)))
        b_beta = (db_terms[:, None] * Xpi).sum(axis=0) / (rho * n)
        # d tau / d gamma: linked bracket derivative plus the delta terms
        mu1_dot = _mu_dot(fit, pilot, 1)
        mu0_dot = _mu_dot(fit, pilot, 0)
        linked_part = ((1.0 - z / pi)[:, None] * mu1_dot - g1[linked]
                       - (1.0 - (1.0 - z) / (1.0 - pi))[:, None] * mu0_dot
                       + g0[linked])
        b_gamma = (linked_part.sum(axis=0) / (rho * n)
                   + (g1 - g0).mean(axis=0))
        try:
            c_beta = np.linalg.solve(A_pi.T, b_beta)
            c_gamma = np.linalg.solve(A_mu.T, b_gamma)
        except np.linalg.LinAlgError as e:
            raise SingularCorrectionError(
                "singular expectation matrix in the influence correction; "
                "re-run with drop_corrections=True") from e
        # estimating-equation expansion: coef_hat - coef* is minus the
        # inverted derivative matrix times the score average, so the
        # correction enters with a negative sign
        S2 = S2 - S_pi @ c_beta - S_mu @ c_gamma

    gamma1 = float(np.mean(S1 ** 2) + 2.0 * np.mean(S1[linked] * S2))
    gamma2 = float(np.mean(S2 ** 2))
    return GammaEstimates(gamma1=gamma1, gamma2=gamma2, n_pilot=n,
                          linked_pilot=n1, rho_hat=rho,
                          corrections_used=corrections_used)


def optimal_allocation(g: GammaEstimates, c: CostSpec,
                       grid_points: int = DEFAULT_GRID_POINTS,
                       rho_min: float = DEFAULT_RHO_MIN) -> DesignSolution:
    """Closed-form optimal (rho, n) plus a plot-ready variance curve.

    The closed form applies when Gamma2*C1 < Gamma1*C2 (which requires
    Gamma1 > 0); otherwise the variance is nonincreasing in rho and the
    full second phase rho = 1 is optimal.  Nonpositive Gamma1 lands in the
    second branch automatically.
    """
    if grid_points < 2:
        raise ValidationError("grid_points must be >= 2")
    if not (0.0 < rho_min < 1.0):
        raise ValidationError("rho_min must lie in (0, 1)")
    if g.gamma2 * c.C1 < g.gamma1 * c.C2:
        rho_star = sqrt(g.gamma2 * c.C1 / (g.gamma1 * c.C2))
        rho_star = max(rho_star, rho_min)
    else:
        rho_star = 1.0
    n_star = c.C / (c.C1 + rho_star * c.C2)
    grid = np.linspace(rho_min, 1.0, grid_points)
    curve = np.column_stack([grid, asymptotic_variance(grid, g, c)])
    return DesignSolution(rho_star=float(rho_star), n_star=float(n_star),
                          curve=curve, gammas=g, costs=c)
