"""Variance and interval estimation, plus the selection-mechanism diagnostic.

Two routes are offered: a pairs bootstrap that reruns the full pipeline
(nuisance refits included) on row resamples, and a plug-in standard error
from the estimated influence function, available for the combined
estimators only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .core import LinkedDataset, ModelSpec
from .errors import (
    DegeneracyError,
    LinkedCausalError,
    UnstableBootstrapError,
    ValidationError,
)
from .estimators import compute_estimates, eif_phi
from .nuisance import DEFAULT_DRAWS, NuisanceFit, fit_logistic, fit_nuisances

DEFAULT_B = 200
DEFAULT_LEVEL = 0.95


@dataclass
class InferenceReport:
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    method: str  # bootstrap_percentile | bootstrap_normal | eif_plugin
    level: float = DEFAULT_LEVEL
    B: Optional[int] = None
    seed: Optional[int] = None
    replicates_used: Optional[int] = None
    replicates_dropped: Optional[int] = None

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_json_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "method": self.method,
            "level": self.level,
            "B": self.B,
            "seed": self.seed,
            "replicates_used": self.replicates_used,
            "replicates_dropped": self.replicates_dropped,
        }


@dataclass
class BootstrapSummary:
    """Replicate vector plus both interval styles for one estimator."""

    estimate: float
    replicates: np.ndarray
    dropped: int
    seed: int
    level: float

    @property
    def se(self) -> float:
        if self.replicates.size < 2:
            return 0.0
        return float(np.std(self.replicates, ddof=1))

    def percentile_ci(self) -> tuple[float, float]:
        a = 100.0 * (1.0 - self.level) / 2.0
        lo, hi = np.percentile(self.replicates, [a, 100.0 - a])
        return float(lo), float(hi)

    def normal_ci(self) -> tuple[float, float]:
        zq = float(norm.ppf(0.5 + self.level / 2.0))
        return self.estimate - zq * self.se, self.estimate + zq * self.se

    def report(self, kind: str = "percentile") -> InferenceReport:
        lo, hi = (self.percentile_ci() if kind == "percentile"
                  else self.normal_ci())
        return InferenceReport(
            estimate=self.estimate, se=self.se, ci_low=lo, ci_high=hi,
            method=f"bootstrap_{kind}", level=self.level,
            B=self.replicates.size + self.dropped, seed=self.seed,
            replicates_used=int(self.replicates.size),
            replicates_dropped=self.dropped)


def _replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(b,)))


def bootstrap(dataset: LinkedDataset, spec: ModelSpec,
              estimators: Union[str, Sequence[str]], *, target: str = "ate",
              B: int = DEFAULT_B, D: int = DEFAULT_DRAWS, seed: int = 0,
              level: float = DEFAULT_LEVEL, trunc: Optional[float] = None,
              ) -> dict[str, BootstrapSummary]:
    """Pairs bootstrap; every replicate refits all nuisance models.

    Whole records are resampled so the (r, v) missingness pattern travels
    with each row.  Replicates that land on a degenerate dataset are
    dropped and counted; more than 20% dropped raises.
    """
    if B < 2:
        raise ValidationError("B must be >= 2")
    names = [estimators] if isinstance(estimators, str) else list(estimators)
    kw = {} if trunc is None else {"trunc": trunc}
    fit0 = fit_nuisances(dataset, spec, **kw)
    # the point estimate consumes the base stream, replicate b the (b,) child
    point, _ = compute_estimates(dataset, fit0, names, target=target, D=D,
                                 rng=np.random.default_rng(seed))
    reps: dict[str, list] = {n: [] for n in names}
    dropped = 0
    n = dataset.n
    for b in range(B):
        rng = _replicate_rng(seed, b)
        idx = rng.integers(0, n, size=n)
        try:
            ds_b = dataset.subset(idx)
            fit_b = fit_nuisances(ds_b, spec, **kw)
            est_b, _ = compute_estimates(ds_b, fit_b, names, target=target,
                                         D=D, rng=rng)
        except (DegeneracyError, ValidationError):
            dropped += 1
            continue
        for nme in names:
            reps[nme].append(est_b[nme])
    if dropped > 0.2 * B:
        raise UnstableBootstrapError(
            f"{dropped}/{B} bootstrap replicates were degenerate")
    return {nme: BootstrapSummary(estimate=point[nme],
                                  replicates=np.asarray(reps[nme]),
                                  dropped=dropped, seed=seed, level=level)
            for nme in names}


def eif_variance(dataset: LinkedDataset, fit: NuisanceFit, *,
                 target: str = "ate", D: int = DEFAULT_DRAWS, rng=0,
                 level: float = DEFAULT_LEVEL) -> InferenceReport:
    """Plug-in standard error from the estimated influence function."""
    terms = eif_phi(dataset, fit, D=D, rng=rng)
    n = dataset.n
    if target == "ate":
        est = float(np.mean(terms.phi1 - terms.phi0))
        psi = terms.phi1 - terms.phi0 - est
    elif target == "crr":
        den = float(np.mean(terms.phi0))
        if den <= 0.0:
            raise DegeneracyError("risk-ratio denominator is nonpositive")
        est = float(np.mean(terms.phi1)) / den
        psi = (terms.phi1 - est * terms.phi0) / den
    else:
        raise ValidationError(f"unknown target {target!r}")
    se = float(np.sqrt(np.mean(psi ** 2) / n))
    zq = float(norm.ppf(0.5 + level / 2.0))
    seed = rng if isinstance(rng, int) else None
    return InferenceReport(estimate=est, se=se, ci_low=est - zq * se,
                           ci_high=est + zq * se, method="eif_plugin",
                           level=level, seed=seed)


@dataclass
class MarDiagnostic:
    """Wald summary of the logistic regression of r on (z, x, y).

    Reports effect sizes and p-values only; the decision of whether a
    statistically significant but tiny coefficient is tolerable is left
    to the analyst.
    """

    terms: list
    coef: np.ndarray
    se: np.ndarray
    zstat: np.ndarray
    pvalue: np.ndarray
    separation: bool = False

    def to_json_dict(self) -> dict:
        def _nanlist(a):
            return [None if np.isnan(u) else float(u) for u in a]
        return {
            "terms": list(self.terms),
            "coef": self.coef.tolist(),
            "se": _nanlist(self.se),
            "z": _nanlist(self.zstat),
            "p": _nanlist(self.pvalue),
            "separation": self.separation,
        }


def mar_check(dataset: LinkedDataset) -> MarDiagnostic:
    """Selection-mechanism diagnostic: does r track (z, x, y) marginally?"""
    n = dataset.n
    X = np.column_stack([np.ones(n), dataset.z.astype(float), dataset.x,
                         dataset.y])
    terms = ["1", "z"] + [f"x{j}" for j in range(dataset.p)] + ["y"]
    fit = fit_logistic(X, dataset.r.astype(float))
    k = X.shape[1]
    if fit.separation:
        nanv = np.full(k, np.nan)
        return MarDiagnostic(terms=terms, coef=fit.coef, se=nanv,
                             zstat=nanv, pvalue=nanv, separation=True)
    eta = X @ fit.coef
    p = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
    w = p * (1.0 - p)
    info = X.T @ (w[:, None] * X)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as e:
        raise LinkedCausalError(f"singular information matrix: {e}") from e
    se = np.sqrt(np.diag(cov))
    zs = fit.coef / se
    pv = 2.0 * norm.sf(np.abs(zs))
    return MarDiagnostic(terms=terms, coef=fit.coef, se=se, zstat=zs,
                         pvalue=pv, separation=False)
