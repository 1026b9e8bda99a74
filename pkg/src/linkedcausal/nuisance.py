"""Fitting and evaluation of the four variation-independent working models.

Selection and propensity are logistic regressions fit by IRLS; the outcome
mean is OLS (continuous family) or logistic MLE (binary family); the
imputation model is one Gaussian linear regression per v-component with
conditionally independent components.  Prediction clamps probabilities to
[trunc, 1 - trunc] and counts every clamp so weighting diagnostics can be
surfaced downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .core import (
    LinkedDataset,
    LinkedRecord,
    ModelSpec,
    apply_transform,
    build_design,
)
from .errors import (
    DegeneracyError,
    MissingDataError,
    SingularDesignError,
    ValidationError,
)

SCORE_TOL = 1e-8
MAX_ITER = 100
SEPARATION_COEF = 30.0
DEFAULT_TRUNC = 1e-6
DEFAULT_DRAWS = 100

# cap on the n*D*q block materialised at once inside delta / draw loops
_CHUNK_CELLS = 20_000_000

RngLike = Union[int, np.random.Generator, np.random.SeedSequence]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def expit(eta) -> np.ndarray:
    # piecewise form avoids overflow warnings for |eta| ~ 700+
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class TruncationLog:
    """Mutable clamp-event counter; purely diagnostic."""

    count: int = 0

    def add(self, k: int) -> None:
        self.count += int(k)


def clamp_probs(p: np.ndarray, trunc: float,
                log: Optional[TruncationLog] = None) -> np.ndarray:
    if trunc <= 0:
        return p
    clipped = np.clip(p, trunc, 1.0 - trunc)
    if log is not None:
        log.add(np.count_nonzero(clipped != p))
    return clipped


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float
    separation: bool = False


@dataclass(frozen=True)
class OutcomeFit:
    coef: np.ndarray
    family: str  # "continuous" (identity link, OLS) or "binary" (logit MLE)
    residual_variance: Optional[float]
    converged: bool = True
    iterations: int = 0
    final_score_norm: float = 0.0
    separation: bool = False


@dataclass(frozen=True)
class ImputationFit:
    """Per-component Gaussian linear models for v given the x-design.

    ``response_transform`` records the scale the model (and therefore its
    draws) lives on: a transformed working model treats the transformed
    column as the covariate itself, so downstream consumers take draws
    as-is.
    """

    mean_coef: np.ndarray  # (q, k)
    resid_sd: np.ndarray   # (q,)
    degenerate_sd: bool = False
    response_transform: str = "identity"


@dataclass(frozen=True)
class NuisanceFit:
    selection: LogisticFit
    propensity: LogisticFit
    outcome: OutcomeFit
    imputation: ImputationFit
    spec: ModelSpec
    trunc: float = DEFAULT_TRUNC
    truncation: TruncationLog = field(default_factory=TruncationLog, compare=False)

    def with_trunc(self, trunc: float) -> "NuisanceFit":
        return replace(self, trunc=trunc, truncation=TruncationLog())

    def to_json_dict(self) -> dict:
        return {
            "selection": {
                "coef": self.selection.coef.tolist(),
                "converged": self.selection.converged,
                "iterations": self.selection.iterations,
                "final_score_norm": self.selection.final_score_norm,
                "separation": self.selection.separation,
            },
            "propensity": {
                "coef": self.propensity.coef.tolist(),
                "converged": self.propensity.converged,
                "iterations": self.propensity.iterations,
                "final_score_norm": self.propensity.final_score_norm,
                "separation": self.propensity.separation,
            },
            "outcome": {
                "coef": self.outcome.coef.tolist(),
                "family": self.outcome.family,
                "residual_variance": self.outcome.residual_variance,
                "converged": self.outcome.converged,
            },
            "imputation": {
                "mean_coef": self.imputation.mean_coef.tolist(),
                "resid_sd": self.imputation.resid_sd.tolist(),
                "degenerate_sd": self.imputation.degenerate_sd,
            },
            "trunc": self.trunc,
            "truncation_count": self.truncation.count,
        }


def _check_rank(X: np.ndarray, what: str) -> None:
    # eigenvalues of the k x k Gram matrix: O(n k^2), far cheaper than a
    # full SVD of X for the small designs used here
    if X.shape[0] < X.shape[1]:
        raise SingularDesignError(f"{what}: fewer rows than columns")
    ev = np.linalg.eigvalsh(X.T @ X)
    if ev[0] <= ev[-1] * X.shape[1] * np.finfo(float).eps:
        raise SingularDesignError(f"{what}: design is rank deficient")


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # log L = sum y*eta - log(1 + e^eta), stable via logaddexp
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X: np.ndarray, y: np.ndarray, *, tol: float = SCORE_TOL,
                 max_iter: int = MAX_ITER) -> LogisticFit:
    """Logistic MLE by IRLS with step-halving on likelihood decrease.

    Convergence is declared when the score sup-norm drops below ``tol``.
    Diverging coefficients with a non-vanishing score mark the fit as
    separated instead of raising.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("fit_logistic requires y in {0,1}")
    _check_rank(X, "logistic")
    coef = np.zeros(X.shape[1])
    eta = X @ coef
    ll = _loglik(eta, y)
    score = X.T @ (y - expit(eta))
    it = 0
    for it in range(1, max_iter + 1):
        norm = float(np.abs(score).max())
        if norm < tol:
            return LogisticFit(coef, True, it - 1, norm)
        p = expit(eta)
        w = p * (1.0 - p)
        H = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            # flat Hessian far out in a separated direction
            break
        stepsize = 1.0
        ll_tol = 1e-10 * (abs(ll) + 1.0)
        for _ in range(30):
            cand = coef + stepsize * step
            eta_c = X @ cand
            ll_c = _loglik(eta_c, y)
            if ll_c >= ll - ll_tol:
                break
            stepsize *= 0.5
        coef = coef + stepsize * step
        eta = X @ coef
        ll = _loglik(eta, y)
        score = X.T @ (y - expit(eta))
        if np.abs(coef).max() > SEPARATION_COEF and np.abs(score).max() >= tol:
            break
    norm = float(np.abs(score).max())
    separated = np.abs(coef).max() > SEPARATION_COEF and norm >= tol
    return LogisticFit(coef, norm < tol, it, norm, separation=separated)


def fit_linear(X: np.ndarray, y: np.ndarray) -> OutcomeFit:
    """Least squares through a rank-revealing factorisation; residual
    variance uses the unbiased n - k denominator."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < X.shape[1]:
        raise SingularDesignError("linear: fewer rows than columns")
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise SingularDesignError("linear: design is rank deficient")
    resid = y - X @ coef
    dof = X.shape[0] - X.shape[1]
    rv = float(resid @ resid / dof) if dof > 0 else 0.0
    return OutcomeFit(coef=coef, family="continuous", residual_variance=rv)


def fit_outcome(X: np.ndarray, y: np.ndarray, family: str) -> OutcomeFit:
    if family == "continuous":
        return fit_linear(X, y)
    if family == "binary":
        lf = fit_logistic(X, y)
        return OutcomeFit(coef=lf.coef, family="binary", residual_variance=None,
                          converged=lf.converged, iterations=lf.iterations,
                          final_score_norm=lf.final_score_norm,
                          separation=lf.separation)
    raise ValidationError(f"unknown outcome family {family!r}")


def fit_imputation(dataset: LinkedDataset, spec: ModelSpec) -> ImputationFit:
    """Per-component OLS of v on the imputation x-design over linked rows.

    A transformed map models the transformed column itself (the working
    model sees it as the covariate), so the response inherits the map's
    transform and draws come out on that same scale.
    """
    X = build_design(dataset, spec.imputation, rows="linked")
    k = X.shape[1]
    if dataset.n_linked < k + 2:
        raise DegeneracyError("too few linked rows to fit the imputation model")
    V = apply_transform(dataset.v[dataset.linked], spec.imputation.transform)
    q = V.shape[1]
    coefs = np.empty((q, k))
    sds = np.empty(q)
    dof = X.shape[0] - k
    for j in range(q):
        cj, _, rank, _ = np.linalg.lstsq(X, V[:, j], rcond=None)
        if rank < k:
            raise SingularDesignError("imputation: design is rank deficient")
        coefs[j] = cj
        resid = V[:, j] - X @ cj
        sds[j] = np.sqrt(resid @ resid / dof)
    # exact fits leave sd at rounding-noise level; draws are then constant
    degenerate = bool((sds <= 1e-12 * max(1.0, float(np.abs(V).max()))).any())
    return ImputationFit(mean_coef=coefs, resid_sd=sds,
                         degenerate_sd=degenerate,
                         response_transform=spec.imputation.transform)


def fit_nuisances(dataset: LinkedDataset, spec: ModelSpec,
                  trunc: float = DEFAULT_TRUNC) -> NuisanceFit:
    """Fit all four models on their prescribed row subsets."""
    spec.validate_for(dataset.p, dataset.q)
    sel = fit_logistic(build_design(dataset, spec.selection, rows="all"),
                       dataset.r.astype(float))
    prop = fit_logistic(build_design(dataset, spec.propensity, rows="linked"),
                        dataset.z[dataset.linked].astype(float))
    out = fit_outcome(build_design(dataset, spec.outcome, rows="linked"),
                      dataset.y[dataset.linked], dataset.outcome_family)
    imp = fit_imputation(dataset, spec)
    return NuisanceFit(selection=sel, propensity=prop, outcome=out,
                       imputation=imp, spec=spec, trunc=trunc)


# --------------------------------------------------------------------------
# prediction


def _is_record(data) -> bool:
    return isinstance(data, LinkedRecord)


def _record_dataset_arrays(rec: LinkedRecord):
    x = np.atleast_2d(np.asarray(rec.x, dtype=float))
    v = None if rec.v is None else np.atleast_2d(np.asarray(rec.v, dtype=float))
    return x, v


def predict_selection(fit: NuisanceFit, data, rows="all"):
    """rho-hat; clamped probability of appearing in the linked cohort."""
    if _is_record(data):
        x, _ = _record_dataset_arrays(data)
        eta = fit.spec.selection.build(0.0, x, None) @ fit.selection.coef
        return float(clamp_probs(expit(eta), fit.trunc, fit.truncation)[0])
    X = build_design(data, fit.spec.selection, rows=rows)
    return clamp_probs(expit(X @ fit.selection.coef), fit.trunc, fit.truncation)


def predict_propensity(fit: NuisanceFit, data, rows="linked", v=None):
    """pi-hat; requires v (a linked row, or an imputed v via ``v=``)."""
    if _is_record(data):
        x, vrec = _record_dataset_arrays(data)
        if v is not None:
            vrec = np.atleast_2d(np.asarray(v, dtype=float))
        if vrec is None:
            raise MissingDataError("propensity prediction requires v")
        eta = fit.spec.propensity.build(0.0, x, vrec) @ fit.propensity.coef
        return float(clamp_probs(expit(eta), fit.trunc, fit.truncation)[0])
    X = build_design(data, fit.spec.propensity, rows=rows)
    return clamp_probs(expit(X @ fit.propensity.coef), fit.trunc, fit.truncation)


def predict_outcome(fit: NuisanceFit, z, data, rows="linked", v=None):
    """mu-hat at treatment level z; binary-family values are clamped."""
    if _is_record(data):
        x, vrec = _record_dataset_arrays(data)
        if v is not None:
            vrec = np.atleast_2d(np.asarray(v, dtype=float))
        if vrec is None and fit.spec.outcome.uses_v:
            raise MissingDataError("outcome prediction requires v")
        eta = fit.spec.outcome.build(float(z), x, vrec) @ fit.outcome.coef
        if fit.outcome.family == "binary":
            return float(clamp_probs(expit(eta), fit.trunc, fit.truncation)[0])
        return float(eta[0])
    X = build_design(data, fit.spec.outcome, rows=rows, z_override=int(z))
    eta = X @ fit.outcome.coef
    if fit.outcome.family == "binary":
        return clamp_probs(expit(eta), fit.trunc, fit.truncation)
    return eta


# --------------------------------------------------------------------------
# imputation draws and the delta integral


def _imputation_means(fit: NuisanceFit, x: np.ndarray) -> np.ndarray:
    Ximp = fit.spec.imputation.build(0.0, x, None)
    return Ximp @ fit.imputation.mean_coef.T  # (n, q)


def draw_imputations(fit: NuisanceFit, x: np.ndarray, D: int,
                     rng: RngLike) -> np.ndarray:
    """D Gaussian draws of v for one x-vector; deterministic in the stream."""
    if D < 1:
        raise ValidationError("D must be >= 1")
    gen = as_generator(rng)
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    mean = _imputation_means(fit, x2)[0]  # (q,)
    e = gen.standard_normal((D, mean.shape[0]))
    return mean[None, :] + fit.imputation.resid_sd[None, :] * e


def _draws_block(mean: np.ndarray, sd: np.ndarray, D: int,
                 gen: np.random.Generator) -> np.ndarray:
    # (n, q) mean -> (n, D, q) draws; in-place scale and shift
    e = gen.standard_normal((mean.shape[0], D, mean.shape[1]))
    e *= sd[None, None, :]
    e += mean[:, None, :]
    return e


def _mu_on_draws(fit: NuisanceFit, z: int, x: np.ndarray,
                 v_draws: np.ndarray) -> np.ndarray:
    eta = fit.spec.outcome.linear_predictor_on_draws(
        fit.outcome.coef, float(z), x, v_draws)
    if fit.outcome.family == "binary":
        return clamp_probs(expit(eta), fit.trunc, fit.truncation)
    return eta


def delta(fit: NuisanceFit, z: int, x: np.ndarray, D: int = DEFAULT_DRAWS,
          rng: RngLike = 0) -> float:
    """Monte Carlo integral of the outcome mean over the imputation model."""
    if D < 1:
        raise ValidationError("D must be >= 1")
    gen = as_generator(rng)
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    mean = _imputation_means(fit, x2)
    draws = _draws_block(mean, fit.imputation.resid_sd, D, gen)
    return float(_mu_on_draws(fit, z, x2, draws).mean())


def delta_pair(fit: NuisanceFit, dataset: LinkedDataset, D: int = DEFAULT_DRAWS,
               rng: RngLike = 0, want_dgamma: bool = False):
    """delta(1, x) and delta(0, x) for every record with shared draws.

    Draw generation is chunked over records so large n*D products stay
    within memory; chunking does not change the stream, so results are
    bitwise identical to a single-block evaluation.

    For the continuous family with an outcome design affine in each draw
    component, the Monte Carlo average is taken through the affine map:
    only per-record draw means are formed, never a per-draw predictor.

    With ``want_dgamma`` the per-record derivative of delta with respect to
    the outcome coefficients is accumulated as well (needed by the sampling
    design module).
    """
    if D < 1:
        raise ValidationError("D must be >= 1")
    gen = as_generator(rng)
    n, q = dataset.n, dataset.q
    chunk = max(1, _CHUNK_CELLS // max(1, D * q))
    means = _imputation_means(fit, dataset.x)
    fmap = fit.spec.outcome
    if fit.outcome.family == "continuous":
        base1, slopes1, gen1 = fmap.affine_on_draws(fit.outcome.coef, 1.0,
                                                    dataset.x)
        base0, slopes0, gen0 = fmap.affine_on_draws(fit.outcome.coef, 0.0,
                                                    dataset.x)
        if not gen1 and not gen0:
            dm = np.empty((n, q))
            for lo in range(0, n, chunk):
                hi = min(n, lo + chunk)
                draws = _draws_block(means[lo:hi], fit.imputation.resid_sd,
                                     D, gen)
                dm[lo:hi] = draws.mean(axis=1)
            d1 = base1.copy()
            d0 = base0.copy()
            for j, s in slopes1.items():
                d1 += s * dm[:, j]
            for j, s in slopes0.items():
                d0 += s * dm[:, j]
            if want_dgamma:
                g1 = _dgamma_from_means(fit, 1, dataset.x, dm)
                g0 = _dgamma_from_means(fit, 0, dataset.x, dm)
                return d1, d0, g1, g0
            return d1, d0
    d1 = np.empty(n)
    d0 = np.empty(n)
    k = fmap.width
    g1 = np.zeros((n, k)) if want_dgamma else None
    g0 = np.zeros((n, k)) if want_dgamma else None
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        draws = _draws_block(means[lo:hi], fit.imputation.resid_sd, D, gen)
        xblk = dataset.x[lo:hi]
        mu1 = _mu_on_draws(fit, 1, xblk, draws)
        mu0 = _mu_on_draws(fit, 0, xblk, draws)
        d1[lo:hi] = mu1.mean(axis=1)
        d0[lo:hi] = mu0.mean(axis=1)
        if want_dgamma:
            g1[lo:hi] = _dgamma_block(fit, 1, xblk, draws, mu1)
            g0[lo:hi] = _dgamma_block(fit, 0, xblk, draws, mu0)
    if want_dgamma:
        return d1, d0, g1, g0
    return d1, d0


def _dgamma_from_means(fit: NuisanceFit, z: int, x: np.ndarray,
                       draw_means: np.ndarray) -> np.ndarray:
    """d delta / d gamma when every column is affine in one draw component."""
    fmap = fit.spec.outcome
    n = x.shape[0]
    zrow = np.full(n, float(z))
    out = np.empty((n, fmap.width))
    c = 0
    if fmap.include_intercept:
        out[:, 0] = 1.0
        c = 1
    for term in fmap._terms():
        col = None
        for tok in term:
            if tok.startswith("v"):
                j = int(tok[1:])
                f = draw_means[:, j]
            elif tok == "z":
                f = zrow
            else:
                f = fmap._factor(tok, zrow, x, None)
            col = f if col is None else col * f
        out[:, c] = col
        c += 1
    return out


def _dgamma_block(fit: NuisanceFit, z: int, x: np.ndarray, draws: np.ndarray,
                  mu: np.ndarray) -> np.ndarray:
    """Mean over draws of d mu / d gamma, column by column."""
    fmap = fit.spec.outcome
    n, D = mu.shape
    weight = mu * (1.0 - mu) if fit.outcome.family == "binary" else None
    out = np.empty((n, fmap.width))
    zcol = np.full((n, 1), float(z))
    c = 0
    if fmap.include_intercept:
        col = np.ones((n, 1))
        out[:, 0] = _weighted_draw_mean(col, weight, D)
        c = 1
    for term in fmap._terms():
        col = None
        for tok in term:
            if tok.startswith("v"):
                f = fmap._factor(tok, zcol, x, draws, raw_v=True)
            elif tok == "z":
                f = zcol
            else:
                f = fmap._factor(tok, zcol, x, None)[:, None]
            col = f if col is None else col * f
        out[:, c] = _weighted_draw_mean(col, weight, D)
        c += 1
    return out


def _weighted_draw_mean(col: np.ndarray, weight: Optional[np.ndarray],
                        D: int) -> np.ndarray:
    if weight is None:
        if col.shape[1] == 1:
            return col[:, 0]
        return col.mean(axis=1)
    return (weight * col).sum(axis=1) / D
