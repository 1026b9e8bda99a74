"""Data-generating mechanisms, misspecification scenarios, and the Monte
Carlo runner.

Two generating mechanisms are built in: a continuous-outcome mechanism with
additive treatment effect 2.5 and a binary-outcome mechanism with risk
ratio 4.  Misspecification follows the square-root-absolute-value device:
the working model swaps x and v for |x|^(1/2) and |v|^(1/2) while the data
law stays fixed.  Replicates draw their streams from (master_seed,
replicate index), so results are independent of worker scheduling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .core import FeatureMap, LinkedDataset, ModelSpec, from_arrays
from .errors import (
    LinkedCausalError,
    NonpositiveDenominatorError,
    UnstableScenarioError,
    ValidationError,
)
from .estimators import EifTerms, compute_estimates
from .inference import DEFAULT_LEVEL, bootstrap
from .nuisance import DEFAULT_DRAWS, ImputationFit, LogisticFit, NuisanceFit
from .nuisance import OutcomeFit, expit, fit_nuisances

CONTINUOUS_TRUTH = 2.5
BINARY_CRR_NOMINAL = 4.0  # the rounded value quoted for the binary mechanism
SIM_BOOTSTRAP_B = 100
TABLE_ESTIMATORS = ("ipw", "om", "impute", "tr")
SCENARIO_IDS = ("i", "ii", "iii", "iv", "v")


def binary_crr_truth(imp_mean, imp_sd, outcome, nodes: int = 200) -> float:
    """Exact E[Y1]/E[Y0] of the binary mechanism by 2-D Gauss-Hermite.

    Comes out near, but not exactly at, the rounded nominal value 4;
    Monte Carlo bias is measured against this exact value.
    """
    from numpy.polynomial.hermite import hermgauss

    t, w = hermgauss(nodes)
    x = np.sqrt(2.0) * t[:, None]
    eps = np.sqrt(2.0) * t[None, :]
    wt = (w[:, None] * w[None, :]) / np.pi
    v = imp_mean[0] + imp_mean[1] * x + imp_sd * eps
    b = outcome
    p1 = expit(b[0] + b[1] * x + b[2] * v + b[3] + b[4] * x + b[5] * v)
    p0 = expit(b[0] + b[1] * x + b[2] * v)
    return float((p1 * wt).sum() / (p0 * wt).sum())


@dataclass(frozen=True)
class DgmSpec:
    """Named constants of the generating mechanism.

    The outcome coefficient order is (intercept, x, v, z, z*x, z*v); the
    treatment effect of the continuous mechanism is out[3] + out[4]*E[X]
    + out[5]*E[V] = 2.5 at the defaults.
    """

    family: str
    n: int
    selection: tuple[float, float]
    imp_mean: tuple[float, float]
    imp_sd: float
    propensity: tuple[float, float, float]
    outcome: tuple[float, float, float, float, float, float]
    noise_sd: float
    truth: float
    master_seed: Optional[int] = None

    @classmethod
    def continuous(cls, n: int, master_seed: Optional[int] = None) -> "DgmSpec":
        return cls(family="continuous", n=n,
                   selection=(0.75, 0.5),
                   imp_mean=(0.5, 0.5), imp_sd=1.0,
                   propensity=(0.5, 0.5, 0.6),
                   outcome=(0.5, 0.5, 0.5, 2.0, 2.0, 1.0),
                   noise_sd=1.0, truth=CONTINUOUS_TRUTH,
                   master_seed=master_seed)

    @classmethod
    def binary(cls, n: int, master_seed: Optional[int] = None) -> "DgmSpec":
        imp_mean, imp_sd = (1.0, 0.75), 1.0
        outcome = (-2.0, 0.5, 0.5, 4.0, 0.5, 0.5)
        return cls(family="binary", n=n,
                   selection=(0.75, 1.0),
                   imp_mean=imp_mean, imp_sd=imp_sd,
                   propensity=(0.5, 0.5, 0.5),
                   outcome=outcome,
                   noise_sd=0.0,
                   truth=binary_crr_truth(imp_mean, imp_sd, outcome),
                   master_seed=master_seed)

    @classmethod
    def for_family(cls, family: str, n: int,
                   master_seed: Optional[int] = None) -> "DgmSpec":
        if family == "continuous":
            return cls.continuous(n, master_seed)
        if family == "binary":
            return cls.binary(n, master_seed)
        raise ValidationError(f"unknown family {family!r}")


def _outcome_location(dgm: DgmSpec, z, x, v):
    b = dgm.outcome
    return b[0] + b[1] * x + b[2] * v + z * (b[3] + b[4] * x + b[5] * v)


def generate_with_potentials(dgm: DgmSpec, rng: np.random.Generator):
    """Draw a dataset plus both potential outcomes (for oracle checks).

    Draw order is fixed: x, r, v, z, outcome noise.  The v column of the
    returned dataset is masked to NaN outside the linked cohort.
    """
    if dgm.n < 1:
        raise ValidationError("n must be >= 1")
    n = dgm.n
    x = rng.standard_normal(n)
    r = (rng.random(n) < expit(dgm.selection[0] + dgm.selection[1] * x))
    v = dgm.imp_mean[0] + dgm.imp_mean[1] * x + dgm.imp_sd * rng.standard_normal(n)
    pz = expit(dgm.propensity[0] + dgm.propensity[1] * x + dgm.propensity[2] * v)
    z = (rng.random(n) < pz).astype(np.int8)
    loc1 = _outcome_location(dgm, 1.0, x, v)
    loc0 = _outcome_location(dgm, 0.0, x, v)
    if dgm.family == "continuous":
        eps = rng.standard_normal(n) * dgm.noise_sd
        y1 = loc1 + eps
        y0 = loc0 + eps
    else:
        u = rng.random(n)
        y1 = (u < expit(loc1)).astype(float)
        y0 = (u < expit(loc0)).astype(float)
    y = np.where(z == 1, y1, y0)
    vcol = np.where(r, v, np.nan)[:, None]
    ds = from_arrays(r.astype(np.int8), z, y, x[:, None], vcol, dgm.family)
    return ds, y1, y0


def generate(dgm: DgmSpec, rng: np.random.Generator) -> LinkedDataset:
    ds, _, _ = generate_with_potentials(dgm, rng)
    return ds


def true_nuisance_fit(dgm: DgmSpec, trunc: float = 0.0) -> NuisanceFit:
    """NuisanceFit holding the generating coefficients (no fitting)."""
    spec = ModelSpec.default(1, 1)
    b = dgm.outcome
    # outcome design order is (1, z, x0, v0, z*x0, z*v0)
    out_coef = np.array([b[0], b[3], b[1], b[2], b[4], b[5]])
    rv = dgm.noise_sd ** 2 if dgm.family == "continuous" else None
    return NuisanceFit(
        selection=LogisticFit(np.array(dgm.selection), True, 0, 0.0),
        propensity=LogisticFit(np.array(dgm.propensity), True, 0, 0.0),
        outcome=OutcomeFit(out_coef, dgm.family, rv),
        imputation=ImputationFit(np.array([list(dgm.imp_mean)]),
                                 np.array([dgm.imp_sd])),
        spec=spec, trunc=trunc)


@dataclass(frozen=True)
class ScenarioSpec:
    """Which working models keep the generating functional form."""

    id: str
    rho_correct: bool
    pi_correct: bool
    mu_correct: bool
    f_correct: bool

    _FLAGS = {
        "i": (True, True, True, True),
        "ii": (True, True, False, False),
        "iii": (True, False, True, False),
        "iv": (False, False, True, True),
        "v": (False, False, False, False),
    }

    @classmethod
    def from_id(cls, sid: str) -> "ScenarioSpec":
        sid = sid.strip().lower()
        if sid not in cls._FLAGS:
            raise ValidationError(f"unknown scenario {sid!r}; use i..v")
        return cls(sid, *cls._FLAGS[sid])

    def model_spec(self) -> ModelSpec:
        def tf(correct: bool) -> str:
            return "identity" if correct else "sqrt_abs"

        inter = (("z", "x0"), ("z", "v0"))
        return ModelSpec(
            selection=FeatureMap(mains=("x0",), transform=tf(self.rho_correct)),
            propensity=FeatureMap(mains=("x0", "v0"),
                                  transform=tf(self.pi_correct)),
            outcome=FeatureMap(mains=("z", "x0", "v0"), interactions=inter,
                               transform=tf(self.mu_correct)),
            imputation=FeatureMap(mains=("x0",), transform=tf(self.f_correct)),
        )


@dataclass
class EstimatorSummary:
    estimate_mean: float
    bias: float
    sd: float
    cp: Optional[float]  # fraction in [0, 1]; None when intervals were skipped

    @property
    def bias_x100(self) -> float:
        return 100.0 * self.bias

    @property
    def sd_x100(self) -> float:
        return 100.0 * self.sd

    @property
    def cp_pct(self) -> Optional[float]:
        return None if self.cp is None else 100.0 * self.cp


@dataclass
class McResult:
    family: str
    scenario: str
    n: int
    target: str
    truth: float
    reps_requested: int
    reps_used: int
    failures: list
    estimators: dict  # name -> EstimatorSummary
    master_seed: int

    def to_json_dict(self) -> dict:
        return {
            "family": self.family,
            "scenario": self.scenario,
            "n": self.n,
            "target": self.target,
            "truth": self.truth,
            "reps_requested": self.reps_requested,
            "reps_used": self.reps_used,
            "failures": list(self.failures),
            "master_seed": self.master_seed,
            "estimators": {
                k: {"bias_x100": s.bias_x100, "sd_x100": s.sd_x100,
                    "cp_pct": s.cp_pct, "mean": s.estimate_mean}
                for k, s in self.estimators.items()
            },
        }


def _plugin_interval(terms: EifTerms, n: int, target: str, level: float):
    if target == "ate":
        est = float(np.mean(terms.phi1 - terms.phi0))
        psi = terms.phi1 - terms.phi0 - est
    else:
        den = float(np.mean(terms.phi0))
        if den <= 0.0:
            raise NonpositiveDenominatorError(
                "risk-ratio denominator is nonpositive")
        est = float(np.mean(terms.phi1)) / den
        psi = (terms.phi1 - est * terms.phi0) / den
    se = float(np.sqrt(np.mean(psi ** 2) / n))
    zq = norm.ppf(0.5 + level / 2.0)
    return est - zq * se, est + zq * se


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_replicate(dgm: DgmSpec, scenario: ScenarioSpec,
                  estimators: Sequence[str], target: str, ci: str,
                  D: int, B: int, level: float, master_seed: int,
                  rep: int) -> dict:
    """One Monte Carlo replicate; streams derive from (master_seed, rep)."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(rep,))
    data_ss, est_ss, boot_ss = ss.spawn(3)
    ds = generate(dgm, np.random.default_rng(data_ss))
    spec = scenario.model_spec()
    fit = fit_nuisances(ds, spec)
    ests, terms = compute_estimates(ds, fit, list(estimators), target=target,
                                    D=D, rng=np.random.default_rng(est_ss))
    out = {name: {"estimate": est, "ci": None} for name, est in ests.items()}
    if ci == "none":
        return out
    singles = [n for n in estimators if n != "tr"]
    if "tr" in estimators:
        if ci == "plugin":
            out["tr"]["ci"] = _plugin_interval(terms, ds.n, target, level)
        else:
            singles.append("tr")
    if singles:
        summaries = bootstrap(ds, spec, singles, target=target, B=B, D=D,
                              seed=_seed_int(boot_ss), level=level)
        for name in singles:
            rep_b = summaries[name].report("normal")
            out[name]["ci"] = (rep_b.ci_low, rep_b.ci_high)
    return out


def _worker(args):
    try:
        return args[-1], run_replicate(*args), None
    except LinkedCausalError as e:
        return args[-1], None, f"{type(e).__name__}: {e}"


def _worker_count(reps: int, workers: Optional[int]) -> int:
    if workers is None:
        env = os.environ.get("LINKEDCAUSAL_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(workers, reps))


def run_monte_carlo(dgm: DgmSpec, scenario: ScenarioSpec,
                    estimators: Sequence[str] = TABLE_ESTIMATORS,
                    reps: int = 200, ci: str = "plugin",
                    D: int = DEFAULT_DRAWS, B: int = SIM_BOOTSTRAP_B,
                    level: float = DEFAULT_LEVEL,
                    master_seed: Optional[int] = None,
                    workers: Optional[int] = None,
                    target: Optional[str] = None) -> McResult:
    """Bias / SD / coverage study of the requested estimators.

    ``ci`` picks the interval for the combined estimator ("plugin" or
    "bootstrap"); single-strategy estimators always use the bootstrap, and
    ``ci="none"`` skips intervals entirely.  Failed replicates are dropped
    and itemised; more than 5% failures aborts.
    """
    if reps < 2:
        raise ValidationError("reps must be >= 2")
    if ci not in ("plugin", "bootstrap", "none"):
        raise ValidationError(f"unknown ci choice {ci!r}")
    if master_seed is None:
        master_seed = dgm.master_seed if dgm.master_seed is not None else 0
    if target is None:
        target = "crr" if dgm.family == "binary" else "ate"
    args = [(dgm, scenario, tuple(estimators), target, ci, D, B, level,
             master_seed, rep) for rep in range(reps)]
    nw = _worker_count(reps, workers)
    if nw == 1:
        results = [_worker(a) for a in args]
    else:
        with get_context("fork").Pool(nw) as pool:
            results = pool.map(_worker, args, chunksize=1)
    results.sort(key=lambda t: t[0])
    failures = [f"rep {rep}: {err}" for rep, _, err in results if err]
    if len(failures) > 0.05 * reps:
        raise UnstableScenarioError(
            f"{len(failures)}/{reps} replicates failed: {failures[:3]}")
    good = [res for _, res, err in results if err is None]
    summaries = {}
    for name in estimators:
        vals = np.array([g[name]["estimate"] for g in good])
        cis = [g[name]["ci"] for g in good]
        cp = None
        if ci != "none":
            covered = [lo <= dgm.truth <= hi for lo, hi in cis]
            cp = float(np.mean(covered))
        summaries[name] = EstimatorSummary(
            estimate_mean=float(vals.mean()),
            bias=float(vals.mean() - dgm.truth),
            sd=float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            cp=cp)
    return McResult(family=dgm.family, scenario=scenario.id, n=dgm.n,
                    target=target, truth=dgm.truth, reps_requested=reps,
                    reps_used=len(good), failures=failures,
                    estimators=summaries, master_seed=master_seed)
