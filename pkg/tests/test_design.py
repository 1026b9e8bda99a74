import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from linkedcausal.core import FeatureMap, ModelSpec, from_arrays
from linkedcausal.design import (
    CostSpec,
    GammaEstimates,
    asymptotic_variance,
    estimate_gammas,
    optimal_allocation,
)
from linkedcausal.errors import SingularCorrectionError, ValidationError
from linkedcausal.nuisance import expit, fit_nuisances
from linkedcausal.sim import DgmSpec, ScenarioSpec, generate


def constant_selection_dgm(n):
    return dataclasses.replace(DgmSpec.continuous(n), selection=(0.0, 0.0))


def gammas(g1, g2):
    return GammaEstimates(gamma1=g1, gamma2=g2, n_pilot=0, linked_pilot=0,
                          rho_hat=0.5)


class TestEstimateGammas:

    def test_degenerate_outcome_gives_zero_gammas(self):
        rng = np.random.default_rng(0)
        n = 400
        x = rng.standard_normal(n)
        r = (rng.random(n) < 0.5).astype(int)
        r[:4] = 1
        z = (rng.random(n) < 0.5).astype(int)
        z[:2] = [0, 1]
        v = np.where(r[:, None] == 1, rng.standard_normal((n, 1)), np.nan)
        ds = from_arrays(r, z, np.full(n, 7.0), x[:, None], v, "continuous")
        fit = fit_nuisances(ds, ModelSpec.default(1, 1))
        g = estimate_gammas(ds, fit, D=50, rng=1)
        assert abs(g.gamma1) < 1e-12
        assert 0.0 <= g.gamma2 < 1e-12
        assert g.rho_hat == pytest.approx(r.mean())

    def test_gamma2_nonnegative(self):
        for seed in range(4):
            ds = generate(constant_selection_dgm(1500),
                          np.random.default_rng(seed))
            fit = fit_nuisances(ds, ScenarioSpec.from_id("i").model_spec())
            g = estimate_gammas(ds, fit, D=40, rng=seed)
            assert g.gamma2 >= 0.0

    def test_matches_large_sample_oracle(self):
        # independent evaluation of the same influence decomposition at the
        # generating parameter values, on a 10^6 draw
        rng = np.random.default_rng(99)
        n_big = 1_000_000
        x = rng.standard_normal(n_big)
        v = 0.5 + 0.5 * x + rng.standard_normal(n_big)
        pz = expit(0.5 + 0.5 * x + 0.6 * v)
        z = (rng.random(n_big) < pz).astype(float)
        y = (0.5 + 0.5 * x + 0.5 * v + z * (2.0 + 2.0 * x + v)
             + rng.standard_normal(n_big))
        m = 0.5 + 0.5 * x
        mu1 = 0.5 + 0.5 * x + 0.5 * v + 2.0 + 2.0 * x + v
        mu0 = 0.5 + 0.5 * x + 0.5 * v
        d1 = 0.5 + 0.5 * x + 0.5 * m + 2.0 + 2.0 * x + m
        d0 = 0.5 + 0.5 * x + 0.5 * m
        pi = pz
        s1 = d1 - d0 - 2.5
        s2 = (z * (y - mu1) / pi + mu1 - d1
              - (1 - z) * (y - mu0) / (1 - pi) - mu0 + d0)
        gamma1_star = float(np.mean(s1 ** 2) + 2.0 * np.mean(s1 * s2))
        gamma2_star = float(np.mean(s2 ** 2))

        ds = generate(constant_selection_dgm(20_000),
                      np.random.default_rng(5))
        fit = fit_nuisances(ds, ScenarioSpec.from_id("i").model_spec())
        g = estimate_gammas(ds, fit, D=100, rng=2)
        assert g.gamma1 == pytest.approx(gamma1_star, rel=0.10)
        assert g.gamma2 == pytest.approx(gamma2_star, rel=0.10)

    def test_variance_formula_tracks_sampling_variance(self):
        # with a misspecified outcome model the coefficient-estimation
        # corrections in the linked component carry real weight: the
        # Gamma-based variance must track the Monte Carlo variance of the
        # combined estimator (and would be badly off without corrections)
        dgm = constant_selection_dgm(2500)
        spec = ModelSpec(
            selection=FeatureMap(mains=("x0",)),
            propensity=FeatureMap(mains=("x0", "v0")),
            outcome=FeatureMap(mains=("z", "x0", "v0"),
                               interactions=(("z", "x0"), ("z", "v0")),
                               transform="sqrt_abs"),
            imputation=FeatureMap(mains=("x0",), transform="sqrt_abs"),
        )
        from linkedcausal.estimators import tau_tr
        taus, asyvars = [], []
        for rep in range(100):
            ds = generate(dgm, np.random.default_rng((66, rep)))
            fit = fit_nuisances(ds, spec)
            taus.append(tau_tr(ds, fit, D=50, rng=rep))
            g = estimate_gammas(ds, fit, D=50, rng=rep)
            asyvars.append((g.gamma1 + g.gamma2 / g.rho_hat) / ds.n)
        ratio = float(np.mean(asyvars)) / float(np.var(taus, ddof=1))
        assert 0.7 <= ratio <= 1.4

    def test_singular_correction_and_fallback(self):
        ds = generate(constant_selection_dgm(800), np.random.default_rng(8))
        # duplicated interaction column makes the outcome score matrix singular
        spec = ModelSpec(
            selection=FeatureMap(mains=("x0",)),
            propensity=FeatureMap(mains=("x0", "v0")),
            outcome=FeatureMap(mains=("z", "x0", "v0"),
                               interactions=(("z", "x0"), ("z", "x0"))),
            imputation=FeatureMap(mains=("x0",)),
        )
        from conftest import make_fit
        fit = make_fit(spec, [0.0, 0.0], [0.5, 0.5, 0.6],
                       [0.5, 2.0, 0.5, 0.5, 1.0, 1.0], [0.5, 0.5], 1.0)
        with pytest.raises(SingularCorrectionError):
            estimate_gammas(ds, fit, D=20, rng=3)
        g = estimate_gammas(ds, fit, D=20, rng=3, drop_corrections=True)
        assert not g.corrections_used
        assert g.gamma2 >= 0.0


class TestOptimalAllocation:

    def test_full_second_phase_branch(self):
        sol = optimal_allocation(gammas(1.0, 2.0), CostSpec(C=100, C1=1, C2=1))
        assert sol.rho_star == 1.0
        assert sol.n_star == pytest.approx(50.0)

    def test_closed_form_interior(self):
        sol = optimal_allocation(gammas(4.0, 1.0), CostSpec(C=300, C1=1, C2=1))
        assert sol.rho_star == pytest.approx(0.5, abs=1e-12)
        assert sol.n_star == pytest.approx(200.0)
        # grid search agrees
        k = int(np.argmin(sol.curve[:, 1]))
        step = sol.curve[1, 0] - sol.curve[0, 0]
        assert abs(sol.curve[k, 0] - sol.rho_star) <= step + 1e-12

    def test_negative_gamma1_full_phase(self):
        for g2 in (0.5, 2.0):
            sol = optimal_allocation(gammas(-1.0, g2),
                                     CostSpec(C=50, C1=1, C2=2))
            assert sol.rho_star == 1.0

    def test_variance_identity(self):
        g = gammas(3.0, 0.7)
        c = CostSpec(C=120.0, C1=2.0, C2=5.0)
        sol = optimal_allocation(g, c)
        rho = sol.curve[:, 0]
        expected = (c.C2 * g.gamma1 * rho / c.C + c.C1 * g.gamma2 / (c.C * rho)
                    + (c.C1 * g.gamma1 + c.C2 * g.gamma2) / c.C)
        npt.assert_array_equal(sol.curve[:, 1], expected)

    def test_cost_scaling_invariance(self):
        g = gammas(2.0, 0.9)
        a = optimal_allocation(g, CostSpec(C=100, C1=1.0, C2=3.0))
        b = optimal_allocation(g, CostSpec(C=700, C1=7.0, C2=21.0))
        assert a.rho_star == pytest.approx(b.rho_star, rel=1e-12)
        assert a.n_star == pytest.approx(b.n_star, rel=1e-12)

    def test_closed_form_matches_grid_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            g1 = rng.uniform(-1.0, 5.0)
            g2 = rng.uniform(0.05, 3.0)
            c1 = rng.uniform(0.2, 4.0)
            c2 = rng.uniform(0.2, 4.0)
            sol = optimal_allocation(gammas(g1, g2),
                                     CostSpec(C=200.0, C1=c1, C2=c2))
            k = int(np.argmin(sol.curve[:, 1]))
            step = sol.curve[1, 0] - sol.curve[0, 0]
            if g1 > 0:
                assert abs(sol.curve[k, 0] - sol.rho_star) <= step + 1e-12
            else:
                assert sol.rho_star == 1.0

    def test_cost_validation(self):
        with pytest.raises(ValidationError):
            CostSpec(C=10, C1=0.0, C2=1.0)
        with pytest.raises(ValidationError):
            CostSpec(C=0.5, C1=1.0, C2=1.0)

    def test_asymptotic_variance_min_at_rho_star(self):
        g = gammas(4.0, 1.0)
        c = CostSpec(C=300, C1=1, C2=1)
        sol = optimal_allocation(g, c)
        v_star = asymptotic_variance(sol.rho_star, g, c)
        assert (sol.curve[:, 1] >= v_star - 1e-12).all()

    def test_n_star_integer_reports(self):
        sol = optimal_allocation(gammas(4.0, 1.0),
                                 CostSpec(C=301, C1=1, C2=1))
        assert sol.n_star_floor <= sol.n_star <= sol.n_star_ceil
