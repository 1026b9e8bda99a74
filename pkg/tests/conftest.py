import numpy as np
import pytest

from linkedcausal.core import ModelSpec, from_arrays
from linkedcausal.nuisance import (
    ImputationFit,
    LogisticFit,
    NuisanceFit,
    OutcomeFit,
)


def make_fit(spec: ModelSpec, sel, prop, out, imp_mean, imp_sd,
             family="continuous", trunc=1e-6) -> NuisanceFit:
    """Assemble a NuisanceFit from explicit coefficient vectors."""
    rv = 1.0 if family == "continuous" else None
    return NuisanceFit(
        selection=LogisticFit(np.asarray(sel, dtype=float), True, 0, 0.0),
        propensity=LogisticFit(np.asarray(prop, dtype=float), True, 0, 0.0),
        outcome=OutcomeFit(np.asarray(out, dtype=float), family, rv),
        imputation=ImputationFit(np.atleast_2d(np.asarray(imp_mean, float)),
                                 np.atleast_1d(np.asarray(imp_sd, float))),
        spec=spec, trunc=trunc)


@pytest.fixture
def simple_spec():
    return ModelSpec.default(1, 1)


@pytest.fixture
def tiny_linked():
    """Six records, four linked with both arms present."""
    r = [1, 1, 1, 1, 0, 0]
    z = [1, 0, 1, 0, 1, 0]
    y = [2.0, 1.0, 3.0, 0.5, 1.5, 2.5]
    x = np.array([[0.2], [-0.3], [0.8], [0.1], [-0.5], [0.4]])
    v = np.array([[0.5], [0.1], [-0.2], [0.7], [np.nan], [np.nan]])
    return from_arrays(r, z, y, x, v, "continuous")
