"""Exception taxonomy shared across the package.

Exit codes used by the CLI: 1 for input/parse problems, 2 for statistical
degeneracies, 3 for numerical failures.
"""


class LinkedCausalError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParseError(LinkedCausalError):
    """Malformed input file (bad header, bad cell, missing file)."""

    exit_code = 1


class ConsistencyError(ParseError):
    """Data violates the missingness contract (v present iff r = 1)."""


class ValidationError(LinkedCausalError):
    """Invalid argument or configuration value."""

    exit_code = 1


class MissingDataError(LinkedCausalError):
    """A computation requested v for a row outside the linked cohort."""

    exit_code = 1


class DegeneracyError(LinkedCausalError):
    """The data cannot support the requested fit or estimate."""

    exit_code = 2


class DegenerateArmError(DegeneracyError):
    """A treatment arm carries zero total weight."""


class NonpositiveDenominatorError(DegeneracyError):
    """A ratio estimand has a denominator estimate <= 0."""


class UnstableBootstrapError(DegeneracyError):
    """More than 20% of bootstrap replicates were degenerate."""


class UnstableScenarioError(DegeneracyError):
    """More than 5% of Monte Carlo replicates failed."""


class NumericError(LinkedCausalError):
    """Numerical linear-algebra failure."""

    exit_code = 3


class SingularDesignError(NumericError):
    """Design matrix is rank deficient on the fitting rows."""


class SingularCorrectionError(NumericError):
    """An expectation matrix in the influence-function correction is singular.

    Re-run with drop_corrections=True to fall back to the uncorrected form.
    """
