"""Exception taxonomy shared by the library and the CLI.

Exit-code mapping for the CLI: ValidationError -> 2, BudgetError -> 3,
NumericalError -> 4.
"""


class RewardAlignError(Exception):
    """Base class for all library errors."""


class ValidationError(RewardAlignError):
    """Bad configuration, malformed spec, or violated precondition."""


class ConfigurationError(ValidationError):
    """A model/reward combination that cannot satisfy its invariants
    (e.g. tilted mixture mass escaping the support ball)."""


class BudgetError(RewardAlignError):
    """A predicted cost (net cardinality, Monte Carlo sample count)
    exceeds its configured cap.  Raised before allocation."""


class NumericalError(RewardAlignError):
    """Non-finite values, failed convergence, or broken oracles detected
    at runtime."""


class EnvelopeViolationError(NumericalError):
    """Rejection acceptance outside [0, 1]: the envelope does not
    dominate the reward, indicating a broken first-order oracle."""


class CapabilityError(ValidationError):
    """Requested an exact computation outside the supported regime
    (e.g. high-dimensional exact Wasserstein)."""
