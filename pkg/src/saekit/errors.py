"""Exception types shared across the toolkit."""


class SaekitError(Exception):
    """Base class for all toolkit errors."""


# --- direct estimation ---

class MissingMeasurement(SaekitError):
    """A required measurement field is absent from a survey row."""


class EmptyArea(SaekitError):
    """No survey rows available for the requested area."""


# --- spatial weights ---

class KTooLarge(SaekitError):
    """Requested more nearest neighbors than there are other areas."""


class MissingBoundary(SaekitError):
    """Contiguity weights requested for an area without a polygon."""


class ZeroVariance(SaekitError):
    """All values identical; spatial autocorrelation is undefined."""


# --- model fitting ---

class SingularDesign(SaekitError):
    """Design matrix is rank deficient (or empty)."""


class ZeroTotalVariance(SaekitError):
    """Some total variance entry sigma2_u + sigma2_i is zero."""


class NoConvergence(SaekitError):
    """Optimizer failed to converge within the iteration budget."""


class SingularAtRho(SaekitError):
    """(I - rho*W) is not invertible at the requested rho."""


class ColumnMismatch(SaekitError):
    """Prediction design matrix does not match the training design."""


# --- bootstrap ---

class TooFewSuccessfulReplicates(SaekitError):
    """Fewer than 80% of bootstrap replicates converged."""


# --- pipeline ---

class MissingPoverty(SaekitError):
    """Stratification requested but poverty share missing for some area."""
