"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or inconsistent input data (bad image, wrong dims, ...)."""


class BuildError(RuntimeError):
    """Sparse precision construction failed (non-factorizable local Gram)."""


class FitError(RuntimeError):
    """Model fitting failed to converge or produced non-finite values."""
