"""Exception types shared across the package."""


class ForesightError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ForesightError):
    """Bad or inconsistent pipeline configuration."""


class IntegrityError(ForesightError):
    """A file failed a hash / magic / version check, or stages disagree
    about which artifact they were built from."""


class NonFiniteError(ForesightError):
    """A numeric op produced NaN or Inf. Raised at the op that created it
    so the offending computation is named, never propagated silently."""


class FullyMaskedError(ForesightError):
    """An attention row has no valid key positions to attend to."""


class StorageError(ForesightError):
    """An append could not be durably logged; in-memory state was not
    advanced."""
