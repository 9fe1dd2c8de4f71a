"""Exception types shared across the package."""


class InputDomainError(ValueError):
    """A caller passed a value outside the operation's domain (NaN point, bad pixel, ...)."""


class ContractError(ValueError):
    """Mismatched shapes or a violated precondition between cooperating objects."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout or version."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss and was stopped."""
