"""Exception types shared across the package."""


class BsdelabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BsdelabError, ValueError):
    """An argument failed shape or value validation."""


class InvalidConfigError(BsdelabError, ValueError):
    """A configuration cannot be run as given (bad grid, bad slice, bad schema)."""


class CapacityError(BsdelabError):
    """An allocation would exceed the configured memory budget."""


class CapabilityError(BsdelabError):
    """A feature needs data the problem does not declare (missing evaluator or bound)."""


class DivergenceError(BsdelabError):
    """Fixed-point sweeps stopped contracting.

    Parameters
    ----------
    message : str
    ratios : sequence of float, optional
        Successive distance ratios observed before giving up.
    """

    def __init__(self, message, ratios=None):
        super().__init__(message)
        self.ratios = list(ratios) if ratios is not None else []


class BlowUpError(BsdelabError):
    """A simulated quantity left the finite range before the horizon.

    Carries ``first_bad_index``, the first grid index with a non-finite entry.
    """

    def __init__(self, message, first_bad_index=None):
        super().__init__(message)
        self.first_bad_index = first_bad_index


class HorizonExceededError(BsdelabError):
    """The requested horizon exceeds what the solver can certify."""


class NoCertificateError(BsdelabError):
    """A search for a certified constant exhausted its budget without passing."""
