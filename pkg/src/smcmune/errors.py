"""Exception types shared across the package."""


class SmcMuneError(Exception):
    """Base class for all package errors."""


class ValidationError(SmcMuneError):
    """Bad user input: malformed data, out-of-range parameters, unknown config keys."""


class NumericalError(SmcMuneError):
    """A numeric routine failed to produce a usable result."""


class AnnihilatedPosteriorError(NumericalError):
    """Every lattice vertex of a posterior grid carries zero mass.

    Signals a probability-zero firing history; callers treat it as a
    zero-weight event rather than aborting a run.
    """


class ResourceCapError(SmcMuneError):
    """A configured resource ceiling (particles, grid vertices, samples) was hit."""
