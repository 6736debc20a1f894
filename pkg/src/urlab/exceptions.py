"""Error taxonomy shared by all modules.

Every failure mode raised on purpose derives from LabError so callers (and
the CLI) can separate anticipated input/resolution problems from bugs.
"""


class LabError(Exception):
    """Base class for all deliberate errors raised by this package."""


class ParameterError(LabError, ValueError):
    """A parameter is outside its documented range."""


class InputError(LabError, ValueError):
    """Input data violates a documented precondition."""


class ResolutionError(LabError):
    """A query is finer than the data resolution supports."""


class DegenerateInputError(LabError):
    """Too little data in the queried region to define the quantity."""


class TruncationError(LabError):
    """A ball or grid leaves the region where the data is trustworthy."""


class DomainError(LabError):
    """A probe point lies outside the computed domain decomposition."""


class NumericError(LabError):
    """An iterative solver failed to reach its tolerance."""


class TopologyError(LabError):
    """The discretized domain is not connected the way the solver needs."""


class StateError(LabError):
    """An object is used before the state it needs was computed."""
