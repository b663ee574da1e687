"""Exception types raised across the package."""


class EvCreditError(Exception):
    """Base class for all package errors."""


class IncompleteGameError(EvCreditError):
    """A group value required by an exact computation is missing."""


class CapacityError(EvCreditError):
    """The game is too large for exact enumeration."""


class UndefinedTransformError(EvCreditError):
    pass


class NoFeasibleSizeError(EvCreditError):
    pass


class InestimableAgentError(EvCreditError):
    """No group size has observations both with and without the agent."""


class InvalidKError(EvCreditError):
    pass


class NoDataError(EvCreditError):
    pass


class NoValidCandidateError(EvCreditError):
    pass


class InvalidActionError(EvCreditError):
    pass


class GroupSizeError(EvCreditError):
    pass


class InfeasibleError(EvCreditError):
    pass


class EmptyReportError(EvCreditError):
    pass


class FormatError(EvCreditError):
    """A text record could not be parsed."""
