"""Exception and warning types raised across the package."""


class ACDEError(Exception):
    """Base class for all errors raised by :mod:`acde`."""


class ACDEWarning(UserWarning):
    """Category for recoverable data or fitting issues."""


class ParseError(ACDEError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DatasetTooSmallError(ACDEError, ValueError):
    pass


class InfeasiblePartitionError(ACDEError, ValueError):
    pass


class UnmatchedError(ACDEError):
    """Raised in ``fail`` mode when some individuals have an empty window.

    ``unmatched`` maps each offending index to the side(s) that were empty.
    """

    def __init__(self, message, unmatched):
        super().__init__(message)
        self.unmatched = unmatched


class NoTripletsError(ACDEError):
    pass


class EmptyGroupError(ACDEError, ValueError):
    pass


class EmptyBlocksError(ACDEError):
    pass


class NoFeasibleCandidateError(ACDEError):
    def __init__(self, message, reasons):
        super().__init__(message)
        self.reasons = reasons


class EnumerationBudgetError(ACDEError):
    pass


class DegenerateStatisticError(ACDEError):
    pass


class DomainError(ACDEError, ValueError):
    pass


class InfeasibleDesignError(ACDEError):
    pass
