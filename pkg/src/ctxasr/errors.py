"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation 2, data 3, numerical 4.
"""


class CtxAsrError(Exception):
    exit_code = 1


class ContractError(CtxAsrError):
    """A precondition or stage contract was violated by the caller."""

    exit_code = 2


class ShapeError(ContractError, ValueError):
    pass


class ValidationError(ContractError):
    """Configuration or command-line validation failed."""

    exit_code = 2


class DataError(CtxAsrError):
    """Input files are missing records or malformed."""

    exit_code = 3


class NumericalError(CtxAsrError):
    exit_code = 4
