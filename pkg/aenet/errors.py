"""Exception types and the process exit codes they map to."""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class AENetError(Exception):
    exit_code = EXIT_DATA


class UsageError(AENetError):
    exit_code = EXIT_USAGE


class DataError(AENetError):
    exit_code = EXIT_DATA


class ShapeError(DataError, ValueError):
    pass


class NumericError(AENetError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class UnmetThresholdError(AENetError):
    """Evaluation finished but a required score is below its threshold."""
    exit_code = EXIT_NUMERIC
