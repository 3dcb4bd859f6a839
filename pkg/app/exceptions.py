"""Exception types raised across Philautia-Eval"""

from typing import Optional


class PhilautiaError(Exception):
    """Root of every error raised by this package"""


class RecordValidationError(PhilautiaError):
    """A JSONL line could not be parsed into the requested record type"""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class DatasetValidationError(PhilautiaError):
    """Duplicate or orphan records found while checking a dataset against its manifest"""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class CoverageError(PhilautiaError):
    """A score-matrix cell is empty or below the coverage floor"""

    def __init__(self, generator: str, evaluator: str, present: int, expected: int, floor: float):
        self.generator = generator
        self.evaluator = evaluator
        self.present = present
        self.expected = expected
        self.floor = floor
        if present == 0:
            message = f"cell ({generator}, {evaluator}) has no scores"
        else:
            message = (
                f"cell ({generator}, {evaluator}) covers {present}/{expected} images, "
                f"below the floor of {floor:.2f}"
            )
        super().__init__(message)


class PromptRenderError(PhilautiaError):
    """An evaluation prompt could not be rendered"""


class ParseError(PhilautiaError):
    """An evaluator reply carried no usable dollar-wrapped score"""

    def __init__(self, message: str, response: Optional[str] = None):
        self.response = response
        super().__init__(message)


class CollectionAbortedError(PhilautiaError):
    """Collection stopped because the journal could not be written"""


class DegenerateInputError(PhilautiaError):
    """A statistic is undefined for the given input (all ties, zero variance, too few rows)"""


class AxisMismatchError(PhilautiaError):
    """Two matrices or id lists that must share axes do not"""


class ConvergenceError(PhilautiaError):
    """Coordinate descent hit max_iter before meeting the tolerance"""

    def __init__(self, iterations: int, last_delta: float):
        self.iterations = iterations
        self.last_delta = last_delta
        super().__init__(
            f"elastic net did not converge after {iterations} sweeps (last max delta {last_delta:.3e})"
        )


class MissingMemberScoreError(PhilautiaError):
    """An ensemble member has no score for a sample that needs one"""


class SaturationError(PhilautiaError):
    """A simulator config clips more than half of its scores"""


class CombinatorialGuardError(PhilautiaError):
    """Subset enumeration would exceed the configured limit"""
