"""Exception hierarchy.

Every error raised by the library derives from :class:`PMMError` so callers
(and the CLI) can catch one type and map it to an exit status.
"""


class PMMError(Exception):
    """Base class for all computational errors raised by pmmdirect."""


class SchemaError(PMMError):
    pass


class DuplicateRow(PMMError):
    pass


class IncompleteBaseline(PMMError):
    pass


class PatternViolation(PMMError):
    pass


class RankDeficient(PMMError):
    pass


class SingularCovariance(PMMError):
    pass


class NotConverged(PMMError):
    pass


class NotConvergedWarning(UserWarning):
    pass


class InsufficientRetrievedDropouts(PMMError):
    def __init__(self, count, required, arm=None):
        self.count = count
        self.required = required
        self.arm = arm
        where = "" if arm is None else f" in arm {arm}"
        super().__init__(
            f"{count} retrieved dropouts{where}; at least {required} required"
        )


class EmptyCell(PMMError):
    pass


class SingularBread(PMMError):
    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or f"singular bread matrix in block {block!r}")


class GradientCheckFailed(PMMError):
    pass


class PreconditionViolated(PMMError):
    pass


class IllConditioned(PMMError):
    pass


class NoBoundary(PMMError):
    pass


class NotMonotone(PMMError):
    pass


class InfeasibleTarget(PMMError):
    pass


class StudyAborted(PMMError):
    pass


class IOFailure(PMMError):
    pass
