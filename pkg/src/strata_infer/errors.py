"""Exception hierarchy shared by every module."""


class StrataInferError(Exception):
    """Base class for library errors."""

    exit_code = 2


class DataValidationError(StrataInferError, ValueError):
    pass


class MissingTarget(StrataInferError, KeyError):
    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(f"no target assignment probability for stratum {stratum!r}")

    def __str__(self):
        return self.args[0]


class NonIntegralBlock(StrataInferError, ValueError):
    pass


class EmptyArm(StrataInferError, ValueError):
    def __init__(self, stratum, arm):
        self.stratum = stratum
        self.arm = arm
        super().__init__(f"stratum {stratum!r} has no units in arm {arm}")


class InsufficientCell(StrataInferError, ValueError):
    def __init__(self, stratum, arm, needed=2):
        self.stratum = stratum
        self.arm = arm
        super().__init__(
            f"stratum {stratum!r}, arm {arm}: fewer than {needed} units"
        )


class SingularCovariance(StrataInferError, ArithmeticError):
    exit_code = 3


class NoUsableStrata(StrataInferError, ValueError):
    pass


class NoDonor(StrataInferError, ValueError):
    def __init__(self, stratum, arm, statistic):
        self.stratum = stratum
        self.arm = arm
        self.statistic = statistic
        super().__init__(
            f"no donor in cluster of stratum {stratum!r} (arm {arm}) for {statistic}"
        )


class SimulationFailure(StrataInferError, RuntimeError):
    exit_code = 4
