"""Exception types raised across the package."""


class MergeProbeError(Exception):
    """Base class for every error raised by mergeprobe."""


# tensorstore
class MagicMismatch(MergeProbeError, ValueError):
    pass


class HeaderCorrupt(MergeProbeError, ValueError):
    pass


class ShapeSizeMismatch(MergeProbeError, ValueError):
    pass


class NonFiniteValue(MergeProbeError, ValueError):
    pass


class IoFailure(MergeProbeError, OSError):
    pass


class NameSetMismatch(MergeProbeError, ValueError):
    pass


class ShapeMismatch(MergeProbeError, ValueError):
    pass


# metrics
class ZeroVector(MergeProbeError, ValueError):
    pass


class DegenerateStack(MergeProbeError, ValueError):
    pass


class NoMatrixLayers(MergeProbeError, ValueError):
    pass


class LengthMismatch(MergeProbeError, ValueError):
    pass


class MetricError(MergeProbeError, ValueError):
    """One or more metric suites failed; ``metric_ids`` names the affected slots."""

    def __init__(self, failures):
        # failures: list of (suite name, metric ids, original exception)
        self.failures = list(failures)
        self.metric_ids = [m for _, ids, _ in self.failures for m in ids]
        parts = [f"{suite}: {exc} -> {', '.join(ids)}" for suite, ids, exc in self.failures]
        super().__init__("; ".join(parts))


# merging
class RankDeficient(MergeProbeError, ValueError):
    pass


class ZeroDenominator(MergeProbeError, ZeroDivisionError):
    pass


# linopt
class EmptyTrainingSet(MergeProbeError, ValueError):
    pass


class ConstantInput(MergeProbeError, ValueError):
    pass


class DegenerateScore(MergeProbeError, ValueError):
    pass


class ConstantScore(DegenerateScore):
    pass


class SumNearZero(MergeProbeError, ArithmeticError):
    pass


# crossval / analysis / cli
class TooFewTasks(MergeProbeError, ValueError):
    pass


class EmptyMetricSet(MergeProbeError, ValueError):
    pass


class MissingInput(MergeProbeError, FileNotFoundError):
    pass


class InvalidSpec(MergeProbeError, ValueError):
    pass
