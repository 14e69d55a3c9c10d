"""Exception types raised across the package."""


class KiteRunnerError(Exception):
    """Base class for all package errors."""


# geo_raster
class OutOfBounds(KiteRunnerError, IndexError):
    pass


class MalformedHeader(KiteRunnerError, ValueError):
    pass


class ValueOutOfRange(KiteRunnerError, ValueError):
    pass


class TruncatedData(KiteRunnerError, ValueError):
    pass


# topo_graph
class UnknownNode(KiteRunnerError, KeyError):
    pass


class EmptyGraph(KiteRunnerError, ValueError):
    pass


class DimensionMismatch(KiteRunnerError, ValueError):
    pass


class MalformedFile(KiteRunnerError, ValueError):
    pass


class DuplicateNodeId(KiteRunnerError, ValueError):
    pass


class DanglingEdge(KiteRunnerError, ValueError):
    pass


# vlp
class NoLandmarksFound(KiteRunnerError, ValueError):
    pass


class Unreachable(KiteRunnerError, ValueError):
    pass


# diffusion_lp
class InvalidSchedule(KiteRunnerError, ValueError):
    pass


class ShapeMismatch(KiteRunnerError, ValueError):
    pass


class StepOutOfRange(KiteRunnerError, ValueError):
    pass


class EmptyDataset(KiteRunnerError, ValueError):
    pass


# global_planner
class DegenerateDataset(KiteRunnerError, ValueError):
    pass


class FeatureDimMismatch(KiteRunnerError, ValueError):
    pass


# sim_env
class SizeTooSmall(KiteRunnerError, ValueError):
    pass


class NoTraversablePointOnRoute(KiteRunnerError, RuntimeError):
    pass


# metrics_stats
class EmptyTrials(KiteRunnerError, ValueError):
    pass


class DidNotReachGoal(KiteRunnerError, ValueError):
    pass


class ZeroOptimal(KiteRunnerError, ValueError):
    pass


class TooFewPairs(KiteRunnerError, ValueError):
    pass


class AllZeroDifferences(KiteRunnerError, ValueError):
    pass
