"""Exception hierarchy shared by all modules."""


class DistOFOError(Exception):
    """Base class for every error raised by this package."""


# graph construction
class GraphError(DistOFOError):
    pass


class DisconnectedGraph(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class IndexOutOfRange(GraphError):
    pass


# plant
class PlantError(DistOFOError):
    pass


class NotATree(PlantError):
    pass


class UnstableDiscretization(PlantError):
    pass


class SingularSystemMatrix(PlantError):
    pass


class NotSettled(PlantError):
    pass


# objective
class UnboundedRegion(DistOFOError):
    pass


# bounds
class BoundError(DistOFOError):
    pass


class StepSizeConditionViolated(BoundError):
    pass


class RequiresStrongConvexityAboveOne(BoundError):
    pass


class UnboundedConstraintSet(BoundError):
    pass


class EpsilonTooLarge(BoundError):
    pass


class FixedPointDiverged(BoundError):
    pass


# harness
class ConfigError(DistOFOError):
    pass


class SolverStalled(DistOFOError):
    pass


class EmptyInput(DistOFOError):
    pass
