"""Exception hierarchy.

Every error raised on bad input derives from :class:`MPQError`. Errors that
mean "the request is well formed but cannot be satisfied" (infeasible
instances, size guards) derive from :class:`GuardError` so the CLI can map
them to a distinct exit code.
"""


class MPQError(Exception):
    pass


class GuardError(MPQError):
    pass


# graph construction / partitioning
class GraphError(MPQError):
    pass


class CycleDetected(GraphError):
    pass


class MultipleSinks(GraphError):
    pass


class DanglingEdge(GraphError):
    pass


class EmptyGraph(GraphError):
    pass


class NonConvergingFrontier(GraphError):
    pass


class GroupTooLarge(GuardError):
    pass


class IndexOutOfRange(MPQError, IndexError):
    pass


# numerics
class ShapeMismatch(MPQError, ValueError):
    pass


class NumericOverflow(MPQError, ArithmeticError):
    pass


class LengthMismatch(MPQError, ValueError):
    pass


class MissingSensitivity(MPQError, KeyError):
    pass


class OpaqueLayer(MPQError, ValueError):
    pass


class MissingEntry(MPQError, KeyError):
    def __init__(self, group: int, config: int):
        super().__init__(f"timing table has no entry for group {group}, config {config}")
        self.group = group
        self.config = config


# solver
class Infeasible(GuardError):
    pass


class TooLarge(GuardError):
    pass


class MultiFormatUnsupported(MPQError):
    pass


class SchemaError(MPQError):
    pass
