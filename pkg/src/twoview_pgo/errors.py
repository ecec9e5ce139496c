class TwoViewPGOError(Exception):
    """Base class for all package errors."""


class ParameterError(TwoViewPGOError, ValueError):
    pass


class GraphStructureError(TwoViewPGOError):
    pass


class GaugeError(GraphStructureError):
    """The graph has no prior, so its absolute frame is unconstrained."""


class DegenerateGeometryError(TwoViewPGOError):
    pass


class NumericalError(TwoViewPGOError):
    def __init__(self, message, edge_id=None):
        super().__init__(message)
        self.edge_id = edge_id


class InsufficientDataError(TwoViewPGOError):
    pass


class NoConsensusError(TwoViewPGOError):
    pass


class AmbiguousDecompositionError(TwoViewPGOError):
    pass


class DegenerateParallaxError(DegenerateGeometryError):
    pass


class EvaluationError(TwoViewPGOError):
    pass


class InputError(TwoViewPGOError):
    pass


class ConfigError(InputError):
    pass


class FormatError(InputError):
    pass
