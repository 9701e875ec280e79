"""Exception hierarchy shared by every layer of the package."""


class HTVGNNError(Exception):
    """Base class for user-facing errors (bad input, bad config, bad files)."""


class DimensionError(HTVGNNError, ValueError):
    pass


class ContractError(HTVGNNError, ValueError):
    pass


class NumericError(HTVGNNError, ArithmeticError):
    pass


class IngestionError(HTVGNNError):
    pass


class NormalizationError(HTVGNNError):
    pass


class WindowingError(HTVGNNError):
    pass


class GraphError(HTVGNNError):
    pass


class ConfigError(HTVGNNError):
    pass


class TrainingError(HTVGNNError):
    pass
