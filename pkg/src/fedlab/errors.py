"""Exception types shared across fedlab."""


class FedlabError(Exception):
    """Base class for all fedlab errors."""


class DimensionError(FedlabError, ValueError):
    pass


class ParameterError(FedlabError, ValueError):
    pass


class LabelError(FedlabError, ValueError):
    pass


class DegenerateVectorError(FedlabError, ValueError):
    pass


class LayoutError(FedlabError, ValueError):
    pass


class InvariantError(FedlabError, RuntimeError):
    """An internal contract was broken (e.g. a batch label has no anchor)."""


class ConfigError(FedlabError, ValueError):
    pass


class CapacityError(FedlabError, ValueError):
    """A partitioner asked for more samples of a class than the source holds."""


class FormatError(FedlabError, ValueError):
    """Malformed IDX or checkpoint file."""
