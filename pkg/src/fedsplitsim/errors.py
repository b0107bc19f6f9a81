"""Exception types shared across the simulator."""


class SimulatorError(Exception):
    """Base class for all simulator-specific failures."""


class ConfigError(SimulatorError):
    """Invalid configuration or parameters outside their documented range."""


class DimensionError(SimulatorError):
    """Tensor shapes do not line up."""


class ProtocolError(SimulatorError):
    """An operation was invoked out of order or with mismatched state."""


class PrivacyError(ProtocolError):
    """A label payload was about to leave the client in a label-private layout."""


class NumericError(SimulatorError):
    """A computation produced NaN or Inf."""


class MetricUndefinedError(SimulatorError):
    """A metric has no defined value for the given inputs (e.g. single-class AUROC)."""
