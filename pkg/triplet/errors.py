"""
Exception hierarchy for TriPLET.

Everything raised on purpose by the package derives from TripletError so the
CLI can turn it into a single machine-readable error line.
"""


class TripletError(Exception):
    """Base class for all expected failures."""


class ShapeError(TripletError, ValueError):
    """An operation received tensors whose shapes do not fit its contract."""

    def __init__(self, op: str, message: str, *shapes) -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class GeometryError(TripletError, ValueError):
    """Projection geometry is invalid or does not match the data."""


class ConfigError(TripletError, ValueError):
    """Run configuration failed validation."""


class DatasetError(TripletError):
    """Dataset directory is missing, incomplete or inconsistent."""


class TensorFormatError(TripletError):
    """A TNSR file or checkpoint manifest could not be decoded."""


class TrainingDivergedError(TripletError):
    """A loss became non-finite during training."""


class MetricError(TripletError, ValueError):
    """A metric is undefined for the given inputs."""
