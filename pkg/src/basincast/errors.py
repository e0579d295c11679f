"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: data/schema problems exit 2,
numerical failures exit 3.
"""


class BasincastError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(BasincastError):
    """Input violates a documented precondition (bad shape of the problem,
    out-of-range coordinate, empty series, ...)."""


class ShapeError(BasincastError):
    """Array shape mismatch; the message always reports both shapes."""

    def __init__(self, op: str, *shapes):
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class DegenerateRegressionError(BasincastError):
    """Too few concurrent pairs, or zero variance in the regressor."""


class ConstantChannelError(BasincastError):
    """A channel has max == min and cannot be min-max scaled."""


class CheckpointError(BasincastError):
    """Checkpoint manifest missing, corrupt, or inconsistent with its blob."""


class UndefinedMetricError(BasincastError):
    """A metric is undefined for the given observations (constant or all-zero)."""


class DivergenceError(BasincastError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
