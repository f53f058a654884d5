"""Exception types shared across the toolkit."""


class SegAdaptError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(SegAdaptError, ValueError):
    """An argument or configuration value is out of its documented range."""


class DatasetError(SegAdaptError):
    """A dataset directory is malformed (missing files, unpaired basenames)."""


class ValidationError(SegAdaptError):
    """Loaded data violates a declared invariant (e.g. label id out of range)."""


class CheckpointError(SegAdaptError):
    """A checkpoint file is unreadable or inconsistent with its manifest."""


class NumericError(SegAdaptError):
    """A numeric precondition failed (non-finite input, degenerate probability)."""


class NonFiniteLossError(NumericError):
    """A loss component became NaN/Inf during optimisation."""

    def __init__(self, component: str, iteration: int | None = None):
        self.component = component
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")
