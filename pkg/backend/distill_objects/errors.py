"""
Exception types raised by the distillation pipeline.

Every error derives from `GDistillError` so the command line can map domain failures to a
single exit code, and also from the builtin exception that best describes the condition so
callers can keep catching `ValueError`, `KeyError` and friends.
"""


class GDistillError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GDistillError, ValueError):
    """A configuration document or value breaks its invariants."""


class DatasetWriteError(GDistillError, OSError):
    """Writing a generated sample to disk failed."""

    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"failed to write sample {sample_id!r}: {reason}")
        self.sample_id = sample_id


class UnknownSampleError(GDistillError, KeyError):
    """A sample id is not part of the manifest."""

    def __init__(self, sample_id: str):
        super().__init__(sample_id)
        self.sample_id = sample_id

    def __str__(self) -> str:
        return f"unknown sample id {self.sample_id!r}"


class AnnotationError(GDistillError, ValueError):
    """An annotation file is missing, unreadable or inconsistent."""

    def __init__(self, sample_id: str, reason: str):
        super().__init__(f"corrupt annotation for sample {sample_id!r}: {reason}")
        self.sample_id = sample_id


class AnnotationAccessError(GDistillError, PermissionError):
    """Labels of an unlabeled sample were requested."""

    def __init__(self, sample_id: str):
        super().__init__(f"sample {sample_id!r} is unlabeled; its annotations are not readable")
        self.sample_id = sample_id


class ShapeContractError(GDistillError, ValueError):
    """A tensor does not satisfy the model's resolution or channel contract."""


class FingerprintMismatchError(GDistillError, ValueError):
    """Two parameter sets come from different architectures."""


class CapacityError(GDistillError, ValueError):
    """More targets than prediction queries."""


class NonFiniteLossError(GDistillError, ArithmeticError):
    """A loss term is NaN or infinite."""


class DivergenceError(GDistillError, RuntimeError):
    """Training produced non-finite losses for too many consecutive steps."""

    def __init__(self, iteration: int, consecutive: int):
        super().__init__(
            f"training diverged at iteration {iteration} "
            f"({consecutive} consecutive non-finite losses)"
        )
        self.iteration = iteration
        self.consecutive = consecutive


class CheckpointError(GDistillError, RuntimeError):
    """A checkpoint cannot be read or has the wrong format."""
