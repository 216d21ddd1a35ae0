"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so new failure modes should
reuse one of the classes below rather than raising bare ValueError.
"""


class CrosstalkError(Exception):
    """Base class for all package errors."""


class ShapeError(CrosstalkError):
    """Tensor extents are inconsistent with an operation's contract."""


class ContractError(CrosstalkError):
    """A precondition on values (not shapes) was violated."""


class NumericError(CrosstalkError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(CrosstalkError):
    """A model or run configuration is invalid."""


class CtcInfeasibleError(ContractError):
    """The label sequence cannot be aligned to the given frame count."""

    def __init__(self, n_frames: int, n_labels: int, needed: int):
        self.n_frames = n_frames
        self.n_labels = n_labels
        self.needed = needed
        super().__init__(
            f"CTC infeasible: {n_frames} frames cannot carry {n_labels} labels "
            f"(minimum alignment length {needed})"
        )


class CheckpointError(CrosstalkError):
    """A parameter file is malformed or inconsistent with its peers."""


class DataError(CrosstalkError):
    """A corpus file or example is missing or malformed."""


class GenerationError(DataError):
    """Corpus simulation could not satisfy the requested constraints."""
