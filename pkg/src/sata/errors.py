"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class NumericError(ValueError):
    """Input contains NaN or otherwise non-finite values."""


class DegenerateVectorError(ValueError):
    """A vector expected to have meaningful direction has near-zero norm."""


class ContractError(ValueError):
    """A caller violated a documented precondition (e.g. non-probability rows)."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar or repeated backward)."""


class BatchTooSmallError(ValueError):
    """Batch statistics require at least two samples."""


class MissingClassError(ValueError):
    """A class index has no samples where at least one is required."""


class EmptyPositiveSetError(ValueError):
    """A contrastive label occurs only once, leaving no positives."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class GenerationError(RuntimeError):
    """Synthetic data generation failed a quality guarantee."""
