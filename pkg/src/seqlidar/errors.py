"""Exception hierarchy shared by every subsystem."""


class SeqLidarError(Exception):
    """Base class for all package errors."""


class DimensionError(SeqLidarError, ValueError):
    """Tensor shapes are incompatible."""


class ConfigurationError(SeqLidarError, ValueError):
    """A fixed design parameter was set to an unsupported value."""


class ContractError(SeqLidarError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class EvaluationError(SeqLidarError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class RangeError(SeqLidarError, ValueError):
    """A scalar argument lies outside its admissible interval."""


class OrderingError(SeqLidarError, ValueError):
    """Time arguments are not strictly increasing."""


class ValidationError(SeqLidarError, ValueError):
    """A domain object failed validation."""


class GenerationError(SeqLidarError, RuntimeError):
    """Procedural generation could not satisfy its constraints."""


class VocabularyError(SeqLidarError, KeyError):
    """A caption token is not in the vocabulary."""


class EstimatorError(SeqLidarError, ValueError):
    """A statistical estimator received too few samples or degenerate input."""


class IngestionError(SeqLidarError, OSError):
    """An on-disk dataset does not follow the expected layout."""


class SamplerDivergenceError(SeqLidarError, FloatingPointError):
    """The reverse sampler produced a non-finite intermediate."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at sampler step {step}")


class FormatError(SeqLidarError, ValueError):
    """A file does not follow its binary or text format."""


class TrainingDivergenceError(SeqLidarError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite training loss at step {step}")
