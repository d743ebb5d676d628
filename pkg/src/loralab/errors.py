"""Exception taxonomy shared by all loralab modules."""


class LoralabError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LoralabError):
    """Tensor shapes are incompatible for the requested operation."""


class ComputationError(LoralabError):
    """A numeric operation received or produced non-finite garbage (e.g. NaN)."""


class InputError(LoralabError):
    """Caller-supplied data is invalid (unknown token id, over-long sequence, ...)."""


class ConfigurationError(LoralabError):
    """A model/adapter/gate/config object is internally inconsistent or mismatched."""


class ContractError(LoralabError):
    """An operation was invoked outside its documented precondition."""


class TrainingError(LoralabError):
    """Optimization diverged or failed; carries the failing step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TraceLookupError(LoralabError):
    """A requested sequence or unit is absent from a weight trace."""
