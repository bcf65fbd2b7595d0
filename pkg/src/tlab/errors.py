"""Exception hierarchy shared by all tlab modules."""


class TlabError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TlabError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigurationError(TlabError):
    """A config value is out of range or internally inconsistent."""


class DataError(TlabError):
    """Input data violates a structural precondition (labels, splits, counts)."""


class ParseError(DataError):
    """A CSV cell could not be parsed; carries row/column context."""


class CapacityError(DataError):
    """More features than a patch can hold."""


class FormatError(TlabError):
    """A binary file failed magic/version/shape/CRC validation."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(TlabError):
    """A caller violated an API precondition (e.g. boosting a non-adversarial sample)."""


class RegistryError(TlabError):
    """A required checkpoint or dataset is missing from the model registry."""
