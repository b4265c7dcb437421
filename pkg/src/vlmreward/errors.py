"""Exception hierarchy shared across the package."""


class VLMRewardError(Exception):
    """Base class for all package errors."""


class InvalidInput(VLMRewardError, ValueError):
    pass


class InvalidTemplate(InvalidInput):
    pass


class InvalidState(VLMRewardError, RuntimeError):
    pass


class TransportError(VLMRewardError):
    """The embedding service could not be reached after all retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ServiceError(VLMRewardError):
    """The embedding service answered with a non-2xx status."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"embedding service returned HTTP {status}: {body[:200]}")
        self.status = status


class ProtocolError(VLMRewardError):
    """The embedding service response violates the wire contract."""


class TrainingError(VLMRewardError, RuntimeError):
    pass


class UndefinedCorrelation(VLMRewardError, ValueError):
    pass


class ConfigError(VLMRewardError, ValueError):
    """Invalid run configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.message = message
        self.line = line
        self.path = path
        super().__init__(str(self))

    def __str__(self) -> str:
        where = self.path or "<config>"
        if self.line is not None:
            where = f"{where}:{self.line}"
        return f"{where}: {self.message}"


class DatasetError(VLMRewardError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
