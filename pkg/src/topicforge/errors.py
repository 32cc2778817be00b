"""Exception hierarchy shared by all topicforge modules."""


class TopicForgeError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TopicForgeError, ValueError):
    """Bad input or configuration detected before any work starts."""


class EmptyInput(ValidationError):
    pass


class RecordError(ValidationError):
    """A malformed basket record; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyCorpus(ValidationError):
    pass


class SplitError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class OovError(ValidationError):
    pass


class ModelError(ValidationError):
    pass


class Intractable(ValidationError):
    pass


class StateCorruption(TopicForgeError, RuntimeError):
    """Sampler count matrices no longer agree with the assignments."""


class DegenerateVector(ValidationError):
    pass


class DegenerateTopic(ValidationError):
    pass


class UnseenProduct(ValidationError):
    pass


class Undefined(TopicForgeError):
    """A metric that has no value for the given input (e.g. K=1 distinctiveness)."""


class DegenerateTrace(TopicForgeError):
    pass


class EmptyModel(TopicForgeError):
    pass
