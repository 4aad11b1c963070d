class MGFNError(Exception):
    """Base class for errors raised by this package."""


class LogParseError(MGFNError, ValueError):
    def __init__(self, line_no, field, message):
        self.line_no = line_no
        self.field = field
        super().__init__(f"line {line_no}: field '{field}': {message}")


class UnknownScenarioError(MGFNError, KeyError):
    def __str__(self):
        return f"unknown scenario: {self.args[0]!r}"


class GraphFormatError(MGFNError, ValueError):
    pass


class CheckpointFormatError(MGFNError, ValueError):
    pass


class RejectionExhaustedError(MGFNError, RuntimeError):
    def __init__(self, head, attempts):
        self.head = head
        self.attempts = attempts
        super().__init__(
            f"no valid negative for head node {head} after {attempts} attempts; graph too dense"
        )


class NonFiniteGradientError(MGFNError, FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in tensor '{name}'")


class ConfigError(MGFNError, ValueError):
    pass
