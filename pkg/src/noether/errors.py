"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class FormatError(ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
