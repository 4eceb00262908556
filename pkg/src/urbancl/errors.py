"""Exception types shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`DataError`
(and its subclasses) to exit code 3.
"""


class GeometryError(ValueError):
    """Invalid point or boundary."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InvalidStateError(RuntimeError):
    """Operation not allowed in the object's current state."""


class NotFoundError(KeyError):
    """Requested id does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(ValueError):
    """Experiment or CLI configuration is invalid."""


class DataError(ValueError):
    """Input data is missing or inconsistent."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class IngestError(DataError):
    """A source record references something that does not exist."""


class LoadError(DataError):
    """Checkpoint or embedding file cannot be applied."""
