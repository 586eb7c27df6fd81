from typing import Optional

__doc__ = """Exceptions raised by iogvqa

All errors derive from IogVqaError so that callers (and the command line)
can tell library failures from programming errors.
The command line maps validation errors to exit code 1 and the rest to 2.
"""


class IogVqaError(RuntimeError):
    """Base error of the package"""

    pass


class ValidationError(IogVqaError, ValueError):
    """Invalid input value"""

    def __init__(self, message: str, *args: object, field: Optional[str] = None) -> None:
        if field:
            message = f"{field}: {message}"
        super().__init__(message, *args)
        self.field = field


class ShapeError(ValidationError):
    """Tensor dimensions do not match"""

    pass


class EmptySliceError(ValidationError):
    """A selection (e.g. a question type) contains no instances"""

    pass


class SchemaError(ValidationError):
    """A tabular file lacks the expected columns or rows"""

    pass


class ParseError(IogVqaError):
    """Malformed file contents"""

    def __init__(
        self,
        message: str,
        *args: object,
        path: Optional[str] = None,
        line: Optional[int] = None,
        offset: Optional[int] = None,
    ) -> None:
        location = ':'.join(str(v) for v in (path, line, offset) if v is not None)
        if location:
            message = f"{location}: {message}"
        super().__init__(message, *args)
        self.path = path
        self.line = line
        self.offset = offset


class IntegrityError(IogVqaError):
    """Stored data is truncated or does not match its checksum"""

    pass


class IncompatibleCheckpointError(IntegrityError):
    """Checkpoint version or configuration does not match"""

    pass


class TrainingAborted(IogVqaError):
    """Training produced a non-finite value"""

    def __init__(self, message: str, *args: object, component: Optional[str] = None) -> None:
        if component:
            message = f"{message} (component: {component})"
        super().__init__(message, *args)
        self.component = component


def check_shape(name: str, actual, expected) -> None:
    """Raise ShapeError unless the shapes match (None in expected matches anything)"""
    actual = tuple(actual)
    expected = tuple(expected)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        raise ShapeError(f"expected shape {expected}, got {actual}", field=name)
