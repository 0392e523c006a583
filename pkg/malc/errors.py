"""
Exceptions raised by malc

Every exception also derives from the closest builtin so that callers can catch ``ValueError`` or
``RuntimeError`` without knowing about this module.
"""
from typing import Optional

__all__ = ['MalcError', 'DataError', 'ShapeError', 'NonSmoothLossError', 'DivergenceError', 'ModelFileError',
           'FrontierError']


class MalcError(Exception):
    pass


class DataError(MalcError, ValueError):
    """
    Malformed input data. Carries the file and line number if known
    """

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ''
        if path is not None:
            location = f'{path}'
            if line is not None:
                location = f'{location}:{line}'
            location = f'{location}: '
        super().__init__(f'{location}{message}')


class ShapeError(MalcError, ValueError):
    pass


class NonSmoothLossError(MalcError, ValueError):
    def __init__(self, message: str = None):
        super().__init__(message or 'non-smooth φ not trainable')


class DivergenceError(MalcError, RuntimeError):
    pass


class ModelFileError(MalcError, ValueError):
    pass


class FrontierError(MalcError, RuntimeError):
    pass
