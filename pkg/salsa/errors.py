# coding: utf-8
"""Exception hierarchy raised by the SALSA pipeline.

Each exception formats a message template from its fields, in the same
manner as :mod:`fs.errors`.
"""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "SalsaError",
    "ShapeError",
    "NonFiniteError",
    "ConvergenceError",
    "DegenerateInputError",
    "DomainError",
    "DuplicateEntry",
    "UnknownEntry",
    "ScanFormatError",
    "PoseFormatError",
    "CheckpointError",
    "ConfigError",
]


class SalsaError(Exception):
    """Base class for all SALSA errors."""

    default_message = "unspecified error"

    def __init__(self, msg=None):
        """Create the error with an optional message override."""
        # type: (str) -> None

        self._msg = msg or self.default_message
        super(SalsaError, self).__init__()

    def __str__(self):
        """Return the formatted error message."""
        # type: () -> str

        return self._msg.format(**self.__dict__)

    def __repr__(self):
        """Return a debug representation of the error."""
        # type: () -> str

        return "{}({!r})".format(self.__class__.__name__, str(self))


class ShapeError(SalsaError, ValueError):
    """Operands have incompatible shapes."""

    default_message = "shape mismatch: {detail}"

    def __init__(self, detail, msg=None):
        """Create the error describing the offending shapes."""
        # type: (str, str) -> None

        self.detail = detail
        super(ShapeError, self).__init__(msg=msg)


class NonFiniteError(SalsaError, ValueError):
    """An operand holds NaN or infinite values."""

    default_message = "non-finite values in {what}"

    def __init__(self, what, msg=None):
        """Create the error naming the offending operand."""
        # type: (str, str) -> None

        self.what = what
        super(NonFiniteError, self).__init__(msg=msg)


class ConvergenceError(SalsaError):
    """An iterative solver ran out of iterations.

    The last iterate is kept in `vector` and `value` so that callers may
    still use it.
    """

    default_message = "no convergence after {iterations} iterations"

    def __init__(self, iterations, vector=None, value=None, msg=None):
        """Create the error carrying the last iterate."""
        # type: (int, object, float, str) -> None

        self.iterations = iterations
        self.vector = vector
        self.value = value
        super(ConvergenceError, self).__init__(msg=msg)


class DegenerateInputError(SalsaError, ValueError):
    """Input geometry does not determine a unique solution."""

    default_message = "degenerate input: {detail}"

    def __init__(self, detail, msg=None):
        """Create the error describing the degeneracy."""
        # type: (str, str) -> None

        self.detail = detail
        super(DegenerateInputError, self).__init__(msg=msg)


class DomainError(SalsaError, ValueError):
    """An argument lies outside the domain of an operation."""

    default_message = "{what}: {detail}"

    def __init__(self, what, detail, msg=None):
        """Create the error naming the operation and the offending value."""
        # type: (str, str, str) -> None

        self.what = what
        self.detail = detail
        super(DomainError, self).__init__(msg=msg)


class DuplicateEntry(SalsaError, KeyError):
    """An id is already present in a database."""

    default_message = "entry '{entry_id}' already exists"

    def __init__(self, entry_id, msg=None):
        """Create the error naming the duplicate id."""
        # type: (str, str) -> None

        self.entry_id = entry_id
        super(DuplicateEntry, self).__init__(msg=msg)


class UnknownEntry(SalsaError, KeyError):
    """An id is not present in a database or dataset."""

    default_message = "entry '{entry_id}' not found"

    def __init__(self, entry_id, msg=None):
        """Create the error naming the missing id."""
        # type: (str, str) -> None

        self.entry_id = entry_id
        super(UnknownEntry, self).__init__(msg=msg)


class ScanFormatError(SalsaError):
    """A scan file is not a valid float32 (x, y, z, intensity) record list."""

    default_message = "malformed scan '{path}' at byte {offset}: {detail}"

    def __init__(self, path, offset, detail, msg=None):
        """Create the error with the byte offset of the problem."""
        # type: (str, int, str, str) -> None

        self.path = path
        self.offset = offset
        self.detail = detail
        super(ScanFormatError, self).__init__(msg=msg)


class PoseFormatError(SalsaError):
    """A pose file line is not a valid 3x4 rigid transform."""

    default_message = "malformed pose file '{path}' at line {line}: {detail}"

    def __init__(self, path, line, detail, msg=None):
        """Create the error with the 1-based line number of the problem."""
        # type: (str, int, str, str) -> None

        self.path = path
        self.line = line
        self.detail = detail
        super(PoseFormatError, self).__init__(msg=msg)


class CheckpointError(SalsaError):
    """A binary model or database container is malformed."""

    default_message = "invalid container '{path}': {detail}"

    def __init__(self, path, detail, msg=None):
        """Create the error naming the container."""
        # type: (str, str, str) -> None

        self.path = path
        self.detail = detail
        super(CheckpointError, self).__init__(msg=msg)


class ConfigError(SalsaError, ValueError):
    """A configuration value is invalid."""

    default_message = "invalid configuration: {detail}"

    def __init__(self, detail, msg=None):
        """Create the error describing the invalid setting."""
        # type: (str, str) -> None

        self.detail = detail
        super(ConfigError, self).__init__(msg=msg)
