"""Exception types shared across the toolkit.

The split mirrors the CLI exit-code contract: usage/schema problems
(RecipeError) exit 1, data problems (FormatError, ValidationError) exit 2.
"""


class TaskmergeError(Exception):
    """Base class for all toolkit errors."""


class FormatError(TaskmergeError):
    """Malformed or unreadable checkpoint container."""


class ValidationError(TaskmergeError):
    """Inputs are well-formed but violate a contract (shape mismatch,
    degenerate task vector, non-finite values, ...)."""


class RecipeError(TaskmergeError):
    """Invalid merge recipe or coefficient specification."""
