"""Exception types raised across the package.

The CLI maps ValidationError to exit code 2 and NumericalError / RuntimeError to exit code 3.
"""


class ValidationError(ValueError):
    """Invalid user input: a game file field, an ordering, a config field, an environment name."""


class ParseError(ValidationError):
    """A file that could not be parsed at all."""


class NumericalError(ArithmeticError):
    """A non-finite value or a failed numerical precondition."""


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an environment whose episode is over."""
