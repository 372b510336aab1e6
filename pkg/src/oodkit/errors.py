"""Exception taxonomy shared by all oodkit modules.

Each class carries the process exit code the CLI maps it to: 2 for
configuration problems, 3 for data/format problems, 4 for numerical or
fitting failures.
"""


class OodkitError(Exception):
    """Base class for all oodkit errors."""

    exit_code = 1


class ConfigError(OodkitError):
    """Invalid or inconsistent pipeline configuration."""

    exit_code = 2


class FormatError(OodkitError):
    """On-disk container violates the expected layout or shapes."""

    exit_code = 3


class DataError(OodkitError):
    """Array contents violate an invariant (non-finite values, bad labels)."""

    exit_code = 3


class LinkageError(DataError):
    """A cross-dataset origin reference does not resolve."""


class CapabilityError(OodkitError):
    """A score was requested that the dataset cannot support."""

    exit_code = 3


class EvaluationError(OodkitError):
    """An evaluation task has no qualifying samples on one side."""

    exit_code = 3


class SelectionError(OodkitError):
    """Member selection could not admit enough scores."""

    exit_code = 3


class FitError(OodkitError):
    """Statistics or mixture fitting failed."""

    exit_code = 4


class NumericalError(FitError):
    """A linear-algebra step failed despite regularization."""
