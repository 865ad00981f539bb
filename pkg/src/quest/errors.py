"""Exception taxonomy shared by every module.

CLI exit codes: configuration-class errors exit 1, numerical failures exit 2.
"""


class QuestError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(QuestError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigurationError(QuestError):
    """Invalid configuration: bad spec, unknown keys, missing files, bad extents."""


class VocabularyError(QuestError):
    """Vocabulary learning preconditions violated (too few points, duplicates)."""


class FormatError(QuestError):
    """Malformed on-disk artifact (checkpoint, vocabulary, CIFAR records)."""


class NumericalError(QuestError):
    """Non-finite values encountered, or a gradient check failed."""


class UsageError(QuestError):
    """API misuse, e.g. stepping a frozen model."""
