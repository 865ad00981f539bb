"""Visual-word knowledge distillation on a numpy substrate.

A frozen teacher CNN's feature maps are quantized against a k-means
vocabulary into per-location distributions over visual words; a student
learns to predict those distributions through a cosine-similarity head,
alongside its own classification loss. Logit distillation and feature
regression ship as baselines. Everything (conv, pooling, softmax, SGD,
k-means, the gradients) is implemented here on plain ndarrays, single
threaded and bit-reproducible from three named seeds.
"""

from .errors import (QuestError, ConfigurationError, DimensionError,
                     FormatError, NumericalError, UsageError,
                     VocabularyError)

__version__ = "0.1.0"

__all__ = [
    "QuestError", "ConfigurationError", "DimensionError", "FormatError",
    "NumericalError", "UsageError", "VocabularyError", "__version__",
]
