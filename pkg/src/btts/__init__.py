"""Few-shot text style transfer with a contrastively pre-trained latent
style space, plus an automated evaluation harness."""

__version__ = "0.1.0"

from . import config, corpus, evaluation, inference, judge, losses, model, training

__all__ = [
    "config",
    "corpus",
    "evaluation",
    "inference",
    "judge",
    "losses",
    "model",
    "training",
    "__version__",
]
