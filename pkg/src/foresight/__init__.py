"""Desk-scale live-stream foresight pipeline.

Live content is sliced into 30-second segments, each summarized by an
embedding. A k-means codebook turns embeddings into discrete Semantic ids
(sids); per-author sid streams are kept run-length compressed; an
encoder-decoder model predicts the next distinct sid from the recent
window; and a multi-gate mixture-of-experts ranker consumes the pooled
history encoding and the foresight embedding as detached features to
score user-author interaction probabilities. Everything runs on numpy
with a hand-rolled reverse-mode tape.
"""

from .config import PipelineConfig, load_config
from .errors import (ConfigError, ForesightError, FullyMaskedError,
                     IntegrityError, NonFiniteError, StorageError)

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "ConfigError",
    "ForesightError",
    "FullyMaskedError",
    "IntegrityError",
    "NonFiniteError",
    "StorageError",
    "__version__",
]
