"""Metadata-conditioned diffusion for mixed-type tables."""
from .data import (
    DatasetBundle,
    FeatureSchema,
    MetaDataset,
    SplitSpec,
    compute_weights,
    fit_normalization,
    load_bundle,
    split,
    write_bundle,
)
from .diffusion import NoiseSchedule, build_schedule, ddim_step, forward_noise, score_interpolation
from .embedding import Embedder, EmbeddingCache, HashProvider, RemoteProvider, cache_warm, category_sentence
from .model import LaTable, ModelConfig, TableContext, build_context, context_for, sample_rows

__version__ = "0.1.0"
