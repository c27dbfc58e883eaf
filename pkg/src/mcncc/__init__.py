"""Multi-channel normalized cross-correlation matching engine.

Scores pairs of multi-channel feature maps with per-channel normalized
cross-correlation, searches alignments over translations and rotations,
learns channel weights and cross-domain whitening projections with a
Siamese hinge loss, and evaluates retrieval with AP/PR/CMC metrics.
"""

from .correlate import (
    AlignmentConfig,
    ChannelWeights,
    CorrelationScorer,
    MatchScore,
    mcncc,
    mcncc_weighted,
    multivariate_trace,
    ncc_single,
    per_channel_ncc,
    score_database,
    search_alignments,
)
from .errors import McnccError
from .learn import (
    PairBatch,
    SiameseModel,
    TrainConfig,
    loss_backward,
    loss_forward,
    ncc_gradient,
    train,
)
from .normalize import (
    GlobalStats,
    NormalizationScheme,
    SCHEME_PRESETS,
    StatScope,
    apply_scheme,
    fit_global_stats,
)
from .tensor import (
    DEFAULT_EPSILON,
    ChannelStats,
    FeatureMap,
    SupportRegion,
    channel_stats,
    extract_patch,
    rotate,
    standardize,
)
from .whiten import Projection, apply_projection, fit_cca, fit_pca

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "ChannelStats",
    "ChannelWeights",
    "CorrelationScorer",
    "DEFAULT_EPSILON",
    "FeatureMap",
    "GlobalStats",
    "MatchScore",
    "McnccError",
    "NormalizationScheme",
    "PairBatch",
    "Projection",
    "SCHEME_PRESETS",
    "SiameseModel",
    "StatScope",
    "SupportRegion",
    "TrainConfig",
    "apply_projection",
    "apply_scheme",
    "channel_stats",
    "extract_patch",
    "fit_cca",
    "fit_global_stats",
    "fit_pca",
    "loss_backward",
    "loss_forward",
    "mcncc",
    "mcncc_weighted",
    "multivariate_trace",
    "ncc_gradient",
    "ncc_single",
    "per_channel_ncc",
    "rotate",
    "score_database",
    "search_alignments",
    "standardize",
    "train",
]
