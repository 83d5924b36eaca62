"""Targeted training: bias SGD mini-batches toward training rows that
resemble known, unlabeled target inputs."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CsvSchema,
    Dataset,
    StandardizationStats,
    TargetSet,
    Task,
    apply_standardization,
    fit_standardization,
    generate_synthetic_clustered,
    load_csv,
    load_idx_images,
    split_for_targeting,
)
from .sampling import (  # noqa: F401
    AliasTable,
    SamplingPlan,
    build_alias_table,
    build_plan,
    draw_batch,
    resample_dataset,
)
from .similarity import SimilarityMeasure, SimilarityScores, cosine, score_dataset, similarity_to_targets  # noqa: F401
