"""Triage-prediction benchmark harness and demographic-bias audit toolkit."""

__version__ = "0.1.0"

from .dataset import (  # noqa: F401
    Dataset,
    Demographics,
    Protocol,
    Race,
    Sex,
    SplitSpec,
    TriageRecord,
    VitalSigns,
    generate_synthetic_dataset,
    load_dataset,
    missingness_fraction,
    temporal_stratified_split,
    write_dataset,
)
from .serialize import SerializationOptions, SerializationStyle, serialize_record  # noqa: F401
from .metrics import PredictionSet, accuracy, level_distribution, macro_f1, mse, qwk  # noqa: F401
from .stats import bonferroni, chi_square_sf, friedman, wilcoxon_signed_rank  # noqa: F401
from .retrieval import EmbeddingStore, cosine_similarity, fit_normalizer, kate_retrieve, knn  # noqa: F401
from .prompting import Demonstration, PromptBundle, StrategyConfig, StrategyKind, build_prompt  # noqa: F401
from .gateway import Gateway, MockKind, MockSpec, ModelEndpoint, mock_predict, parse_acuity  # noqa: F401
from .counterfactual import AuditMatrix, generate_variants, group_means, run_audit  # noqa: F401
