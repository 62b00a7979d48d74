"""fsel: few-shot example selection strategies and evaluation harness."""

from .data import (
    BudgetError,
    DatasetItem,
    DatasetManifest,
    Embedding,
    ImageTensor,
    ManifestError,
    SelectionBudget,
    SelectionResult,
    features_to_image,
    load_manifest,
    save_manifest,
    validate_budget,
    validate_selection,
)
from .encoder import (
    CacheProvider,
    EmbeddingCache,
    ExternalProvider,
    ProviderError,
    ReferenceEncoder,
    embed_item,
    external_embed,
    read_cache,
    write_cache,
)
from .evaluation import (
    EvalReport,
    LinearProbeConfig,
    STD_BENCH,
    SyntheticSpec,
    generality_diagnostic,
    generate_synthetic,
    linear_probe_train,
    nearest_centroid_classify,
    run_experiment,
)
from .perturb import NoiseConfig, gaussian_noise, variants
from .strategies import (
    ClassCentroid,
    ClassPrototypes,
    ProbabilityDistribution,
    StrategyScore,
    class_centroids,
    run_selection,
    score_entropy,
    score_margin,
    score_montecarlo,
    score_repre,
    select_random,
    select_top_k,
    zero_shot_probs,
)

__version__ = "0.1.0"
