"""Selection strategies: Random, Entropy, Margin, Montecarlo, Repre.

Entropy and Margin rank pool items by prediction uncertainty under
zero-shot probabilities (softmax over scaled cosine similarities to
class prototypes).  Montecarlo ranks anchors by the mean embedding
distance to their Gaussian-noised variants: the farther the variants
drift, the less familiar the anchor, the higher the score.  Repre ranks
items by closeness to their class centroid computed on the validation
split.  All distances default to cosine distance, which is invariant to
embedding scale.

Every strategy emits a SelectionResult: per class, the K best items in
preference order, ties broken by ascending item id.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import (
    BudgetError,
    DatasetItem,
    DatasetManifest,
    Embedding,
    SelectionBudget,
    SelectionResult,
)
from .encoder import EmbeddingCache, EmbeddingProvider, embed_item, item_image, read_cache
from .perturb import NoiseConfig, gaussian_noise
from .seeding import derive_rng

HIGHER_IS_BETTER = "higher-is-better"
LOWER_IS_BETTER = "lower-is-better"

STRATEGY_NAMES = ("random", "entropy", "margin", "montecarlo", "repre")

PROTOTYPE_STRATEGIES = ("entropy", "margin")

DEFAULT_TEMPERATURE = 100.0

METRICS = ("cosine", "euclidean")

_ZERO_NORM = 1e-12


def _vec(embedding: Embedding | np.ndarray) -> np.ndarray:
    if isinstance(embedding, Embedding):
        return embedding.values
    return np.asarray(embedding, dtype=np.float64)


def cosine_similarity(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    va, vb = _vec(a), _vec(b)
    if va.shape != vb.shape:
        raise ValueError(f"dim mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ValueError("cosine undefined for zero-norm vector")
    return float(np.dot(va, vb) / (na * nb))


def cosine_distance(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    return 1.0 - cosine_similarity(a, b)


def embedding_distance(
    a: Embedding | np.ndarray, b: Embedding | np.ndarray, metric: str = "cosine"
) -> float:
    if metric == "cosine":
        return cosine_distance(a, b)
    if metric == "euclidean":
        return float(np.linalg.norm(_vec(a) - _vec(b)))
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True, eq=False)
class ProbabilityDistribution:
    """Class probabilities: non-negative, summing to 1 within 1e-6."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probabilities must form a non-empty 1-D vector")
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0:
            raise ValueError("probabilities must be finite and non-negative")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {total!r}, expected 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class ClassPrototypes:
    """One normalized anchor embedding per class.

    ``source`` records where the anchors came from: a text-embeddings
    file exported from a real backend, or validation-set centroids
    standing in for synthetic runs.
    """

    vectors: np.ndarray
    source: str

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError("prototypes must form a (num_classes, dim) matrix")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("prototypes contain non-finite values")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("prototype rows must be unit-norm")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def num_classes(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @classmethod
    def from_rows(cls, rows: Sequence[np.ndarray], source: str) -> "ClassPrototypes":
        stacked = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
        norms = np.linalg.norm(stacked, axis=1, keepdims=True)
        if np.any(norms < _ZERO_NORM):
            raise ValueError("prototype with zero norm")
        return cls(stacked / norms, source)

    @classmethod
    def from_cache_file(cls, path) -> "ClassPrototypes":
        """Load prototypes from an embedding-cache file whose ids are the
        class ids as decimal strings ("0", "1", ...)."""
        cache = read_cache(path)
        try:
            by_class = {int(item_id): vec for item_id, vec in cache.vectors.items()}
        except ValueError as exc:
            raise ValueError(
                f"prototype file {path}: ids must be decimal class ids ({exc})"
            ) from exc
        num_classes = len(by_class)
        if sorted(by_class) != list(range(num_classes)):
            raise ValueError(
                f"prototype file {path}: ids must cover 0..{num_classes - 1}, "
                f"got {sorted(by_class)}"
            )
        return cls.from_rows(
            [by_class[c] for c in range(num_classes)], source="text-embeddings-file"
        )


@dataclass(frozen=True)
class ClassCentroid:
    """Normalized mean embedding of one class."""

    class_id: int
    centroid: Embedding


@dataclass(frozen=True)
class StrategyScore:
    """A strategy's score for one item, with its preference direction."""

    item_id: str
    score: float
    direction: str

    def __post_init__(self):
        if self.direction not in (HIGHER_IS_BETTER, LOWER_IS_BETTER):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.isfinite(self.score):
            raise ValueError(f"score for {self.item_id!r} is not finite")


def zero_shot_probs(
    item_embedding: Embedding | np.ndarray,
    prototypes: ClassPrototypes,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ProbabilityDistribution:
    """softmax(temperature * cos(e, prototype_c)) over classes c."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature!r}")
    e = _vec(item_embedding)
    if e.size != prototypes.dim:
        raise ValueError(
            f"dim mismatch: embedding has {e.size}, prototypes have {prototypes.dim}"
        )
    sims = np.array(
        [cosine_similarity(e, prototypes.vectors[c]) for c in range(prototypes.num_classes)]
    )
    logits = temperature * sims
    logits -= logits.max()
    weights = np.exp(logits)
    return ProbabilityDistribution(weights / weights.sum())


def score_entropy(probs: ProbabilityDistribution, item_id: str = "") -> StrategyScore:
    """Shannon entropy of the prediction distribution, in nats.

    High entropy means the model is most uncertain, so higher is better.
    The 0 * ln 0 terms contribute exactly zero.
    """
    p = probs.probs
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return StrategyScore(item_id, -float(terms.sum()), HIGHER_IS_BETTER)


def score_margin(probs: ProbabilityDistribution, item_id: str = "") -> StrategyScore:
    """Difference between the two largest class probabilities.

    A small margin means the top predictions are nearly tied, so lower
    is better.
    """
    if probs.num_classes < 2:
        raise ValueError("margin requires at least 2 classes")
    top_two = np.sort(probs.probs)[-2:]
    return StrategyScore(item_id, float(top_two[1] - top_two[0]), LOWER_IS_BETTER)


def score_montecarlo(
    anchor: DatasetItem,
    provider: EmbeddingProvider,
    noise: NoiseConfig,
    metric: str = "cosine",
) -> StrategyScore:
    """Mean embedding distance between an anchor and its noised variants.

    Anchors whose variants drift far are unfamiliar to the encoder and
    therefore most valuable, so higher is better.  Deterministic given
    (anchor, provider config, noise config).
    """
    image = item_image(anchor)
    anchor_embedding = provider.encode_image(image)
    distances = np.empty(noise.variants, dtype=np.float64)
    for t in range(noise.variants):
        noisy = gaussian_noise(image, noise, t, anchor_id=anchor.id)
        distances[t] = embedding_distance(
            anchor_embedding, provider.encode_image(noisy), metric
        )
    return StrategyScore(anchor.id, float(distances.mean()), HIGHER_IS_BETTER)


def class_centroids(
    embeddings_by_class: Mapping[int, Sequence[Embedding | np.ndarray]],
    num_classes: int | None = None,
) -> list[ClassCentroid]:
    """Arithmetic mean per class, then L2-normalized.

    Raises if any expected class is empty or if a class mean collapses
    to the zero vector.
    """
    classes = range(num_classes) if num_classes is not None else sorted(embeddings_by_class)
    centroids = []
    for class_id in classes:
        members = embeddings_by_class.get(class_id, [])
        if not members:
            raise ValueError(f"class {class_id} has no validation items")
        mean = np.mean(np.stack([_vec(e) for e in members]), axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < _ZERO_NORM:
            raise ValueError(f"degenerate centroid for class {class_id}: zero mean")
        centroids.append(
            ClassCentroid(class_id, Embedding(mean / norm, normalized=True))
        )
    return centroids


def score_repre(
    item_embedding: Embedding | np.ndarray,
    centroid: ClassCentroid,
    item_label: int,
    item_id: str = "",
    metric: str = "cosine",
) -> StrategyScore:
    """Distance from an item to its own class centroid; lower is better."""
    if item_label != centroid.class_id:
        raise ValueError(
            f"item label {item_label} does not match centroid class {centroid.class_id}"
        )
    distance = embedding_distance(item_embedding, centroid.centroid, metric)
    return StrategyScore(item_id, distance, LOWER_IS_BETTER)


def select_top_k(
    scores_by_class: Mapping[int, Sequence[StrategyScore]],
    budget: SelectionBudget,
    strategy: str,
    seed: int = 0,
    config: Mapping | None = None,
) -> SelectionResult:
    """Per class: sort by the scores' preference direction, break ties by
    ascending item id, take the first K."""
    directions = {s.direction for scores in scores_by_class.values() for s in scores}
    if len(directions) != 1:
        raise ValueError(f"scores mix preference directions: {sorted(directions)}")
    direction = directions.pop()
    classes: dict[int, list[tuple[str, float]]] = {}
    for class_id in range(budget.num_classes):
        scores = list(scores_by_class.get(class_id, []))
        if len(scores) < budget.shots_per_class:
            raise BudgetError(
                f"class {class_id} has {len(scores)} scored items, "
                f"budget needs {budget.shots_per_class}",
                class_id=class_id,
                count=len(scores),
            )
        if direction == HIGHER_IS_BETTER:
            ordered = sorted(scores, key=lambda s: (-s.score, s.item_id))
        else:
            ordered = sorted(scores, key=lambda s: (s.score, s.item_id))
        classes[class_id] = [
            (s.item_id, s.score) for s in ordered[: budget.shots_per_class]
        ]
    full_config = dict(config or {})
    full_config.setdefault("direction", direction)
    return SelectionResult(strategy=strategy, seed=seed, config=full_config, classes=classes)


def select_random(
    ids_by_class: Mapping[int, Sequence[str]],
    budget: SelectionBudget,
    seed: int,
    config: Mapping | None = None,
) -> SelectionResult:
    """Uniform sample of K ids per class, without replacement.

    Each class draws from its own stream seeded by (seed, class id), so
    results are reproducible and independent across classes.  Chosen ids
    are listed in ascending order with score 0 (no preference), which
    also makes a full-budget selection identical for every seed.
    """
    classes: dict[int, list[tuple[str, float]]] = {}
    for class_id in range(budget.num_classes):
        ids = list(ids_by_class.get(class_id, []))
        if len(ids) < budget.shots_per_class:
            raise BudgetError(
                f"class {class_id} has {len(ids)} pool items, "
                f"budget needs {budget.shots_per_class}",
                class_id=class_id,
                count=len(ids),
            )
        rng = derive_rng(seed, class_id)
        chosen = rng.choice(len(ids), size=budget.shots_per_class, replace=False)
        classes[class_id] = [(ids[i], 0.0) for i in sorted(chosen, key=lambda i: ids[i])]
    full_config = dict(config or {})
    full_config.setdefault("direction", LOWER_IS_BETTER)
    return SelectionResult(strategy="random", seed=seed, config=full_config, classes=classes)


def validation_centroids(
    manifest: DatasetManifest,
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
) -> list[ClassCentroid]:
    """Class centroids over the validation split's embeddings."""
    grouped: dict[int, list[Embedding]] = {}
    for item in manifest.split_items("validation"):
        grouped.setdefault(item.label, []).append(embed_item(provider, item, cache))
    return class_centroids(grouped, num_classes=manifest.num_classes)


def prototypes_from_validation(
    manifest: DatasetManifest,
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
) -> ClassPrototypes:
    """Validation-centroid stand-in for a text-prototype file."""
    centroids = validation_centroids(manifest, provider, cache)
    return ClassPrototypes.from_rows(
        [c.centroid.values for c in centroids], source="validation-centroids"
    )


def score_pool(
    strategy: str,
    manifest: DatasetManifest,
    provider: EmbeddingProvider,
    *,
    cache: EmbeddingCache | None = None,
    prototypes: ClassPrototypes | None = None,
    noise: NoiseConfig | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    metric: str = "cosine",
    jobs: int = 1,
) -> dict[int, list[StrategyScore]]:
    """Score every pool item under one deterministic strategy, grouped by
    class.  Scoring is pure per item, so the result is independent of
    the worker count."""
    if strategy not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "random":
        raise ValueError("random is not a scoring strategy")
    pool = manifest.split_items("pool")
    grouped: dict[int, list[StrategyScore]] = {c: [] for c in range(manifest.num_classes)}

    if strategy in PROTOTYPE_STRATEGIES:
        if prototypes is None:
            raise ValueError(f"prototypes required for strategy {strategy!r}")
        scorer = score_entropy if strategy == "entropy" else score_margin
        for item in pool:
            embedding = embed_item(provider, item, cache)
            probs = zero_shot_probs(embedding, prototypes, temperature)
            grouped[item.label].append(scorer(probs, item.id))
        return grouped

    if strategy == "repre":
        centroids = {
            c.class_id: c for c in validation_centroids(manifest, provider, cache)
        }
        for item in pool:
            embedding = embed_item(provider, item, cache)
            grouped[item.label].append(
                score_repre(embedding, centroids[item.label], item.label, item.id, metric)
            )
        return grouped

    noise = noise or NoiseConfig()

    def montecarlo(item: DatasetItem) -> StrategyScore:
        return score_montecarlo(item, provider, noise, metric)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            scores = list(pool_exec.map(montecarlo, pool))
    else:
        scores = [montecarlo(item) for item in pool]
    for item, score in zip(pool, scores):
        grouped[item.label].append(score)
    return grouped


def run_selection(
    strategy: str,
    manifest: DatasetManifest,
    budget: SelectionBudget,
    provider: EmbeddingProvider,
    seed: int = 0,
    *,
    cache: EmbeddingCache | None = None,
    prototypes: ClassPrototypes | None = None,
    noise: NoiseConfig | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    metric: str = "cosine",
    jobs: int = 1,
) -> SelectionResult:
    """Select K shots per class with one strategy and a full config echo."""
    config: dict = {
        "strategy": strategy,
        "shots_per_class": budget.shots_per_class,
        "num_classes": budget.num_classes,
        "provider": provider.name,
        "dim": provider.dim,
        "metric": metric,
    }
    if strategy == "random":
        ids_by_class = {
            c: [item.id for item in items]
            for c, items in manifest.items_by_class("pool").items()
        }
        return select_random(ids_by_class, budget, seed, config)
    if strategy in PROTOTYPE_STRATEGIES:
        config["temperature"] = temperature
        if prototypes is not None:
            config["prototype_source"] = prototypes.source
    if strategy == "montecarlo":
        noise = noise or NoiseConfig()
        config["noise"] = {
            "mu": noise.mu,
            "sigma": noise.sigma,
            "variants": noise.variants,
            "base_seed": noise.base_seed,
        }
    scores = score_pool(
        strategy,
        manifest,
        provider,
        cache=cache,
        prototypes=prototypes,
        noise=noise,
        temperature=temperature,
        metric=metric,
        jobs=jobs,
    )
    return select_top_k(scores, budget, strategy, seed=seed, config=config)
