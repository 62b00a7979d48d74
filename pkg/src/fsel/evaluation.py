"""Evaluation harness: synthetic benchmarks, frozen-embedding
classifiers, the experiment grid, and the dataset-generality diagnostic.

The harness trains a classifier on the embeddings of the selected shots
and reports top-1 accuracy on the test split, per (strategy, shots,
seed), plus mean/std aggregates over seeds.  Classifier initialization
is seeded independently of the selection seed, so the only thing that
varies across seeds is the example set itself.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
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
from .encoder import EmbeddingCache, EmbeddingProvider, embed_item
from .perturb import NoiseConfig
from .seeding import derive_rng
from .strategies import (
    ClassPrototypes,
    DEFAULT_TEMPERATURE,
    STRATEGY_NAMES,
    prototypes_from_validation,
    score_pool,
    select_random,
    select_top_k,
)

OUTLIER_TAG = "outlier"

CLASSIFIERS = ("nearest-centroid", "linear-probe")

DEFAULT_SHOTS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture benchmark: one cluster per class on seeded
    orthonormal directions, with an optional inflated-noise outlier
    fraction in every split."""

    num_classes: int
    dim: int
    pool_per_class: int
    validation_per_class: int
    test_per_class: int
    separation: float
    within_std: float
    outlier_fraction: float = 0.0
    outlier_std_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.dim < self.num_classes:
            raise ValueError(
                f"dim {self.dim} too small for {self.num_classes} class directions"
            )
        if not self.separation > 0:
            raise ValueError("separation must be > 0")
        if not self.within_std > 0:
            raise ValueError("within_std must be > 0")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.outlier_std_multiplier < 1.0:
            raise ValueError("outlier_std_multiplier must be >= 1")
        for name in ("pool_per_class", "validation_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "pool_per_class": self.pool_per_class,
            "validation_per_class": self.validation_per_class,
            "test_per_class": self.test_per_class,
            "separation": self.separation,
            "within_std": self.within_std,
            "outlier_fraction": self.outlier_fraction,
            "outlier_std_multiplier": self.outlier_std_multiplier,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SyntheticSpec":
        return cls(**dict(payload))

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# The standard outlier benchmark: outliers are what Repre should avoid
# and Random sometimes hits.
STD_BENCH = SyntheticSpec(
    num_classes=5,
    dim=64,
    pool_per_class=40,
    validation_per_class=20,
    test_per_class=100,
    separation=3.0,
    within_std=1.0,
    outlier_fraction=0.15,
    outlier_std_multiplier=4.0,
    seed=7,
)


def is_outlier_id(item_id: str) -> bool:
    return item_id.endswith("_" + OUTLIER_TAG)


def generate_synthetic(spec: SyntheticSpec) -> DatasetManifest:
    """Deterministically generate a feature-only manifest from a spec.

    Class c items are drawn Normal(separation * u_c, std^2 I) where the
    u_c are orthonormal directions seeded by the spec seed.  Within each
    (class, split) block the first round(n * outlier_fraction) items use
    std * outlier_std_multiplier instead and carry an "_outlier" id
    suffix so they stay identifiable downstream.
    """
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.num_classes)))
    per_split = {
        "pool": spec.pool_per_class,
        "validation": spec.validation_per_class,
        "test": spec.test_per_class,
    }
    items: list[DatasetItem] = []
    for class_id in range(spec.num_classes):
        mean = spec.separation * basis[:, class_id]
        for split, count in per_split.items():
            n_outliers = int(round(count * spec.outlier_fraction))
            for index in range(count):
                outlier = index < n_outliers
                std = spec.within_std * (spec.outlier_std_multiplier if outlier else 1.0)
                features = mean + std * rng.standard_normal(spec.dim)
                item_id = f"c{class_id}_{split}_{index:03d}"
                if outlier:
                    item_id += "_" + OUTLIER_TAG
                items.append(
                    DatasetItem(id=item_id, label=class_id, split=split, features=features)
                )
    return DatasetManifest(items)


@dataclass(frozen=True)
class LinearProbeConfig:
    """Full-batch gradient descent settings for the linear probe."""

    epochs: int = 200
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    init_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class LinearProbeModel:
    """Trained multinomial logistic regression with its loss history."""

    weights: np.ndarray
    bias: np.ndarray
    losses: np.ndarray
    diverged: bool

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def predict(self, features: np.ndarray) -> np.ndarray:
        logits = features @ self.weights.T + self.bias
        return np.argmax(logits, axis=1)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def probe_loss_and_gradients(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    one_hot: np.ndarray,
    weight_decay: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus (decay/2) * ||W||^2, with its exact
    gradients; the bias carries no penalty."""
    logits = features @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    cross_entropy = float(np.mean(log_norm - (shifted * one_hot).sum(axis=1)))
    loss = cross_entropy + 0.5 * weight_decay * float((weights**2).sum())
    probs = _softmax_rows(logits)
    residual = (probs - one_hot) / features.shape[0]
    grad_w = residual.T @ features + weight_decay * weights
    grad_b = residual.sum(axis=0)
    return loss, grad_w, grad_b


def linear_probe_train(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: LinearProbeConfig = LinearProbeConfig(),
) -> LinearProbeModel:
    """Train by full-batch gradient descent from a seeded small-normal
    init.  The recorded losses include one final post-update evaluation;
    the model is flagged diverged if the loss ever increases by more
    than 1e-6 step to step, or by more than 1e-3 over any 10-epoch
    window.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.size:
        raise ValueError("features must be (n, dim) with one label per row")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    present = np.unique(labels)
    if present.min() < 0 or present.max() >= num_classes:
        raise ValueError("labels outside 0..num_classes-1")
    rng = np.random.default_rng(config.init_seed)
    weights = 0.01 * rng.standard_normal((num_classes, features.shape[1]))
    bias = np.zeros(num_classes, dtype=np.float64)
    one_hot = _one_hot(labels, num_classes)
    losses = np.empty(config.epochs + 1, dtype=np.float64)
    for epoch in range(config.epochs):
        loss, grad_w, grad_b = probe_loss_and_gradients(
            weights, bias, features, one_hot, config.weight_decay
        )
        losses[epoch] = loss
        weights -= config.learning_rate * grad_w
        bias -= config.learning_rate * grad_b
    losses[-1], _, _ = probe_loss_and_gradients(
        weights, bias, features, one_hot, config.weight_decay
    )
    steps = np.diff(losses)
    diverged = bool(np.any(steps > 1e-6))
    window = 10
    for start in range(len(losses) - window):
        if losses[start + window] - losses[start] > 1e-3:
            diverged = True
            break
    return LinearProbeModel(weights=weights, bias=bias, losses=losses, diverged=diverged)


def nearest_centroid_classify(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    num_classes: int | None = None,
) -> np.ndarray:
    """Predict the class whose train centroid has the largest cosine
    similarity; ties resolve to the smaller class id."""
    train_features = np.asarray(train_features, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_features = np.asarray(test_features, dtype=np.float64)
    if num_classes is None:
        num_classes = int(train_labels.max()) + 1
    centroids = np.empty((num_classes, train_features.shape[1]), dtype=np.float64)
    for class_id in range(num_classes):
        members = train_features[train_labels == class_id]
        if members.shape[0] == 0:
            raise ValueError(f"class {class_id} has no training items")
        centroids[class_id] = members.mean(axis=0)
    centroid_norms = np.linalg.norm(centroids, axis=1)
    test_norms = np.linalg.norm(test_features, axis=1)
    if np.any(centroid_norms < 1e-12) or np.any(test_norms < 1e-12):
        raise ValueError("cosine undefined for zero-norm vector")
    sims = (test_features / test_norms[:, None]) @ (centroids / centroid_norms[:, None]).T
    return np.argmax(sims, axis=1)


@dataclass(frozen=True)
class EvalRow:
    strategy: str
    shots: int
    seed: int
    accuracy: float


@dataclass(frozen=True)
class EvalFailure:
    strategy: str
    shots: int
    seed: int
    error: str


@dataclass(frozen=True)
class EvalAggregate:
    strategy: str
    shots: int
    mean: float
    std: float
    n_seeds: int


@dataclass
class EvalReport:
    """Per-cell accuracies plus mean/std aggregates over seeds."""

    rows: list[EvalRow] = field(default_factory=list)
    failures: list[EvalFailure] = field(default_factory=list)

    def aggregates(self) -> list[EvalAggregate]:
        grouped: dict[tuple[str, int], list[float]] = {}
        for row in self.rows:
            grouped.setdefault((row.strategy, row.shots), []).append(row.accuracy)
        out = []
        for (strategy, shots), values in sorted(grouped.items()):
            arr = np.asarray(values, dtype=np.float64)
            # A constant sequence has sample std exactly 0; computing it
            # through mean subtraction can leave ulp-level residue.
            if arr.size == 1 or arr.max() == arr.min():
                std = 0.0
            else:
                std = float(np.std(arr, ddof=1))
            out.append(
                EvalAggregate(
                    strategy=strategy,
                    shots=shots,
                    mean=float(arr.mean()),
                    std=std,
                    n_seeds=int(arr.size),
                )
            )
        return out

    def to_csv_text(self) -> str:
        lines = ["strategy,shots,seed,accuracy"]
        for row in sorted(self.rows, key=lambda r: (r.strategy, r.shots, r.seed)):
            lines.append(f"{row.strategy},{row.shots},{row.seed},{row.accuracy!r}")
        return "\n".join(lines) + "\n"

    def aggregates_to_dicts(self) -> list[dict]:
        return [
            {
                "strategy": agg.strategy,
                "shots": agg.shots,
                "mean": agg.mean,
                "std": agg.std,
                "n_seeds": agg.n_seeds,
            }
            for agg in self.aggregates()
        ]


def _accuracy(predicted: np.ndarray, expected: np.ndarray) -> float:
    return float(np.mean(predicted == expected))


def run_experiment(
    manifest: DatasetManifest,
    strategies: Sequence[str],
    shots: Sequence[int],
    seeds: Sequence[int],
    provider: EmbeddingProvider,
    *,
    classifier: str = "linear-probe",
    cache: EmbeddingCache | None = None,
    noise: NoiseConfig | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    probe: LinearProbeConfig = LinearProbeConfig(),
    prototypes: ClassPrototypes | None = None,
    metric: str = "cosine",
    jobs: int = 1,
    dedupe: bool = False,
) -> EvalReport:
    """Run the full (strategy x shots x seed) grid.

    Deterministic strategies ignore the selection seed; with ``dedupe``
    they run for the first seed only, otherwise every seed gets a row
    (uniform schema).  Budget or training failures are recorded per row
    and do not stop the rest of the grid.  Output is identical for any
    ``jobs`` value.
    """
    if classifier not in CLASSIFIERS:
        raise ValueError(f"unknown classifier {classifier!r}")
    for strategy in strategies:
        if strategy not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {strategy!r}")
    noise = noise or NoiseConfig()

    vectors = {
        item.id: embed_item(provider, item, cache).values for item in manifest.items
    }
    test_items = manifest.split_items("test")
    test_features = np.stack([vectors[item.id] for item in test_items])
    test_labels = np.asarray([item.label for item in test_items], dtype=np.int64)
    pool_ids_by_class = {
        c: [item.id for item in items]
        for c, items in manifest.items_by_class("pool").items()
    }

    needs_prototypes = any(s in ("entropy", "margin") for s in strategies)
    if needs_prototypes and prototypes is None:
        prototypes = prototypes_from_validation(manifest, provider, cache)

    scores_by_strategy = {
        strategy: score_pool(
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
        for strategy in strategies
        if strategy != "random"
    }

    def select(strategy: str, k: int, seed: int) -> SelectionResult:
        budget = SelectionBudget(shots_per_class=k, num_classes=manifest.num_classes)
        if strategy == "random":
            return select_random(pool_ids_by_class, budget, seed)
        return select_top_k(scores_by_strategy[strategy], budget, strategy, seed=seed)

    def evaluate_cell(cell: tuple[str, int, int]) -> EvalRow | EvalFailure:
        strategy, k, seed = cell
        try:
            selection = select(strategy, k, seed)
            chosen = [
                (item_id, class_id)
                for class_id in sorted(selection.classes)
                for item_id, _ in selection.classes[class_id]
            ]
            train_features = np.stack([vectors[item_id] for item_id, _ in chosen])
            train_labels = np.asarray([label for _, label in chosen], dtype=np.int64)
            if classifier == "nearest-centroid":
                predicted = nearest_centroid_classify(
                    train_features, train_labels, test_features, manifest.num_classes
                )
            else:
                model = linear_probe_train(
                    train_features, train_labels, manifest.num_classes, probe
                )
                predicted = model.predict(test_features)
            return EvalRow(strategy, k, seed, _accuracy(predicted, test_labels))
        except (BudgetError, ValueError, RuntimeError) as exc:
            return EvalFailure(strategy, k, seed, str(exc))

    cells = []
    for strategy in strategies:
        cell_seeds = seeds if (strategy == "random" or not dedupe) else seeds[:1]
        for k in shots:
            for seed in cell_seeds:
                cells.append((strategy, k, seed))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            outcomes = list(executor.map(evaluate_cell, cells))
    else:
        outcomes = [evaluate_cell(cell) for cell in cells]

    report = EvalReport()
    for outcome in outcomes:
        if isinstance(outcome, EvalRow):
            report.rows.append(outcome)
        else:
            report.failures.append(outcome)
    report.rows.sort(key=lambda r: (r.strategy, r.shots, r.seed))
    report.failures.sort(key=lambda r: (r.strategy, r.shots, r.seed))
    return report


@dataclass(frozen=True)
class GeneralityReport:
    """Mean pairwise cosine similarity, as a percentage."""

    percent: float
    n_items: int
    n_used: int
    sampled: bool


def generality_diagnostic(
    embeddings: Sequence[Embedding | np.ndarray] | np.ndarray,
    *,
    sample_cap: int = 5000,
    seed: int = 0,
) -> GeneralityReport:
    """100 * mean cosine similarity over all unordered pairs.

    Identical vectors give 100, orthogonal sets give 0; the value is
    invariant to per-vector scaling and to item order.  Pools larger
    than the cap are measured on a seeded uniform subsample and the
    report says so.
    """
    if isinstance(embeddings, np.ndarray):
        matrix = np.asarray(embeddings, dtype=np.float64)
    else:
        matrix = np.stack(
            [e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64) for e in embeddings]
        )
    n_items = matrix.shape[0]
    if n_items < 2:
        raise ValueError("generality needs at least 2 embeddings")
    if n_items > sample_cap:
        keep = derive_rng(seed, "generality").choice(n_items, size=sample_cap, replace=False)
        matrix = matrix[np.sort(keep)]
        sampled = True
    else:
        sampled = False
    n_used = matrix.shape[0]
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("cosine undefined for zero-norm vector")
    unit = matrix / norms[:, None]
    total = unit.sum(axis=0)
    # ||sum of units||^2 counts every ordered pair once plus n self-pairs.
    pair_sum = float(total @ total) - n_used
    mean_cos = pair_sum / (n_used * (n_used - 1))
    # clip rounding overshoot into the metric's mathematical range
    mean_cos = min(max(mean_cos, -1.0 / (n_used - 1)), 1.0)
    return GeneralityReport(
        percent=100.0 * mean_cos, n_items=n_items, n_used=n_used, sampled=sampled
    )
