"""Shared domain types, manifest ingestion, and selection-result I/O.

A dataset manifest is a UTF-8 JSON-lines file: one object per line with
keys ``id`` (string), ``label`` (int), ``split`` (one of "pool",
"validation", "test"), and exactly one of ``path`` (image file path) or
``features`` (array of numbers).  Lines starting with ``#`` and blank
lines are skipped.

Class labels are dense integers ``0 .. num_classes - 1``; the highest
label seen in a manifest fixes ``num_classes``.  All types here are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPLITS = ("pool", "validation", "test")

NORM_TOL = 1e-6


class ManifestError(ValueError):
    """Raised when a manifest file is malformed or inconsistent."""


class BudgetError(ValueError):
    """Raised when a selection budget cannot be met by the candidate pool."""

    def __init__(self, message: str, class_id: int | None = None, count: int | None = None):
        super().__init__(message)
        self.class_id = class_id
        self.count = count


@dataclass(frozen=True, eq=False)
class Embedding:
    """A fixed-dimension real vector, the currency between modules.

    ``normalized`` may only be set when the L2 norm is 1 within 1e-6;
    the flag is advisory and never changes the stored values.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.normalized:
            norm = float(np.linalg.norm(values))
            if abs(norm - 1.0) > NORM_TOL:
                raise ValueError(
                    f"embedding flagged normalized but its L2 norm is {norm!r}"
                )

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(
            self.values, other.values
        )


@dataclass(frozen=True, eq=False)
class DatasetItem:
    """One candidate: an id, a class label, a split, and an image source.

    Exactly one of ``path`` (image file) or ``features`` (raw vector)
    must be present.
    """

    id: str
    label: int
    split: str
    path: str | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("item id must be a non-empty string")
        if not isinstance(self.label, int) or self.label < 0:
            raise ValueError(f"item {self.id!r}: label out of range: {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"item {self.id!r}: unknown split {self.split!r}")
        if (self.path is None) == (self.features is None):
            raise ValueError(
                f"item {self.id!r}: exactly one of 'path' or 'features' is required"
            )
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64, copy=True)
            if feats.ndim != 1 or feats.size == 0:
                raise ValueError(f"item {self.id!r}: features must be a 1-D vector")
            if not np.all(np.isfinite(feats)):
                raise ValueError(f"item {self.id!r}: features contain non-finite values")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetItem):
            return NotImplemented
        if (self.id, self.label, self.split, self.path) != (
            other.id,
            other.label,
            other.split,
            other.path,
        ):
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An M x N x C pixel array with values in [0, 1]; C is 1 or 3."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64, copy=True)
        if pixels.ndim != 3:
            raise ValueError(f"image must be 3-D (M, N, C), got shape {pixels.shape}")
        m, n, c = pixels.shape
        if m < 1 or n < 1:
            raise ValueError(f"image dimensions must be positive, got {m}x{n}")
        if c not in (1, 3):
            raise ValueError(f"image must have 1 or 3 channels, got {c}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image contains non-finite pixels")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("image pixels must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])


@dataclass(frozen=True)
class SelectionBudget:
    """K shots per class over a fixed number of classes."""

    shots_per_class: int
    num_classes: int

    def __post_init__(self):
        if self.shots_per_class < 1:
            raise ValueError("shots_per_class must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


class DatasetManifest:
    """A validated collection of dataset items with split/class indexes."""

    def __init__(self, items: Sequence[DatasetItem]):
        if not items:
            raise ManifestError("manifest contains no items")
        seen: set[str] = set()
        for item in items:
            if item.id in seen:
                raise ManifestError(f"duplicate item id {item.id!r}")
            seen.add(item.id)
        self.items: tuple[DatasetItem, ...] = tuple(items)
        self.num_classes = max(item.label for item in self.items) + 1
        self._by_id = {item.id: item for item in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.items == other.items

    def item(self, item_id: str) -> DatasetItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise KeyError(f"no item with id {item_id!r}") from None

    def split_items(self, split: str) -> list[DatasetItem]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [item for item in self.items if item.split == split]

    def items_by_class(self, split: str) -> dict[int, list[DatasetItem]]:
        """Items of one split grouped by label; every class key is present."""
        grouped: dict[int, list[DatasetItem]] = {c: [] for c in range(self.num_classes)}
        for item in self.split_items(split):
            grouped[item.label].append(item)
        return grouped

    def counts_per_split(self) -> dict[str, int]:
        return {split: len(self.split_items(split)) for split in SPLITS}

    def counts_per_class(self, split: str) -> dict[int, int]:
        return {c: len(items) for c, items in self.items_by_class(split).items()}


def _parse_manifest_line(raw: str, lineno: int, path: str) -> DatasetItem:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise ManifestError(f"{path}:{lineno}: expected a JSON object")
    for key in ("id", "label", "split"):
        if key not in record:
            raise ManifestError(f"{path}:{lineno}: missing key {key!r}")
    item_id = record["id"]
    if not isinstance(item_id, str) or not item_id:
        raise ManifestError(f"{path}:{lineno}: 'id' must be a non-empty string")
    label = record["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise ManifestError(f"{path}:{lineno}: label out of range: {label!r}")
    split = record["split"]
    if split not in SPLITS:
        raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
    has_path = "path" in record
    has_features = "features" in record
    if has_path == has_features:
        raise ManifestError(
            f"{path}:{lineno}: exactly one of 'path' or 'features' is required"
        )
    if has_path and not isinstance(record["path"], str):
        raise ManifestError(f"{path}:{lineno}: 'path' must be a string")
    try:
        return DatasetItem(
            id=item_id,
            label=label,
            split=split,
            path=record.get("path"),
            features=np.asarray(record["features"], dtype=np.float64)
            if has_features
            else None,
        )
    except ValueError as exc:
        raise ManifestError(f"{path}:{lineno}: {exc}") from exc


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Raises ManifestError naming the offending line for parse problems,
    duplicate ids, out-of-range labels, or unknown splits.
    """
    path = Path(path)
    items: list[DatasetItem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            item = _parse_manifest_line(line, lineno, str(path))
            if item.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate item id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    if not items:
        raise ManifestError("manifest contains no items")
    return DatasetManifest(items)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSON lines; reloading reproduces it exactly."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as handle:
        for item in manifest.items:
            record: dict = {"id": item.id, "label": item.label, "split": item.split}
            if item.path is not None:
                record["path"] = item.path
            else:
                record["features"] = [float(v) for v in item.features]
            handle.write(json.dumps(record) + "\n")


def validate_budget(manifest: DatasetManifest, budget: SelectionBudget) -> None:
    """Check that every class has at least K pool items.

    Raises BudgetError naming the first deficient class and its count.
    """
    if manifest.num_classes > budget.num_classes:
        raise BudgetError(
            f"manifest has {manifest.num_classes} classes but budget declares "
            f"{budget.num_classes}"
        )
    counts = manifest.counts_per_class("pool")
    for class_id in range(budget.num_classes):
        count = counts.get(class_id, 0)
        if count < budget.shots_per_class:
            raise BudgetError(
                f"class {class_id} has {count} pool items, "
                f"budget needs {budget.shots_per_class}",
                class_id=class_id,
                count=count,
            )


def config_digest(config: Mapping) -> str:
    """Stable SHA-256 hex digest of a JSON-serializable config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SelectionResult:
    """Chosen item ids per class, in preference order, with a full audit.

    ``classes`` maps class id to the ordered list of (item id, score)
    pairs; ``config`` echoes every knob that influenced the selection
    and is hashed into ``config_hash``.
    """

    strategy: str
    seed: int
    config: dict
    classes: dict[int, list[tuple[str, float]]]
    config_hash: str = field(default="")

    def __post_init__(self):
        if not self.config_hash:
            object.__setattr__(self, "config_hash", config_digest(self.config))

    def chosen_ids(self, class_id: int) -> list[str]:
        return [item_id for item_id, _ in self.classes[class_id]]

    def all_chosen_ids(self) -> list[str]:
        return [
            item_id
            for class_id in sorted(self.classes)
            for item_id, _ in self.classes[class_id]
        ]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "classes": {
                str(class_id): [
                    {"id": item_id, "score": score}
                    for item_id, score in self.classes[class_id]
                ]
                for class_id in sorted(self.classes)
            },
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SelectionResult":
        classes = {
            int(class_id): [(entry["id"], float(entry["score"])) for entry in entries]
            for class_id, entries in payload["classes"].items()
        }
        return cls(
            strategy=payload["strategy"],
            seed=int(payload["seed"]),
            config=dict(payload["config"]),
            classes=classes,
            config_hash=payload.get("config_hash", ""),
        )


def save_selection(result: SelectionResult, path: str | Path, generated_at: str) -> None:
    payload = result.to_dict()
    payload["generated_at"] = generated_at
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_selection(path: str | Path) -> SelectionResult:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    payload.pop("generated_at", None)
    return SelectionResult.from_dict(payload)


def validate_selection(
    result: SelectionResult,
    manifest: DatasetManifest,
    budget: SelectionBudget,
) -> None:
    """Check the structural invariants of a selection against its pool.

    Verifies: exactly K ids per class for every class, ids exist in the
    pool with the matching label, no id repeated, and within each class
    the scores are monotone in the configured direction with ties broken
    by ascending id.
    """
    k = budget.shots_per_class
    if sorted(result.classes) != list(range(budget.num_classes)):
        raise ValueError(
            f"selection covers classes {sorted(result.classes)}, "
            f"expected 0..{budget.num_classes - 1}"
        )
    seen: set[str] = set()
    direction = result.config.get("direction")
    for class_id in range(budget.num_classes):
        entries = result.classes[class_id]
        if len(entries) != k:
            raise ValueError(
                f"class {class_id}: selected {len(entries)} items, expected {k}"
            )
        for item_id, _ in entries:
            if item_id in seen:
                raise ValueError(f"item {item_id!r} selected more than once")
            seen.add(item_id)
            item = manifest.item(item_id)
            if item.split != "pool":
                raise ValueError(f"item {item_id!r} is not in the pool split")
            if item.label != class_id:
                raise ValueError(
                    f"item {item_id!r} has label {item.label}, listed under class {class_id}"
                )
        if direction in ("higher-is-better", "lower-is-better"):
            for (id_a, score_a), (id_b, score_b) in zip(entries, entries[1:]):
                ordered = score_a >= score_b if direction == "higher-is-better" else score_a <= score_b
                if not ordered:
                    raise ValueError(
                        f"class {class_id}: scores not in preference order "
                        f"({score_a!r} before {score_b!r})"
                    )
                if score_a == score_b and id_a >= id_b:
                    raise ValueError(
                        f"class {class_id}: tie between {id_a!r} and {id_b!r} "
                        "not broken by ascending id"
                    )


def features_to_image(features: np.ndarray | Sequence[float]) -> ImageTensor:
    """Materialize a 16x16 single-channel pseudo-image from a raw vector.

    The vector is tiled/truncated to 256 values and affinely squashed to
    [0, 1]; a constant vector maps to mid-gray.  This lets image-space
    pipelines run end to end on feature-only items.
    """
    values = np.asarray(features, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("features must be a non-empty 1-D vector")
    tiled = np.resize(values, 256).reshape(16, 16, 1)
    lo = float(tiled.min())
    hi = float(tiled.max())
    if hi > lo:
        pixels = (tiled - lo) / (hi - lo)
    else:
        pixels = np.full_like(tiled, 0.5)
    return ImageTensor(pixels)
