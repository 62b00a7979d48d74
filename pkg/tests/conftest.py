from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from fsel.data import DatasetManifest, ImageTensor
from fsel.encoder import ReferenceEncoder
from fsel.evaluation import STD_BENCH, generate_synthetic


def write_manifest_lines(path: Path, lines: list[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_feature_line(item_id: str, label: int, split: str, features: list[float]) -> str:
    return json.dumps(
        {"id": item_id, "label": label, "split": split, "features": features}
    )


def gradient_image(size: int = 16) -> ImageTensor:
    """Deterministic non-constant image: pixel value grows with index."""
    count = size * size
    values = np.arange(count, dtype=np.float64).reshape(size, size, 1)
    return ImageTensor(values / (count - 1))


@pytest.fixture(scope="session")
def std_bench_manifest() -> DatasetManifest:
    return generate_synthetic(STD_BENCH)


@pytest.fixture(scope="session")
def reference_provider() -> ReferenceEncoder:
    return ReferenceEncoder(proj_seed=0, out_dim=64)
