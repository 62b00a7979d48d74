"""Seeded Gaussian noise synthesis for anchor images.

Each variant draws its own noise field from a stream keyed by
(base_seed, anchor id, variant index), so variants can be generated in
any order, on any worker, with bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ImageTensor
from .seeding import derive_rng


@dataclass(frozen=True)
class NoiseConfig:
    """Pixel-space noise parameters; sigma and mu are in [0, 1] units."""

    mu: float = 0.0
    sigma: float = 0.1
    variants: int = 20
    base_seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma!r}")
        if self.variants < 1:
            raise ValueError(f"variants must be >= 1, got {self.variants!r}")


def gaussian_noise(
    image: ImageTensor,
    config: NoiseConfig,
    variant_index: int,
    anchor_id: str = "",
) -> ImageTensor:
    """Add i.i.d. Normal(mu, sigma^2) noise per pixel and clamp to [0, 1].

    Noise is applied independently per channel.  The same
    (image, config, variant_index, anchor_id) always produces the same
    output, regardless of call order.
    """
    if not 0 <= variant_index < config.variants:
        raise ValueError(
            f"variant_index {variant_index} outside [0, {config.variants})"
        )
    rng = derive_rng(config.base_seed, anchor_id, variant_index)
    noise = rng.normal(config.mu, config.sigma, size=image.pixels.shape)
    return ImageTensor(np.clip(image.pixels + noise, 0.0, 1.0))


def variants(
    image: ImageTensor,
    config: NoiseConfig,
    anchor_id: str = "",
) -> list[ImageTensor]:
    """All noised variants of one anchor, indices 0 .. variants-1."""
    return [
        gaussian_noise(image, config, t, anchor_id) for t in range(config.variants)
    ]
