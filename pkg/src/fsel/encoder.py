"""Embedding providers: reference encoder, binary cache, external service.

All three providers expose the same surface: ``name``, ``dim``,
``normalizes``, ``supports_images``, and ``encode_image``.  A fixed
provider configuration always maps the same input to the same embedding
(bitwise for the reference encoder and the cache).

Cache file format (little-endian): magic ``FSEC``, u32 version (= 1),
u32 dim, u32 count, then per record a u16 id length, the UTF-8 id
bytes, and dim float32 values.  Readers reject unknown versions.
"""

from __future__ import annotations

import base64
import io
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, runtime_checkable

import httpx
import numpy as np
from PIL import Image

from .data import DatasetItem, Embedding, ImageTensor, features_to_image

CACHE_MAGIC = b"FSEC"
CACHE_VERSION = 1

POOL_GRID = 8

DEFAULT_TIMEOUT_MS = 10_000
TIMEOUT_ENV_VAR = "FSEL_EMBED_TIMEOUT_MS"

_DEGENERATE_NORM = 1e-12


class ProviderError(RuntimeError):
    """Raised when a provider cannot produce a valid embedding."""


class CacheFormatError(ValueError):
    """Raised for malformed or unsupported cache files."""


@runtime_checkable
class EmbeddingProvider(Protocol):
    name: str
    dim: int
    normalizes: bool
    supports_images: bool

    def encode_image(self, image: ImageTensor) -> Embedding: ...


def _l2_normalize(values: np.ndarray, context: str) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    if norm < _DEGENERATE_NORM:
        raise ProviderError(f"degenerate embedding: {context}")
    return values / norm


def _pool_to_grid(gray: np.ndarray, grid: int = POOL_GRID) -> np.ndarray:
    """Average contiguous index blocks down to a grid x grid array.

    Block i covers rows [i*M//grid, (i+1)*M//grid); when M < grid a
    block degenerates to the single nearest row (same for columns), so
    any image size is accepted.
    """
    m, n = gray.shape
    pooled = np.empty((grid, grid), dtype=np.float64)
    for i in range(grid):
        r0 = (i * m) // grid
        r1 = max(((i + 1) * m) // grid, r0 + 1)
        row_band = gray[r0:r1]
        for j in range(grid):
            c0 = (j * n) // grid
            c1 = max(((j + 1) * n) // grid, c0 + 1)
            pooled[i, j] = row_band[:, c0:c1].mean()
    return pooled


class ReferenceEncoder:
    """Deterministic stand-in encoder: pooled pixels through a fixed
    random projection, then L2-normalized.

    Pipeline: grayscale by channel mean, average-pool to 8x8, flatten
    to 64 values, multiply by an out_dim x 64 projection whose entries
    are drawn once from a standard normal stream seeded by proj_seed,
    L2-normalize.  Linear before normalization, so larger pixel
    perturbations move embeddings farther in expectation.
    """

    supports_images = True
    normalizes = True

    def __init__(self, proj_seed: int = 0, out_dim: int = 64):
        if out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        self.name = "reference"
        self.proj_seed = proj_seed
        self.dim = out_dim
        self.projection = np.random.default_rng(proj_seed).standard_normal(
            (out_dim, POOL_GRID * POOL_GRID)
        )
        self.projection.setflags(write=False)

    def encode_image(self, image: ImageTensor) -> Embedding:
        gray = image.pixels.mean(axis=2)
        flat = _pool_to_grid(gray).reshape(-1)
        projected = self.projection @ flat
        values = _l2_normalize(
            projected, f"reference encoder produced a zero vector (proj_seed={self.proj_seed})"
        )
        return Embedding(values, normalized=True)


@dataclass
class EmbeddingCache:
    """In-memory id -> vector map backed by the binary cache format."""

    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        for item_id, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise CacheFormatError(
                    f"cached vector for {item_id!r} has shape {vec.shape}, "
                    f"expected ({self.dim},)"
                )

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, item_id: str) -> np.ndarray | None:
        return self.vectors.get(item_id)


def write_cache(path: str | Path, dim: int, vectors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> int:
    """Write vectors (converted to float32) in iteration order; returns count."""
    pairs = vectors.items() if isinstance(vectors, Mapping) else list(vectors)
    pairs = list(pairs)
    with open(path, "wb") as handle:
        handle.write(CACHE_MAGIC)
        handle.write(struct.pack("<III", CACHE_VERSION, dim, len(pairs)))
        for item_id, vec in pairs:
            values = np.asarray(vec, dtype="<f4")
            if values.shape != (dim,):
                raise CacheFormatError(
                    f"vector for {item_id!r} has shape {values.shape}, expected ({dim},)"
                )
            id_bytes = item_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise CacheFormatError(f"id too long to encode: {item_id!r}")
            handle.write(struct.pack("<H", len(id_bytes)))
            handle.write(id_bytes)
            handle.write(values.tobytes())
    return len(pairs)


def read_cache(path: str | Path) -> EmbeddingCache:
    """Read a cache file; vectors come back bitwise as float32."""
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    if len(view) < 16 or bytes(view[:4]) != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a cache file (bad magic)")
    version, dim, count = struct.unpack_from("<III", view, 4)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    offset = 16
    record_bytes = 4 * dim
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(view):
            raise CacheFormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        if offset + id_len + record_bytes > len(view):
            raise CacheFormatError(f"{path}: truncated record body")
        item_id = bytes(view[offset : offset + id_len]).decode("utf-8")
        offset += id_len
        values = np.frombuffer(view, dtype="<f4", count=dim, offset=offset).copy()
        values.setflags(write=False)
        offset += record_bytes
        if item_id in vectors:
            raise CacheFormatError(f"{path}: duplicate id {item_id!r}")
        vectors[item_id] = values
    if offset != len(view):
        raise CacheFormatError(f"{path}: {len(view) - offset} trailing bytes")
    return EmbeddingCache(dim=dim, vectors=vectors, provenance=str(path))


class CacheProvider:
    """Serves embeddings from a cache file only; cannot encode images."""

    supports_images = False
    normalizes = False

    def __init__(self, cache: EmbeddingCache):
        self.name = "cache"
        self.cache = cache
        self.dim = cache.dim

    def encode_image(self, image: ImageTensor) -> Embedding:
        raise ProviderError("cache provider cannot encode images")


def image_to_png_b64(image: ImageTensor) -> str:
    """Encode an image tensor as a base64 PNG (8-bit, deterministic)."""
    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    if image.channels == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png_b64_to_image(payload: str) -> ImageTensor:
    raw = base64.b64decode(payload)
    pil = Image.open(io.BytesIO(raw))
    return _pil_to_tensor(pil)


def _pil_to_tensor(pil: Image.Image) -> ImageTensor:
    if pil.mode == "L":
        arr = np.asarray(pil, dtype=np.float64)[:, :, None]
    else:
        if pil.mode != "RGB":
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float64)
    return ImageTensor(arr / 255.0)


def decode_image(path: str | Path) -> ImageTensor:
    """Decode an image file to a [0, 1] tensor (grayscale stays 1-channel)."""
    try:
        with Image.open(path) as pil:
            return _pil_to_tensor(pil)
    except (OSError, ValueError) as exc:
        raise ProviderError(f"cannot decode image {path!r}: {exc}") from exc


def item_image(item: DatasetItem) -> ImageTensor:
    """The image behind an item: decoded from disk, or the pseudo-image
    materialized from raw features."""
    if item.path is not None:
        return decode_image(item.path)
    return features_to_image(item.features)


def _default_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV_VAR)
    if raw is None:
        return DEFAULT_TIMEOUT_MS / 1000.0
    try:
        return max(int(raw), 1) / 1000.0
    except ValueError:
        raise ValueError(f"{TIMEOUT_ENV_VAR} must be an integer, got {raw!r}")


class ExternalProvider:
    """Client for an HTTP embedding service.

    POSTs ``{"images": [{"b64": <base64 PNG>}, ...]}`` to ``/embed`` and
    expects 200 with ``{"dim": D, "embeddings": [[...], ...]}``.
    Transport failures and 5xx responses are retried with exponential
    backoff; malformed or out-of-contract responses fail immediately.
    """

    supports_images = True

    def __init__(
        self,
        endpoint: str,
        dim: int,
        *,
        normalizes: bool = True,
        timeout: float | None = None,
        max_retries: int = 3,
        backoff_base: float = 0.2,
        client: httpx.Client | None = None,
    ):
        self.name = "external"
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.normalizes = normalizes
        self.timeout = _default_timeout() if timeout is None else timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._client = client or httpx.Client()

    def encode_image(self, image: ImageTensor) -> Embedding:
        return self.encode_batch([image])[0]

    def encode_batch(self, images: list[ImageTensor]) -> list[Embedding]:
        if not images:
            raise ValueError("batch must be non-empty")
        payload = {"images": [{"b64": image_to_png_b64(img)} for img in images]}
        response = self._post_with_retries(payload)
        return self._validate_response(response, len(images))

    def _post_with_retries(self, payload: dict) -> httpx.Response:
        url = f"{self.endpoint}/embed"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.post(url, json=payload, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    return response
                if response.status_code >= 500:
                    last_error = ProviderError(
                        f"embedding service returned status {response.status_code}"
                    )
                else:
                    raise ProviderError(
                        f"embedding service returned status {response.status_code}"
                    )
            if attempt < self.max_retries:
                time.sleep(self.backoff_base * (2**attempt))
        raise ProviderError(
            f"embedding service unreachable after {self.max_retries + 1} attempts: "
            f"{last_error}"
        )

    def _validate_response(self, response: httpx.Response, expected: int) -> list[Embedding]:
        try:
            body = response.json()
        except ValueError as exc:
            raise ProviderError(f"malformed response: not valid JSON ({exc})") from exc
        if not isinstance(body, dict) or "dim" not in body or "embeddings" not in body:
            raise ProviderError("malformed response: missing 'dim' or 'embeddings'")
        if body["dim"] != self.dim:
            raise ProviderError(
                f"embedding service returned dim {body['dim']}, "
                f"provider declares {self.dim}"
            )
        rows = body["embeddings"]
        if not isinstance(rows, list) or len(rows) != expected:
            raise ProviderError(
                f"malformed response: expected {expected} embeddings, "
                f"got {len(rows) if isinstance(rows, list) else type(rows).__name__}"
            )
        embeddings = []
        for index, row in enumerate(rows):
            values = np.asarray(row, dtype=np.float64)
            if values.shape != (self.dim,):
                raise ProviderError(
                    f"embedding at index {index} has length {values.size}, "
                    f"expected {self.dim}"
                )
            if not np.all(np.isfinite(values)):
                raise ProviderError(f"non-finite value in embedding at index {index}")
            embeddings.append(Embedding(values))
        return embeddings


def external_embed(
    endpoint: str,
    images: list[ImageTensor],
    dim: int,
    **kwargs,
) -> list[Embedding]:
    """One-shot batch embedding against an external service."""
    return ExternalProvider(endpoint, dim, **kwargs).encode_batch(images)


def embed_item(
    provider: EmbeddingProvider,
    item: DatasetItem,
    cache: EmbeddingCache | None = None,
) -> Embedding:
    """Embed one item: cache hit short-circuits, raw features pass
    through (normalized when the provider normalizes), image paths go
    through the provider."""
    effective_cache = cache if cache is not None else getattr(provider, "cache", None)
    if effective_cache is not None:
        if effective_cache.dim != provider.dim:
            raise ProviderError(
                f"cache dim {effective_cache.dim} does not match provider dim {provider.dim}"
            )
        cached = effective_cache.get(item.id)
        if cached is not None:
            return Embedding(cached)
    if item.features is not None:
        if item.features.size != provider.dim:
            raise ProviderError(
                f"item {item.id!r}: features have dim {item.features.size}, "
                f"provider declares {provider.dim}"
            )
        if provider.normalizes:
            values = _l2_normalize(item.features, f"item {item.id!r} has zero-norm features")
            return Embedding(values, normalized=True)
        return Embedding(item.features)
    if not provider.supports_images:
        raise ProviderError(f"cache miss with no fallback for item {item.id!r}")
    try:
        image = decode_image(item.path)
    except ProviderError as exc:
        raise ProviderError(f"item {item.id!r}: {exc}") from exc
    return provider.encode_image(image)
