"""Feature extractor adapters.

No pretrained vision backbone ships with the toolkit: extractors are
pluggable adapters that turn a decoded RGB buffer into a FeatureMap.
The bundled stub derives each patch vector deterministically from the
patch's mean color, which is dependency-free and separable enough for
the clustering pipeline and its tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DependencyError, ValidationError
from .features import FeatureMap


@runtime_checkable
class ExtractorAdapter(Protocol):
    name: str
    dim: int
    patch_size: int

    def extract(self, image: np.ndarray, image_id: str = "") -> FeatureMap:
        ...


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) RGB buffer, got {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    image = image.astype(np.float64)
    if image.min() < -1e-9 or image.max() > 1 + 1e-9:
        raise ValidationError("float images must be scaled to [0, 1]")
    return image


@dataclass
class StubColorExtractor:
    """Deterministic stub: seeded embedding of each patch's mean color.

    Mean RGB is mapped through fixed random Fourier features
    cos(W c + b), with W, b drawn once from the seed. Identical patch
    bytes always produce identical vectors, and nearby colors map to
    nearby vectors, so cluster structure in color space survives.
    """

    dim: int = 16
    patch_size: int = 2
    seed: int = 0
    length_scale: float = 0.35
    name: str = "stub"

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._w = rng.normal(0.0, 1.0 / self.length_scale, size=(self.dim, 3))
        self._b = rng.uniform(0.0, 2.0 * np.pi, size=self.dim)

    def embed_colors(self, colors: np.ndarray) -> np.ndarray:
        """Map (N, 3) colors in [0,1] to (N, dim) feature vectors."""
        colors = np.asarray(colors, dtype=np.float64)
        return np.cos(colors @ self._w.T + self._b).astype(np.float32)

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise ValidationError(
                f"image {height}x{width} is not divisible by patch size "
                f"{self.patch_size}"
            )
        return height // self.patch_size, width // self.patch_size

    def extract(self, image: np.ndarray, image_id: str = "") -> FeatureMap:
        img = _check_image(image)
        gh, gw = self.grid_for(img.shape[0], img.shape[1])
        p = self.patch_size
        patches = img.reshape(gh, p, gw, p, 3)
        mean_colors = patches.mean(axis=(1, 3)).reshape(-1, 3)
        feats = self.embed_colors(mean_colors).reshape(gh, gw, self.dim)
        return FeatureMap(image_id or "image", gh, gw, self.dim, feats)


def make_extractor(name: str, **kwargs) -> ExtractorAdapter:
    if name == "stub":
        allowed = {"dim", "patch_size", "seed", "length_scale"}
        return StubColorExtractor(**{k: v for k, v in kwargs.items() if k in allowed})
    raise DependencyError(
        f"extractor {name!r} is not bundled; supply precomputed feature files "
        "or plug in an adapter"
    )


def load_image_rgb(path: str | Path) -> np.ndarray:
    """Thin decode adapter; the core only ever sees RGB arrays."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise DependencyError("Pillow is required to decode image files") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image_rgb(image: np.ndarray, path: str | Path) -> None:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise DependencyError("Pillow is required to encode image files") from exc
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255)
        arr = arr.astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
