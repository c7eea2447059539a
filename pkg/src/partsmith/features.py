"""Patch-feature maps: validation, file IO, and corpus manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensorfile
from .errors import ValidationError


@dataclass(frozen=True)
class FeatureMap:
    """A per-image grid of patch feature vectors.

    data has shape (grid_h, grid_w, dim), float32, all entries finite.
    Degenerate grids (either side < 2) are rejected.
    """

    image_id: str
    grid_h: int
    grid_w: int
    dim: int
    data: np.ndarray

    def __post_init__(self):
        if self.grid_h < 2 or self.grid_w < 2:
            raise ValidationError(
                f"{self.image_id}: patch grid must be at least 2x2, "
                f"got {self.grid_h}x{self.grid_w}"
            )
        if self.dim < 1:
            raise ValidationError(f"{self.image_id}: dim must be positive")
        if self.data.shape != (self.grid_h, self.grid_w, self.dim):
            raise ValidationError(
                f"{self.image_id}: data shape {self.data.shape} does not match "
                f"declared ({self.grid_h}, {self.grid_w}, {self.dim})"
            )
        if not np.isfinite(self.data).all():
            raise ValidationError(f"{self.image_id}: non-finite feature values")
        object.__setattr__(
            self, "data", np.ascontiguousarray(self.data, dtype=np.float32)
        )

    def patches(self) -> np.ndarray:
        """Row-major (grid_h*grid_w, dim) view of the patch vectors."""
        return self.data.reshape(-1, self.dim)


def write_feature_map(fm: FeatureMap, path: str | Path) -> None:
    tensorfile.write_tensor(path, fm.data)


def read_feature_map(path: str | Path, image_id: str | None = None) -> FeatureMap:
    """Read and validate a PSFM feature file.

    image_id defaults to the file stem. Raises FormatError on bad
    magic/version, CorruptionError on header/payload mismatch, and
    ValidationError on non-finite values or degenerate grids.
    """
    path = Path(path)
    data = tensorfile.read_tensor(path)
    h, w, d = data.shape
    return FeatureMap(image_id or path.stem, h, w, d, data)


@dataclass
class CorpusEntry:
    image_id: str
    path: str
    grid_h: int
    grid_w: int
    dim: int


@dataclass
class FeatureCorpus:
    """Manifest of feature files sharing the same feature dimensionality."""

    dataset_name: str
    entries: list[CorpusEntry] = field(default_factory=list)
    root: Path | None = None
    extractor_info: dict | None = None  # how the features were produced

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image_id in corpus manifest")
        dims = {e.dim for e in self.entries}
        if len(dims) > 1:
            raise ValidationError(f"corpus mixes feature dims: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        if not self.entries:
            raise ValidationError("empty corpus has no dim")
        return self.entries[0].dim

    def _resolve(self, entry: CorpusEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, image_id: str) -> FeatureMap:
        for e in self.entries:
            if e.image_id == image_id:
                return read_feature_map(self._resolve(e), image_id)
        raise ValidationError(f"unknown image_id {image_id!r}")

    def iter_maps(self) -> Iterator[FeatureMap]:
        for e in self.entries:
            yield read_feature_map(self._resolve(e), e.image_id)


def save_manifest(corpus: FeatureCorpus, path: str | Path) -> None:
    doc = {
        "dataset_name": corpus.dataset_name,
        "records": [
            {
                "image_id": e.image_id,
                "path": e.path,
                "grid_h": e.grid_h,
                "grid_w": e.grid_w,
                "dim": e.dim,
            }
            for e in corpus.entries
        ],
    }
    if corpus.extractor_info:
        doc["extractor"] = corpus.extractor_info
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path: str | Path) -> FeatureCorpus:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    entries = [
        CorpusEntry(
            image_id=r["image_id"],
            path=r["path"],
            grid_h=int(r["grid_h"]),
            grid_w=int(r["grid_w"]),
            dim=int(r["dim"]),
        )
        for r in doc.get("records", [])
    ]
    return FeatureCorpus(
        doc.get("dataset_name", ""),
        entries,
        root=path.parent,
        extractor_info=doc.get("extractor"),
    )


def build_corpus(feature_dir: str | Path, dataset_name: str = "") -> FeatureCorpus:
    """Scan a directory of .psfm files (or read its manifest.json)."""
    feature_dir = Path(feature_dir)
    manifest = feature_dir / "manifest.json"
    if manifest.exists():
        return load_manifest(manifest)
    entries = []
    for p in sorted(feature_dir.glob("*.psfm")):
        fm = read_feature_map(p)
        entries.append(CorpusEntry(fm.image_id, p.name, fm.grid_h, fm.grid_w, fm.dim))
    return FeatureCorpus(dataset_name or feature_dir.name, entries, root=feature_dir)
