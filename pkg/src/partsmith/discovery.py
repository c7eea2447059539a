"""Three-level hierarchical clustering of patch features.

Level 1 splits all patches into foreground/background, level 2 groups
foreground patches into M class-agnostic part channels, level 3 splits
each channel (background included) into K fine appearance clusters.
Tagging assigns every patch of an image a (channel, split) pair, from
which the image's code and per-channel masks are derived.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import (
    CapacityError,
    CorruptionError,
    DegenerateClusteringError,
    ValidationError,
)
from .features import FeatureCorpus, FeatureMap

BACKGROUND_CHANNEL = 0


@dataclass(frozen=True)
class KMeansOptions:
    max_iter: int = 300
    tol: float = 1e-6
    restarts: int = 3   # reseedings allowed when a cluster empties out
    n_init: int = 10    # independent seedings; best final inertia wins


def _plus_plus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    idx = int(rng.integers(n))
    centers[0] = X[idx]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Squared Euclidean distances; ties resolve to the lowest center index.
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def _assign_chunked(X: np.ndarray, centers: np.ndarray, chunk: int = 4096):
    labels = np.empty(X.shape[0], dtype=np.int64)
    dists = np.empty(X.shape[0], dtype=np.float64)
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        labels[sl], dists[sl] = _assign(X[sl], centers)
    return labels, dists


def _lloyd_once(X: np.ndarray, k: int, rng: np.random.Generator, opts: KMeansOptions):
    """One seeded Lloyd run; returns None when a cluster empties out."""
    centers = _plus_plus_init(X, k, rng)
    labels, d = _assign_chunked(X, centers)
    prev_inertia = float(d.sum())
    for _ in range(opts.max_iter):
        counts = np.bincount(labels, minlength=k)
        if (counts == 0).any():
            return None
        for j in range(k):
            centers[j] = X[labels == j].mean(axis=0)
        labels, d = _assign_chunked(X, centers)
        inertia = float(d.sum())
        if prev_inertia == 0.0 or abs(prev_inertia - inertia) <= opts.tol * prev_inertia:
            prev_inertia = inertia
            break
        prev_inertia = inertia
    if (np.bincount(labels, minlength=k) == 0).any():
        return None
    return centers, labels, prev_inertia


def kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    opts: KMeansOptions = KMeansOptions(),
    context: str = "",
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding, best of n_init seedings.

    Each seeding may be reseeded up to opts.restarts times if a cluster
    empties; the run with the lowest final inertia wins (first found on
    ties). Raises DegenerateClusteringError naming the tier when every
    attempt ends with an empty cluster.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < k:
        raise CapacityError(
            f"{context or 'k-means'}: {X.shape[0]} points cannot form {k} clusters"
        )
    best = None
    for _ in range(max(opts.n_init, 1)):
        result = None
        for _ in range(opts.restarts + 1):
            result = _lloyd_once(X, k, rng, opts)
            if result is not None:
                break
        if result is None:
            continue
        if best is None or result[2] < best[2]:
            best = result
    if best is None:
        raise DegenerateClusteringError(
            f"{context or 'k-means'}: empty cluster persisted after "
            f"{opts.restarts} restarts in each of {opts.n_init} seedings (k={k})",
            tier=context,
        )
    return best


@dataclass
class SubConceptDictionary:
    """Frozen result of the three-level clustering.

    fgbg_centroids row 0 is the background top-level centroid, row 1
    foreground. split_centroids[0] are background style splits, channels
    1..M the part splits.
    """

    dim: int
    M: int
    K: int
    fgbg_centroids: np.ndarray          # (2, dim)
    part_centroids: np.ndarray          # (M, dim)
    split_centroids: np.ndarray         # (M+1, K, dim)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fgbg_centroids.shape != (2, self.dim):
            raise ValidationError("fgbg_centroids must be (2, dim)")
        if self.part_centroids.shape != (self.M, self.dim):
            raise ValidationError("part_centroids must be (M, dim)")
        if self.split_centroids.shape != (self.M + 1, self.K, self.dim):
            raise ValidationError("split_centroids must be (M+1, K, dim)")
        for name, arr in (
            ("fgbg_centroids", self.fgbg_centroids),
            ("part_centroids", self.part_centroids),
            ("split_centroids", self.split_centroids),
        ):
            if not np.isfinite(arr).all():
                raise ValidationError(f"non-finite values in {name}")

    @property
    def n_channels(self) -> int:
        return self.M + 1

    def centroid(self, channel: int, split: int) -> np.ndarray:
        """Split centroid for a (channel, split) pair; split is 1-based."""
        if not (0 <= channel <= self.M) or not (1 <= split <= self.K):
            raise ValidationError(f"pair ({channel},{split}) outside dictionary range")
        return self.split_centroids[channel, split - 1]


@dataclass(frozen=True)
class PromptCode:
    """Ordered (channel, split) pairs, one per channel 0..M.

    Splits are 1-based. Channels with present=False are excluded from
    prompts, masks, and losses; their stored split is a placeholder.
    """

    pairs: tuple[tuple[int, int], ...]
    present: tuple[bool, ...]

    def __post_init__(self):
        channels = [m for m, _ in self.pairs]
        if channels != list(range(len(self.pairs))):
            raise ValidationError(
                f"code channels must be exactly 0..M in order, got {channels}"
            )
        if len(self.present) != len(self.pairs):
            raise ValidationError("present flags must match pair count")
        for (m, k), pres in zip(self.pairs, self.present):
            if pres and k < 1:
                raise ValidationError(f"present channel {m} has invalid split {k}")
        if not any(self.present):
            raise ValidationError("code has no present channels")

    @property
    def n_channels(self) -> int:
        return len(self.pairs)

    def split_of(self, channel: int) -> int:
        return self.pairs[channel][1]

    def present_pairs(self) -> list[tuple[int, int]]:
        return [p for p, pres in zip(self.pairs, self.present) if pres]

    def to_prompt_string(self) -> str:
        return " ".join(f"({m},{k})" for m, k in self.present_pairs())

    def replace(self, channel: int, split: int) -> "PromptCode":
        pairs = list(self.pairs)
        present = list(self.present)
        pairs[channel] = (channel, split)
        present[channel] = True
        return PromptCode(tuple(pairs), tuple(present))

    def to_json(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "present": list(self.present)}

    @staticmethod
    def from_json(doc: dict) -> "PromptCode":
        return PromptCode(
            tuple((int(m), int(k)) for m, k in doc["pairs"]),
            tuple(bool(b) for b in doc["present"]),
        )


@dataclass
class PartMaskSet:
    """Binary per-channel masks on a patch/attention grid.

    Masks are pairwise disjoint and the present channels cover the full
    grid; background absorbs everything not claimed by a part.
    """

    grid_h: int
    grid_w: int
    masks: np.ndarray               # (M+1, grid_h, grid_w) uint8
    present: tuple[bool, ...]

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
        if self.masks.shape[1:] != (self.grid_h, self.grid_w):
            raise ValidationError("mask grid does not match declared size")
        if self.masks.max(initial=0) > 1:
            raise ValidationError("masks must be binary")
        if self.masks.sum(axis=0).max(initial=0) > 1:
            raise ValidationError("masks overlap")
        covered = self.masks.sum()
        if covered != self.grid_h * self.grid_w:
            raise ValidationError("present masks must cover the full grid")
        for m, pres in enumerate(self.present):
            nonzero = bool(self.masks[m].any())
            if nonzero != pres:
                raise ValidationError(
                    f"channel {m}: present flag {pres} disagrees with mask"
                )

    @property
    def n_channels(self) -> int:
        return self.masks.shape[0]

    def labels(self) -> np.ndarray:
        """Channel-index grid; every cell belongs to exactly one channel."""
        return self.masks.argmax(axis=0).astype(np.int64)

    @staticmethod
    def from_labels(labels: np.ndarray, n_channels: int) -> "PartMaskSet":
        labels = np.asarray(labels, dtype=np.int64)
        gh, gw = labels.shape
        masks = np.zeros((n_channels, gh, gw), dtype=np.uint8)
        for m in range(n_channels):
            masks[m] = labels == m
        present = tuple(bool(masks[m].any()) for m in range(n_channels))
        return PartMaskSet(gh, gw, masks, present)

    def flip_horizontal(self) -> "PartMaskSet":
        return PartMaskSet(self.grid_h, self.grid_w, self.masks[:, :, ::-1], self.present)


def downsample_masks(pm: PartMaskSet, target: tuple[int, int]) -> PartMaskSet:
    """Nearest-neighbor resample to target (h, w).

    Resampling the channel-label grid keeps the partition property by
    construction; presence flags are recomputed, so a part can vanish.
    """
    th, tw = target
    if th < 2 or tw < 2:
        raise ValidationError(f"target grid {target} is degenerate")
    if (th, tw) == (pm.grid_h, pm.grid_w):
        return PartMaskSet(pm.grid_h, pm.grid_w, pm.masks.copy(), pm.present)
    rows = (np.arange(th) * pm.grid_h) // th
    cols = (np.arange(tw) * pm.grid_w) // tw
    labels = pm.labels()[np.ix_(rows, cols)]
    return PartMaskSet.from_labels(labels, pm.n_channels)


def identify_background(
    fgbg_labels: list[np.ndarray], grids: list[tuple[int, int]], cluster_sizes: np.ndarray
) -> int:
    """Pick which top-level cluster is the background.

    The cluster owning the higher average fraction of image-border
    patches wins; ties break toward the larger cluster.
    """
    occupancy = np.zeros(2, dtype=np.float64)
    for labels, (gh, gw) in zip(fgbg_labels, grids):
        grid = labels.reshape(gh, gw)
        border = np.zeros((gh, gw), dtype=bool)
        border[0, :] = border[-1, :] = True
        border[:, 0] = border[:, -1] = True
        border_labels = grid[border]
        for c in (0, 1):
            occupancy[c] += (border_labels == c).mean()
    occupancy /= max(len(fgbg_labels), 1)
    if occupancy[0] > occupancy[1]:
        return 0
    if occupancy[1] > occupancy[0]:
        return 1
    return int(np.argmax(cluster_sizes))


def fit_hierarchy(
    corpus: FeatureCorpus,
    M: int,
    K: int,
    seed: int,
    opts: KMeansOptions = KMeansOptions(),
) -> SubConceptDictionary:
    """Fit the full three-tier dictionary on a pooled patch population."""
    if len(corpus) == 0:
        raise ValidationError("cannot fit on an empty corpus")
    if M < 1 or K < 1:
        raise ValidationError("M and K must be >= 1")
    rng = np.random.default_rng(seed)

    maps = list(corpus.iter_maps())
    grids = [(fm.grid_h, fm.grid_w) for fm in maps]
    X = np.concatenate([fm.patches() for fm in maps], axis=0).astype(np.float64)

    fgbg_centers, fgbg_labels_flat, _ = kmeans(X, 2, rng, opts, context="top(fg/bg)")
    sizes = np.bincount(fgbg_labels_flat, minlength=2)
    per_image = []
    off = 0
    for gh, gw in grids:
        per_image.append(fgbg_labels_flat[off : off + gh * gw])
        off += gh * gw
    bg_cluster = identify_background(per_image, grids, sizes)
    # Normalize centroid order: row 0 = background, row 1 = foreground.
    order = [bg_cluster, 1 - bg_cluster]
    fgbg_centroids = fgbg_centers[order]

    fg_mask = fgbg_labels_flat != bg_cluster
    fg_X = X[fg_mask]
    bg_X = X[~fg_mask]
    if fg_X.shape[0] < M * K:
        raise CapacityError(
            f"only {fg_X.shape[0]} foreground patches for M*K={M * K} splits"
        )

    part_centers, part_labels, _ = kmeans(fg_X, M, rng, opts, context="mid(parts)")

    split_centroids = np.zeros((M + 1, K, X.shape[1]), dtype=np.float64)
    channel_pools = {BACKGROUND_CHANNEL: bg_X}
    for m in range(1, M + 1):
        channel_pools[m] = fg_X[part_labels == m - 1]
    for m in range(M + 1):
        pool = channel_pools[m]
        if pool.shape[0] < K:
            raise CapacityError(
                f"channel {m} has {pool.shape[0]} patches, fewer than K={K}"
            )
        centers, _, _ = kmeans(pool, K, rng, opts, context=f"bottom(channel {m})")
        split_centroids[m] = centers

    meta = {
        "dataset_name": corpus.dataset_name,
        "seed": seed,
        "kmeans": asdict(opts),
        "n_images": len(corpus),
    }
    return SubConceptDictionary(
        dim=X.shape[1],
        M=M,
        K=K,
        fgbg_centroids=fgbg_centroids.astype(np.float32),
        part_centroids=part_centers.astype(np.float32),
        split_centroids=split_centroids.astype(np.float32),
        metadata=meta,
    )


def _nearest(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :].astype(np.float64) - centers[None, :, :].astype(np.float64)) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def assign_patches(fm: FeatureMap, dictionary: SubConceptDictionary) -> np.ndarray:
    """Per-patch (channel, split) assignment, shape (N, 2); split 1-based."""
    if fm.dim != dictionary.dim:
        raise ValidationError(
            f"feature dim {fm.dim} does not match dictionary dim {dictionary.dim}"
        )
    X = fm.patches()
    top = _nearest(X, dictionary.fgbg_centroids)  # 0 = background, 1 = foreground
    channels = np.zeros(X.shape[0], dtype=np.int64)
    fg_idx = np.nonzero(top == 1)[0]
    if fg_idx.size:
        part = _nearest(X[fg_idx], dictionary.part_centroids)
        channels[fg_idx] = part + 1
    splits = np.zeros(X.shape[0], dtype=np.int64)
    for m in range(dictionary.n_channels):
        idx = np.nonzero(channels == m)[0]
        if idx.size:
            splits[idx] = _nearest(X[idx], dictionary.split_centroids[m]) + 1
    return np.stack([channels, splits], axis=1)


def tag_image(
    fm: FeatureMap, dictionary: SubConceptDictionary
) -> tuple[PromptCode, PartMaskSet]:
    """Assign every patch, then reduce to a code and mask set.

    The per-channel split is the majority vote over that channel's
    patches, ties toward the lower split index; channels owning no
    patches are flagged absent.
    """
    assignment = assign_patches(fm, dictionary)
    channels = assignment[:, 0]
    splits = assignment[:, 1]
    n_ch = dictionary.n_channels

    pairs = []
    present = []
    for m in range(n_ch):
        member_splits = splits[channels == m]
        if member_splits.size == 0:
            pairs.append((m, 1))  # placeholder, excluded via present=False
            present.append(False)
            continue
        counts = np.bincount(member_splits, minlength=dictionary.K + 1)
        pairs.append((m, int(counts.argmax())))
        present.append(True)
    code = PromptCode(tuple(pairs), tuple(present))
    labels = channels.reshape(fm.grid_h, fm.grid_w)
    masks = PartMaskSet.from_labels(labels, n_ch)
    return code, masks


# ---------------------------------------------------------------------------
# Dictionary persistence: JSON manifest + PSFM centroid side files.

_BLOCKS = ("fgbg.psfm", "parts.psfm", "splits.psfm")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dictionary(dictionary: SubConceptDictionary, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorfile.write_matrix(out / "fgbg.psfm", dictionary.fgbg_centroids)
    tensorfile.write_matrix(out / "parts.psfm", dictionary.part_centroids)
    tensorfile.write_matrix(
        out / "splits.psfm",
        dictionary.split_centroids.reshape(-1, dictionary.dim),
    )
    manifest = {
        "format": "partsmith-dictionary",
        "version": 1,
        "dim": dictionary.dim,
        "M": dictionary.M,
        "K": dictionary.K,
        "background_channel": BACKGROUND_CHANNEL,
        "metadata": dictionary.metadata,
        "blocks": {name: _sha256(out / name) for name in _BLOCKS},
    }
    path = out / "dictionary.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dictionary(path: str | Path) -> SubConceptDictionary:
    path = Path(path)
    if path.is_dir():
        path = path / "dictionary.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"dictionary manifest unreadable: {exc}") from exc
    if manifest.get("format") != "partsmith-dictionary":
        raise ValidationError(f"{path} is not a dictionary manifest")
    root = path.parent
    for name, digest in manifest["blocks"].items():
        actual = _sha256(root / name)
        if actual != digest:
            raise CorruptionError(f"checksum mismatch for {name}")
    M, K, dim = manifest["M"], manifest["K"], manifest["dim"]
    return SubConceptDictionary(
        dim=dim,
        M=M,
        K=K,
        fgbg_centroids=tensorfile.read_matrix(root / "fgbg.psfm"),
        part_centroids=tensorfile.read_matrix(root / "parts.psfm"),
        split_centroids=tensorfile.read_matrix(root / "splits.psfm").reshape(M + 1, K, dim),
        metadata=manifest.get("metadata", {}),
    )


def dictionary_checksum(dict_dir: str | Path) -> str:
    """Stable digest of the dictionary manifest, for artifact chaining."""
    p = Path(dict_dir)
    if p.is_dir():
        p = p / "dictionary.json"
    return _sha256(p)
