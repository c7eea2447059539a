"""Synthetic corpora for desk-scale verification.

Two generators: a Gaussian-blob feature corpus with known patch labels
(for clustering-recovery checks) and an 8-image colored-block task whose
full pipeline — extraction, discovery, training, generation, re-tagging —
runs in seconds on a CPU.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discovery import (
    KMeansOptions,
    PartMaskSet,
    PromptCode,
    SubConceptDictionary,
    fit_hierarchy,
    tag_image,
)
from .extractors import StubColorExtractor
from .features import CorpusEntry, FeatureCorpus, FeatureMap, save_manifest, write_feature_map


@dataclass
class BlobCorpus:
    corpus: FeatureCorpus
    maps: list[FeatureMap]
    labels: list[np.ndarray]  # per image (N, 2) true (channel, split), split 1-based


def three_blob_corpus(
    out_dir: str | Path,
    n_images: int = 40,
    grid: tuple[int, int] = (8, 8),
    dim: int = 8,
    seed: int = 0,
    noise: float = 0.25,
) -> BlobCorpus:
    """Patches drawn from one background-like and two part-like blobs.

    Each blob carries two fine modes (splits). Background occupies the
    image border ring plus nothing else; the interior is split between
    the two parts, left and right. True (channel, split) labels are
    returned per patch for recovery scoring.
    """
    gh, gw = grid
    rng = np.random.default_rng(seed)

    coarse = np.zeros((3, dim))
    coarse[0, 0] = 12.0    # background
    coarse[1, 1] = 12.0    # part one
    coarse[2, 2] = 12.0    # part two
    fine_axis = {0: 3, 1: 4, 2: 5}
    fine_delta = 1.8

    border = np.zeros((gh, gw), dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    interior_cols = np.arange(gw)
    left = ~border & (np.tile(interior_cols, (gh, 1)) < gw // 2)
    right = ~border & ~left

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps, labels, entries = [], [], []
    for i in range(n_images):
        channel_grid = np.zeros((gh, gw), dtype=np.int64)
        channel_grid[left] = 1
        channel_grid[right] = 2
        split_choice = rng.integers(1, 3, size=3)  # per-channel split for this image
        feats = np.zeros((gh, gw, dim))
        split_grid = np.zeros((gh, gw), dtype=np.int64)
        for ch in range(3):
            sel = channel_grid == ch
            k = int(split_choice[ch])
            split_grid[sel] = k
            mean = coarse[ch].copy()
            mean[fine_axis[ch]] = fine_delta if k == 1 else -fine_delta
            feats[sel] = mean + rng.normal(0.0, noise, size=(sel.sum(), dim))
        fm = FeatureMap(f"blob_{i:03d}", gh, gw, dim, feats.astype(np.float32))
        path = out_dir / f"{fm.image_id}.psfm"
        write_feature_map(fm, path)
        entries.append(CorpusEntry(fm.image_id, path.name, gh, gw, dim))
        maps.append(fm)
        labels.append(
            np.stack([channel_grid.reshape(-1), split_grid.reshape(-1)], axis=1)
        )
    corpus = FeatureCorpus("three-blob", entries, root=out_dir)
    save_manifest(corpus, out_dir / "manifest.json")
    return BlobCorpus(corpus, maps, labels)


# ---------------------------------------------------------------------------
# Colored-block toy task: 8 images covering all (bg, left, right) color combos.

TOY_IMAGE_SIZE = 32
TOY_COLORS = {
    "bg": [(0.06, 0.10, 0.12), (0.16, 0.12, 0.06)],
    "left": [(0.95, 0.75, 0.05), (0.80, 0.88, 0.14)],
    "right": [(0.05, 0.75, 0.95), (0.16, 0.86, 0.78)],
}
# Pixel extents [row0, row1, col0, col1) of the two part blocks.
TOY_LEFT_BOX = (8, 24, 2, 14)
TOY_RIGHT_BOX = (8, 24, 18, 30)


def pretrained_toy_backend(images: list[np.ndarray], seed: int = 0,
                           pretrain_steps: int = 800, **backend_kwargs):
    """Toy backend whose base was pretrained unconditionally on the images.

    Stands in for the pretrained full-scale denoiser that the inversion
    stage fine-tunes with adapters.
    """
    from .denoiser import build_toy_backend
    from .denoiser.toy import pretrain_backend

    backend_kwargs.setdefault("image_size", images[0].shape[0])
    backend_kwargs.setdefault("embed_dim", 32)
    backend = build_toy_backend(seed=seed, **backend_kwargs)
    if pretrain_steps > 0:
        latents = [backend.encode_image(img) for img in images]
        pretrain_backend(backend, latents, steps=pretrain_steps, seed=seed)
    return backend


def extractor_info(extractor: StubColorExtractor) -> dict:
    return {
        "name": extractor.name,
        "dim": extractor.dim,
        "patch_size": extractor.patch_size,
        "seed": extractor.seed,
        "length_scale": extractor.length_scale,
    }


def write_toy_images(out_dir: str | Path) -> list[tuple[str, Path]]:
    """Render the 8 toy images to PNG files; returns (image_id, path)."""
    from .extractors import save_image_rgb

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for bg_idx, l_idx, r_idx in itertools.product(range(2), repeat=3):
        image_id = f"toy_{bg_idx}{l_idx}{r_idx}"
        path = out / f"{image_id}.png"
        save_image_rgb(render_toy_image(bg_idx, l_idx, r_idx), path)
        written.append((image_id, path))
    return written


def render_toy_image(bg_idx: int, left_idx: int, right_idx: int) -> np.ndarray:
    img = np.empty((TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, 3), dtype=np.float64)
    img[:] = TOY_COLORS["bg"][bg_idx]
    r0, r1, c0, c1 = TOY_LEFT_BOX
    img[r0:r1, c0:c1] = TOY_COLORS["left"][left_idx]
    r0, r1, c0, c1 = TOY_RIGHT_BOX
    img[r0:r1, c0:c1] = TOY_COLORS["right"][right_idx]
    return img


@dataclass
class ToyTask:
    """Everything the desk-scale train/eval loop needs, precomputed."""

    image_ids: list[str]
    images: list[np.ndarray]
    extractor: StubColorExtractor
    dictionary: SubConceptDictionary
    codes: dict[str, PromptCode]
    masks: dict[str, PartMaskSet]
    feature_maps: dict[str, FeatureMap] = field(default_factory=dict)
    M: int = 2
    K: int = 2

    def tagged_codes(self) -> list[tuple[str, PromptCode]]:
        return [(i, self.codes[i]) for i in self.image_ids]


def toy_block_task(seed: int = 0, feature_dir: str | Path | None = None) -> ToyTask:
    """Build the 8-image task and fit its M=2, K=2 dictionary."""
    import tempfile

    ids, images = [], []
    for bg_idx, l_idx, r_idx in itertools.product(range(2), repeat=3):
        ids.append(f"toy_{bg_idx}{l_idx}{r_idx}")
        images.append(render_toy_image(bg_idx, l_idx, r_idx))

    extractor = StubColorExtractor(dim=64, patch_size=2, seed=7, length_scale=0.45)
    fmaps = {i: extractor.extract(img, i) for i, img in zip(ids, images)}

    own_dir = feature_dir is None
    tmp = tempfile.TemporaryDirectory() if own_dir else None
    fdir = Path(tmp.name) if own_dir else Path(feature_dir)
    fdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in ids:
        write_feature_map(fmaps[i], fdir / f"{i}.psfm")
        fm = fmaps[i]
        entries.append(CorpusEntry(i, f"{i}.psfm", fm.grid_h, fm.grid_w, fm.dim))
    corpus = FeatureCorpus(
        "toy-blocks", entries, root=fdir, extractor_info=extractor_info(extractor)
    )
    save_manifest(corpus, fdir / "manifest.json")

    dictionary = fit_hierarchy(corpus, M=2, K=2, seed=seed, opts=KMeansOptions())
    codes, masks = {}, {}
    for i in ids:
        code, mask = tag_image(fmaps[i], dictionary)
        codes[i] = code
        masks[i] = mask
    if tmp is not None:
        tmp.cleanup()
    return ToyTask(
        image_ids=ids,
        images=images,
        extractor=extractor,
        dictionary=dictionary,
        codes=codes,
        masks=masks,
        feature_maps=fmaps,
    )
