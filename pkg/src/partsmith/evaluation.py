"""Compositional-generation metrics and attention diagnostics.

EMR counts channels whose predicted cluster index on a generated image
exactly matches the requested code; CoSim averages the cosine between
the split-centroid vectors of requested and predicted pairs. Both are 1
exactly when the codes agree channelwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .composition import SuiteItem, generate, sample_composition_suite
from .discovery import PartMaskSet, PromptCode, SubConceptDictionary, tag_image
from .errors import DependencyError, ValidationError
from .extractors import ExtractorAdapter
from .losses import normalize_attention
from .training import ModelBundle


def predict_code(
    image: np.ndarray, dictionary: SubConceptDictionary, extractor: ExtractorAdapter
) -> PromptCode:
    """Extract features and tag against the frozen dictionary."""
    if extractor is None:
        raise DependencyError("no extractor adapter supplied")
    fm = extractor.extract(image, "query")
    code, _ = tag_image(fm, dictionary)
    return code


@dataclass
class EvalResult:
    emr: float
    cosim: float
    matches: list[bool] = field(default_factory=list)
    n_samples: int = 1


def _channel_cosine(dictionary: SubConceptDictionary, m: int, ka: int, kb: int) -> float:
    if ka == kb:
        return 1.0
    a = dictionary.centroid(m, ka).astype(np.float64)
    b = dictionary.centroid(m, kb).astype(np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def emr_cosim(
    input_code: PromptCode,
    gen_code: PromptCode,
    dictionary: SubConceptDictionary,
) -> EvalResult:
    """Channelwise exact-match rate and centroid cosine similarity.

    Channels absent on one side but present on the other count as a
    mismatch with cosine 0; channels absent on both sides agree (match,
    cosine 1).
    """
    n_ch = dictionary.n_channels
    if input_code.n_channels != n_ch or gen_code.n_channels != n_ch:
        raise ValidationError(
            "codes do not match the dictionary channel count "
            f"({input_code.n_channels}/{gen_code.n_channels} vs {n_ch})"
        )
    matches = []
    cosines = []
    for m in range(n_ch):
        pa, pb = input_code.present[m], gen_code.present[m]
        if pa != pb:
            matches.append(False)
            cosines.append(0.0)
        elif not pa:
            matches.append(True)
            cosines.append(1.0)
        else:
            ka, kb = input_code.split_of(m), gen_code.split_of(m)
            if not (1 <= ka <= dictionary.K) or not (1 <= kb <= dictionary.K):
                raise ValidationError(
                    f"channel {m}: splits ({ka},{kb}) outside dictionary K={dictionary.K}"
                )
            matches.append(ka == kb)
            cosines.append(_channel_cosine(dictionary, m, ka, kb))
    return EvalResult(
        emr=float(np.mean([1.0 if m else 0.0 for m in matches])),
        cosim=float(np.mean(cosines)),
        matches=matches,
    )


def aggregate_results(results: list[EvalResult]) -> EvalResult:
    if not results:
        raise ValidationError("no results to aggregate")
    return EvalResult(
        emr=float(np.mean([r.emr for r in results])),
        cosim=float(np.mean([r.cosim for r in results])),
        n_samples=len(results),
    )


def eval_suite(
    items: list[SuiteItem],
    bundle: ModelBundle,
    dictionary: SubConceptDictionary,
    extractor: ExtractorAdapter,
    steps: int = 50,
    seed: int = 0,
) -> dict:
    """Generate each suite item, re-tag it, and aggregate EMR/CoSim.

    Results group by the item's source count (the x-axis of the standard
    curves). Backend failures are recorded and excluded, never silent.
    """
    if not items:
        raise ValidationError("empty evaluation suite")
    per_item: list[tuple[SuiteItem, EvalResult]] = []
    failures: list[dict] = []
    for i, item in enumerate(items):
        try:
            gen = generate(item.code, bundle, seed=seed + i, steps=steps,
                           dictionary=dictionary, capture_attention=False)
            if gen.image is None:
                raise DependencyError("backend has no codec to decode images")
            got = predict_code(gen.image, dictionary, extractor)
            per_item.append((item, emr_cosim(item.code, got, dictionary)))
        except DependencyError as exc:
            failures.append({"index": i, "error": str(exc)})
    if not per_item:
        raise DependencyError(
            f"all {len(items)} generations failed; first: {failures[0]['error']}"
        )
    overall = aggregate_results([r for _, r in per_item])
    per_k: dict[int, EvalResult] = {}
    for k in sorted({it.sources for it, _ in per_item}):
        per_k[k] = aggregate_results([r for it, r in per_item if it.sources == k])
    return {
        "n_samples": len(per_item),
        "n_failed": len(failures),
        "failures": failures,
        "overall": {"emr": overall.emr, "cosim": overall.cosim},
        "per_k": {
            str(k): {"emr": r.emr, "cosim": r.cosim, "n": r.n_samples}
            for k, r in per_k.items()
        },
    }


def embedding_similarity(
    real_images: list[np.ndarray],
    generated_images: list[np.ndarray],
    embedder=None,
) -> dict:
    """Mean pairwise cosine between adapter embeddings of paired images.

    No backbone is bundled: without an adapter the metric reports
    status "unavailable" instead of a value.
    """
    if embedder is None:
        return {"status": "unavailable", "value": None}
    if len(real_images) != len(generated_images):
        raise ValidationError("paired image lists must have equal length")
    cosines = []
    for a, b in zip(real_images, generated_images):
        va = np.asarray(embedder(a), dtype=np.float64).reshape(-1)
        vb = np.asarray(embedder(b), dtype=np.float64).reshape(-1)
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        cosines.append(0.0 if na == 0 or nb == 0 else float(va @ vb / (na * nb)))
    return {"status": "ok", "value": float(np.mean(cosines))}


# ---------------------------------------------------------------------------
# Attention diagnostics


DEFAULT_DIAG_TIMESTEPS = (100, 300, 500, 700, 900)


def mean_normalized_attention(
    bundle: ModelBundle,
    code: PromptCode,
    latent: torch.Tensor | None = None,
    timesteps: tuple[int, ...] = DEFAULT_DIAG_TIMESTEPS,
    seed: int = 0,
) -> torch.Tensor:
    """Average normalized attention over a few noise levels.

    With a latent given, z_t comes from the forward process on it;
    otherwise pure noise latents are used. Per-cell channel sums stay 1.
    """
    backend = bundle.backend
    gen = torch.Generator().manual_seed(seed)
    prompt = bundle.embed(code)
    total = None
    with torch.no_grad():
        for t in timesteps:
            noise = torch.empty(backend.latent_shape).normal_(generator=gen)
            if latent is not None:
                z_t = backend.schedule.add_noise(latent, t, noise)
            else:
                z_t = noise
            _, stack = backend.predict_noise(z_t, t, prompt)
            norm = normalize_attention(stack)
            total = norm.values if total is None else total + norm.values
    return total / len(timesteps)


def attention_mask_iou(
    bundle: ModelBundle,
    samples: list[tuple[torch.Tensor, PromptCode, PartMaskSet]],
    timesteps: tuple[int, ...] = DEFAULT_DIAG_TIMESTEPS,
    seed: int = 0,
) -> float:
    """Mean IoU between the argmax-attention channel map and the masks."""
    ious = []
    for latent, code, masks in samples:
        values = mean_normalized_attention(
            bundle, code, latent=latent, timesteps=timesteps, seed=seed
        ).numpy()
        present_idx = [m for m, p in enumerate(code.present) if p]
        argmax = np.full(values.shape[1:], -1, dtype=np.int64)
        stacked = values[present_idx]
        argmax_flat = stacked.reshape(len(present_idx), -1).argmax(axis=0)
        argmax = np.array(present_idx)[argmax_flat].reshape(values.shape[1:])
        for m in present_idx:
            pred = argmax == m
            true = masks.masks[m].astype(bool)
            union = (pred | true).sum()
            if union:
                ious.append(float((pred & true).sum() / union))
    return float(np.mean(ious)) if ious else 0.0


def dump_attention(
    code: PromptCode,
    bundle: ModelBundle,
    out_dir: str | Path,
    seed: int = 0,
    timesteps: tuple[int, ...] = DEFAULT_DIAG_TIMESTEPS,
) -> list[Path]:
    """Write one grayscale heatmap per present channel plus the raw tensor.

    Heatmap pixels are the normalized attention values rescaled to
    0..255; the raw (channels, h, w) tensor lands in attention.psfm.
    """
    from . import tensorfile
    from .errors import UnsupportedError
    from .extractors import save_image_rgb

    if not bundle.backend.supports_attention():
        raise UnsupportedError("backend declares no attention taps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = mean_normalized_attention(bundle, code, timesteps=timesteps, seed=seed)
    arr = values.numpy()
    tensorfile.write_tensor(out / "attention.psfm", arr.transpose(1, 2, 0))
    written = [out / "attention.psfm"]
    for m, present in enumerate(code.present):
        if not present:
            continue
        gray = np.clip(np.round(arr[m] * 255.0), 0, 255).astype(np.uint8)
        rgb = np.stack([gray] * 3, axis=-1)
        path = out / f"channel_{m}.png"
        save_image_rgb(rgb, path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Attention-weight sweep harness


PAPER_LAMBDA_GRID = (0.1, 0.01, 0.001, 0.0001, 0.00001)


def lambda_sweep(
    lambdas: tuple[float, ...] = PAPER_LAMBDA_GRID,
    seeds: tuple[int, ...] = (0,),
    train_steps: int = 300,
    suite_size: int = 24,
    sample_steps: int = 25,
    learning_rate: float = 5e-3,
    pretrain_steps: int = 800,
    use_projector: bool = True,
    embedder=None,
    progress: bool = False,
) -> list[dict]:
    """Train the toy task at each attention weight and score it.

    One row per lambda: EMR/CoSim on a conventional (sources=1) suite,
    plus an embedding-similarity column that reads "unavailable" without
    an embedder adapter. The unconditionally pretrained base is shared
    across lambdas within a seed, so rows differ only in the weight.
    """
    import copy

    from .synth import pretrained_toy_backend, toy_block_task
    from .training import TrainConfig, Trainer, build_training_set

    per_lambda: dict[float, dict[str, list]] = {
        lam: {"emr": [], "cosim": [], "embed": []} for lam in lambdas
    }
    for seed in seeds:
        task = toy_block_task(seed=seed)
        base = pretrained_toy_backend(task.images, seed=seed,
                                      pretrain_steps=pretrain_steps)
        for lam in lambdas:
            backend = copy.deepcopy(base)
            samples = build_training_set(
                list(zip(task.image_ids, task.images)),
                task.dictionary, task.extractor, backend,
            )
            cfg = TrainConfig(
                max_steps=train_steps, seed=seed, lambda_attn=lam,
                learning_rate=learning_rate, image_size=32,
                use_projector=use_projector, checkpoint_every=0,
            )
            trainer = Trainer(samples, task.dictionary, backend, cfg)
            trainer.run(progress=progress)
            bundle = ModelBundle(
                trainer.token_dict, trainer.projector, backend,
                trainer.template, cfg,
                {"M": task.dictionary.M, "K": task.dictionary.K,
                 "dim": task.dictionary.dim},
            )
            suite = sample_composition_suite(
                task.tagged_codes(), n=suite_size, n_pool=len(task.image_ids),
                sources_per_item=1, seed=seed,
            )
            report = eval_suite(suite, bundle, task.dictionary, task.extractor,
                                steps=sample_steps, seed=seed)
            per_lambda[lam]["emr"].append(report["overall"]["emr"])
            per_lambda[lam]["cosim"].append(report["overall"]["cosim"])
            if embedder is not None:
                reals = [task.images[task.image_ids.index(it.base_id)]
                         for it in suite[:4]]
                gens = [generate(it.code, bundle, seed=seed, steps=sample_steps).image
                        for it in suite[:4]]
                per_lambda[lam]["embed"].append(
                    embedding_similarity(reals, gens, embedder)["value"])
    rows = []
    for lam in lambdas:
        stats = per_lambda[lam]
        row = {
            "lambda_attn": lam,
            "emr": float(np.mean(stats["emr"])),
            "cosim": float(np.mean(stats["cosim"])),
            "embedding_similarity": float(np.mean(stats["embed"]))
            if stats["embed"] else "unavailable",
        }
        rows.append(row)
        if progress:
            print(f"lambda={lam}: emr={row['emr']:.3f} cosim={row['cosim']:.3f}")
    return rows
