"""Hybrid-code construction and the generation pipeline.

Hybrids follow the multi-source protocol: starting from a base image's
code, each extra source pops one not-yet-replaced channel index at
random and contributes its (channel, split) pair there, so every donor
alters exactly one distinct channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .discovery import PromptCode, SubConceptDictionary
from .errors import CapacityError, ValidationError
from .losses import normalize_attention
from .training import ModelBundle


def compose(
    base: PromptCode, donors: list[tuple[PromptCode, int]]
) -> PromptCode:
    """Replace the named channel of the base with each donor's pair.

    Channels outside the replacement set are untouched, channel order is
    preserved, and presence flags of untouched channels carry over.
    Replacing from a channel the donor lacks is an error.
    """
    result = base
    for donor, channel in donors:
        if donor.n_channels != base.n_channels:
            raise ValidationError("donor code has a different channel count")
        if not (0 <= channel < base.n_channels):
            raise ValidationError(f"channel {channel} out of range")
        if not donor.present[channel]:
            raise ValidationError(
                f"donor does not carry channel {channel} (absent)"
            )
        result = result.replace(channel, donor.split_of(channel))
    return result


def compose_virtual(
    base: PromptCode,
    donor_codes: list[PromptCode],
    rng: np.random.Generator,
) -> tuple[PromptCode, list[int]]:
    """Multi-source hybrid with pop-without-replacement channel choice.

    For each donor in order, a random index is popped from the remaining
    channel list and that channel is replaced by the donor's pair.
    Returns the hybrid and the popped channels (donor order).
    """
    if len(donor_codes) > base.n_channels:
        raise CapacityError(
            f"{len(donor_codes)} donors exceed {base.n_channels} channels"
        )
    remaining = list(range(base.n_channels))
    result = base
    popped: list[int] = []
    for donor in donor_codes:
        idx = int(rng.integers(len(remaining)))
        channel = remaining.pop(idx)
        popped.append(channel)
        if not donor.present[channel]:
            raise ValidationError(f"donor lacks channel {channel}")
        result = result.replace(channel, donor.split_of(channel))
    return result, popped


@dataclass
class SuiteItem:
    code: PromptCode
    sources: int
    base_id: str
    donors: list[tuple[str, int]] = field(default_factory=list)  # (image_id, channel)

    def to_json(self) -> dict:
        return {
            "code": self.code.to_json(),
            "sources": self.sources,
            "base_id": self.base_id,
            "donors": [[i, c] for i, c in self.donors],
        }

    @staticmethod
    def from_json(doc: dict) -> "SuiteItem":
        return SuiteItem(
            code=PromptCode.from_json(doc["code"]),
            sources=int(doc["sources"]),
            base_id=doc["base_id"],
            donors=[(i, int(c)) for i, c in doc.get("donors", [])],
        )


def sample_composition_suite(
    codes: list[tuple[str, PromptCode]],
    n: int = 500,
    n_pool: int = 500,
    sources_per_item: int = 4,
    seed: int = 0,
    dictionary: SubConceptDictionary | None = None,
) -> list[SuiteItem]:
    """Draw n hybrid codes from disjoint base and donor pools.

    sources_per_item=1 yields unmodified codes (the conventional suite).
    Donors for one item are distinct images, never the base image.
    """
    if not codes:
        raise CapacityError("no tagged codes to sample from")
    if sources_per_item < 1:
        raise ValidationError("sources_per_item must be >= 1")
    n_channels = codes[0][1].n_channels
    if sources_per_item - 1 > n_channels:
        raise CapacityError(
            f"{sources_per_item} sources need {sources_per_item - 1} donor "
            f"channels but codes carry only {n_channels}"
        )
    if dictionary is not None:
        for _, code in codes:
            _validate_code(code, dictionary)
    rng = np.random.default_rng(seed)
    ids = [i for i, _ in codes]
    by_id = dict(codes)

    n_pool = min(n_pool, len(codes))
    need_donor_pool = sources_per_item > 1
    if need_donor_pool and len(codes) < 2 * n_pool:
        n_pool = len(codes) // 2
        if n_pool < 1:
            raise CapacityError("not enough tagged images for disjoint pools")
    order = list(rng.permutation(len(ids)))
    base_pool = [ids[i] for i in order[:n_pool]]
    donor_pool = [ids[i] for i in order[n_pool : 2 * n_pool]] if need_donor_pool else []
    if need_donor_pool and len(donor_pool) < sources_per_item - 1:
        raise CapacityError("donor pool smaller than sources_per_item - 1")

    items = []
    for _ in range(n):
        base_id = base_pool[int(rng.integers(len(base_pool)))]
        base = by_id[base_id]
        if sources_per_item == 1:
            items.append(SuiteItem(base, 1, base_id))
            continue
        donor_ids = [
            donor_pool[j]
            for j in rng.choice(len(donor_pool), size=sources_per_item - 1,
                                replace=False)
        ]
        hybrid, popped = compose_virtual(base, [by_id[d] for d in donor_ids], rng)
        items.append(
            SuiteItem(hybrid, sources_per_item, base_id,
                      donors=list(zip(donor_ids, popped)))
        )
    return items


def save_suite(items: list[SuiteItem], path: str | Path,
               dictionary_checksum: str = "") -> None:
    doc = {
        "format": "partsmith-suite",
        "dictionary_checksum": dictionary_checksum,
        "items": [it.to_json() for it in items],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_suite(path: str | Path) -> list[SuiteItem]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "partsmith-suite":
        raise ValidationError(f"{path} is not a composition suite")
    return [SuiteItem.from_json(d) for d in doc["items"]]


def _validate_code(code: PromptCode, dictionary: SubConceptDictionary) -> None:
    if code.n_channels != dictionary.n_channels:
        raise ValidationError(
            f"code has {code.n_channels} channels, dictionary "
            f"{dictionary.n_channels}"
        )
    for (m, k), present in zip(code.pairs, code.present):
        if present and not (1 <= k <= dictionary.K):
            raise ValidationError(f"pair ({m},{k}) outside dictionary K={dictionary.K}")


@dataclass
class GenerationResult:
    latent: torch.Tensor
    image: np.ndarray | None
    prompt_string: str
    seed: int
    attention_mean: torch.Tensor | None = None  # (M+1, h, w), per-cell sum 1
    present: tuple[bool, ...] = ()


def generate(
    code: PromptCode,
    bundle: ModelBundle,
    seed: int = 0,
    steps: int = 50,
    style_suffix: str = "",
    dictionary: SubConceptDictionary | None = None,
    capture_attention: bool = True,
) -> GenerationResult:
    """Ancestral sampling from the trained model under a code.

    Deterministic under (code, seed, steps, suffix) on the toy backend.
    Returns the final latent, the decoded image when the backend has a
    codec, and the mean normalized attention over sampling steps.
    """
    if dictionary is not None:
        _validate_code(code, dictionary)
    M, K = bundle.dictionary_meta["M"], bundle.dictionary_meta["K"]
    for (m, k), present in zip(code.pairs, code.present):
        if present and not (1 <= k <= K):
            raise ValidationError(f"unknown pair ({m},{k}) for dictionary K={K}")
    backend = bundle.backend
    schedule = backend.schedule
    gen = torch.Generator().manual_seed(seed)
    prompt = bundle.embed(code, style_suffix=style_suffix)
    z = torch.empty(backend.latent_shape).normal_(generator=gen)
    timesteps = schedule.timestep_subset(steps)
    attn_sum = None
    n_attn = 0
    with torch.no_grad():
        for i, t in enumerate(timesteps):
            eps_hat, stack = backend.predict_noise(z, t, prompt)
            if capture_attention and backend.supports_attention():
                norm = normalize_attention(stack)
                attn_sum = norm.values if attn_sum is None else attn_sum + norm.values
                n_attn += 1
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
            z = schedule.ancestral_step(z, eps_hat, t, t_prev, generator=gen)
    image = None
    if hasattr(backend, "decode_latent"):
        image = backend.decode_latent(z)
    attention_mean = attn_sum / n_attn if attn_sum is not None else None
    return GenerationResult(
        latent=z,
        image=image,
        prompt_string=prompt.prompt_string,
        seed=seed,
        attention_mean=attention_mean,
        present=tuple(code.present),
    )
