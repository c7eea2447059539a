"""Low-rank adapters on the cross-attention projections.

Adapters attach to the query, key, value, and output projections of
every cross-attention block; base weights freeze. With the up factor
zero-initialized the adapted forward equals the base forward exactly,
so attaching never perturbs a model.
"""

from __future__ import annotations

from typing import Iterator

import torch
from torch import nn

from ..errors import UnsupportedError
from .toy import CrossAttentionBlock

ADAPTED_PROJECTIONS = ("q", "k", "v", "out")
DEFAULT_RANK = 4
DEFAULT_ALPHA = 4.0


class LoraLinear(nn.Module):
    """A frozen linear layer plus a scaled low-rank residual."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be positive")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        down = torch.empty(rank, base.in_features, dtype=torch.float32)
        down.normal_(0.0, 1.0 / rank, generator=generator)
        self.down = nn.Parameter(down.to(dtype))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.down.T @ self.up.T) * self.scaling


def _cross_attention_blocks(module: nn.Module) -> list[tuple[str, CrossAttentionBlock]]:
    return [
        (name, child)
        for name, child in module.named_modules()
        if isinstance(child, CrossAttentionBlock)
    ]


def attach_lora(backend, rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA,
                seed: int = 0):
    """Wrap q/k/v/out of every cross-attention block with adapters.

    All base parameters of the backend module freeze; only the adapter
    factors remain trainable. Returns the backend (mutated in place).
    """
    module = getattr(backend, "module", backend)
    blocks = _cross_attention_blocks(module)
    if not blocks:
        raise UnsupportedError("backend exposes no cross-attention projections")
    for p in module.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for _, block in blocks:
        for proj in ADAPTED_PROJECTIONS:
            base = getattr(block, proj)
            if isinstance(base, LoraLinear):
                raise UnsupportedError("adapters already attached")
            setattr(block, proj, LoraLinear(base, rank, alpha, generator=gen))
    return backend


def lora_parameters(backend) -> Iterator[nn.Parameter]:
    module = getattr(backend, "module", backend)
    for sub in module.modules():
        if isinstance(sub, LoraLinear):
            yield sub.down
            yield sub.up


def lora_parameter_count(backend) -> int:
    return sum(p.numel() for p in lora_parameters(backend))
