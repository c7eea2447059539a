"""Training losses: denoising reconstruction, attention normalization,
and the entropy (binary cross-entropy) attention regularizer.

The attention maps gathered per pseudo-token are averaged over tapped
layers, normalized per grid cell across the present channels, and pushed
toward the part masks. Channels absent from an image are held at exactly
zero and excluded from every reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .discovery import PartMaskSet
from .errors import NonFiniteTensorError, ValidationError

CLAMP_EPS = 1e-6
DEFAULT_LAMBDA_ATTN = 0.01


@dataclass
class AttentionStack:
    """Raw per-layer, per-channel attention maps at the tap resolution.

    maps: (L, M+1, h, w), non-negative and finite. Channels with
    present=False carry all-zero maps.
    """

    maps: torch.Tensor
    present: tuple[bool, ...]

    def __post_init__(self):
        if self.maps.ndim != 4:
            raise ValidationError(f"attention maps must be 4-d, got {self.maps.shape}")
        if self.maps.shape[1] != len(self.present):
            raise ValidationError("present flags do not match channel count")
        if not torch.isfinite(self.maps).all():
            raise NonFiniteTensorError("non-finite attention values")
        if (self.maps < 0).any():
            raise ValidationError("attention values must be non-negative")

    @property
    def n_layers(self) -> int:
        return self.maps.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]

    def flip_horizontal(self) -> "AttentionStack":
        return AttentionStack(torch.flip(self.maps, dims=[-1]), self.present)


@dataclass
class NormalizedAttention:
    """Layer-averaged attention normalized per cell over present channels.

    At every cell the present channels sum to 1; absent channels are
    exactly zero.
    """

    values: torch.Tensor  # (M+1, h, w)
    present: tuple[bool, ...]

    def flip_horizontal(self) -> "NormalizedAttention":
        return NormalizedAttention(torch.flip(self.values, dims=[-1]), self.present)


def normalize_attention(stack: AttentionStack) -> NormalizedAttention:
    """Average over layers, then normalize per cell over present channels.

    Cells where every present channel is zero fall back to the uniform
    distribution 1/#present, keeping the per-cell sum exactly 1.
    """
    present = torch.tensor(stack.present, dtype=torch.bool, device=stack.maps.device)
    n_present = int(present.sum())
    if n_present == 0:
        raise ValidationError("cannot normalize: all channels absent")
    mean = stack.maps.mean(dim=0)  # (C, h, w)
    mean = mean * present.view(-1, 1, 1).to(mean.dtype)
    denom = mean.sum(dim=0, keepdim=True)  # (1, h, w)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    uniform = torch.full_like(mean, 1.0 / n_present)
    values = torch.where(denom > 0, mean / safe, uniform)
    values = values * present.view(-1, 1, 1).to(values.dtype)
    return NormalizedAttention(values, stack.present)


def _mask_tensor(masks: PartMaskSet, like: torch.Tensor) -> torch.Tensor:
    import numpy as np

    return torch.from_numpy(np.ascontiguousarray(masks.masks)).to(like.dtype)


def attention_loss(
    norm: NormalizedAttention,
    masks: PartMaskSet,
    eps: float = CLAMP_EPS,
    reduction: str = "mean",
) -> torch.Tensor:
    """Binary cross-entropy between normalized attention and part masks.

    reduction="mean" averages over present channels and all grid cells;
    "cellsum" averages over present channels but sums over grid cells,
    which keeps the term competitive with the reconstruction loss at the
    standard weighting (the regularizer visibly shifts quality metrics
    when its weight is scaled up, which only holds with a summed spatial
    reduction). Attention is clamped to [eps, 1-eps] before the logs, so
    the value is always finite and non-negative.
    """
    values = norm.values
    if masks.masks.shape[0] != values.shape[0]:
        raise ValidationError("mask channel count does not match attention")
    if (masks.grid_h, masks.grid_w) != (values.shape[1], values.shape[2]):
        raise ValidationError(
            f"mask grid {(masks.grid_h, masks.grid_w)} does not match attention "
            f"grid {tuple(values.shape[1:])}"
        )
    if tuple(masks.present) != tuple(norm.present):
        raise ValidationError("presence flags disagree between masks and attention")
    if reduction not in ("mean", "cellsum"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    present_idx = [m for m, p in enumerate(norm.present) if p]
    s = _mask_tensor(masks, values)[present_idx]
    a = values[present_idx].clamp(eps, 1.0 - eps)
    bce = -(s * torch.log(a) + (1.0 - s) * torch.log(1.0 - a))
    if reduction == "cellsum":
        return bce.sum(dim=(1, 2)).mean()
    return bce.mean()


def mse_attention_loss(norm: NormalizedAttention, masks: PartMaskSet) -> torch.Tensor:
    """Mean-square variant, kept only as an ablation flag."""
    if tuple(masks.present) != tuple(norm.present):
        raise ValidationError("presence flags disagree between masks and attention")
    present_idx = [m for m, p in enumerate(norm.present) if p]
    s = _mask_tensor(masks, norm.values)[present_idx]
    return ((norm.values[present_idx] - s) ** 2).mean()


def diffusion_loss(noise: torch.Tensor, predicted: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if noise.shape != predicted.shape:
        raise ValidationError(
            f"shape mismatch: noise {tuple(noise.shape)} vs predicted "
            f"{tuple(predicted.shape)}"
        )
    return ((noise - predicted) ** 2).mean()


def total_loss(l_ldm, l_attn, lambda_attn: float):
    """Weighted objective: reconstruction plus lambda times attention."""
    return l_ldm + lambda_attn * l_attn


@dataclass
class LossReport:
    l_ldm: float
    l_attn: float
    lambda_attn: float
    l_total: float = 0.0

    def __post_init__(self):
        self.l_total = self.l_ldm + self.lambda_attn * self.l_attn
