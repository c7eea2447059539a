"""Backend contract shared by the bundled toy denoiser and remote clients."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch

from ..losses import AttentionStack
from ..tokens import PromptEmbedding


@runtime_checkable
class DenoiserBackend(Protocol):
    """Anything that predicts noise for a latent under a prompt.

    Implementations declare their latent shape, the attention-tap grid,
    and the tapped layer names. predict_noise returns the noise estimate
    together with the raw softmax attention gathered at pseudo-token
    positions for every tapped layer.
    """

    latent_shape: tuple[int, int, int]
    attention_grid: tuple[int, int]
    attention_layer_names: list[str]
    embed_dim: int

    def predict_noise(
        self, z_t: torch.Tensor, t: int, prompt: PromptEmbedding
    ) -> tuple[torch.Tensor, AttentionStack]:
        ...

    def supports_attention(self) -> bool:
        ...
