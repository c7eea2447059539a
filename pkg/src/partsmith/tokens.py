"""Learnable token embeddings, the projection MLP, and prompt assembly.

Each (channel, split) pair owns one row of a learnable embedding table;
a two-layer MLP with ReLU maps rows to the pseudo-word vectors appended
after a fixed word template. Disabling the projector (identity mode)
recovers the conventional per-token inversion baseline.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from .discovery import PromptCode
from .errors import ValidationError

TEMPLATE_WORDS = ("a", "photo", "of", "a")


def token_index(m: int, k: int, K: int) -> int:
    """Row index for pair (m, k); splits are 1-based."""
    return m * K + (k - 1)


def _word_vector(word: str, dim: int, seed: int) -> torch.Tensor:
    # Stable per-word constant: the toy text pathway has no vocabulary,
    # so template/style words map to fixed seeded vectors.
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") % (2**62))
    return torch.randn(dim, generator=gen, dtype=torch.float64).to(torch.float32) * 0.1


def template_embeddings(
    dim: int, words: tuple[str, ...] = TEMPLATE_WORDS, seed: int = 0
) -> torch.Tensor:
    """Frozen word-template vectors standing in for a real text vocabulary."""
    return torch.stack([_word_vector(w, dim, seed) for w in words])


class TokenDictionary(nn.Module):
    """(M+1)*K learnable embedding rows, one per (channel, split) pair."""

    def __init__(self, M: int, K: int, embed_dim: int, seed: int = 0,
                 init_mean: torch.Tensor | None = None, init_noise: float = 0.01):
        super().__init__()
        self.M = M
        self.K = K
        self.embed_dim = embed_dim
        self.num_tokens = (M + 1) * K
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(self.num_tokens, embed_dim, generator=gen) * init_noise
        if init_mean is not None:
            table = table + init_mean.reshape(1, embed_dim).to(table.dtype)
        self.table = nn.Parameter(table)

    def index(self, m: int, k: int) -> int:
        if not (0 <= m <= self.M):
            raise ValidationError(f"channel {m} outside 0..{self.M}")
        if not (1 <= k <= self.K):
            raise ValidationError(f"split {k} outside 1..{self.K}")
        return token_index(m, k, self.K)

    def lookup(self, m: int, k: int) -> torch.Tensor:
        return self.table[self.index(m, k)]


class Projector(nn.Module):
    """Two affine layers with a ReLU between; output width equals input.

    identity=True turns the module into an exact pass-through, used by
    the no-projector ablation path.
    """

    def __init__(self, embed_dim: int, hidden_dim: int | None = None,
                 seed: int = 0, identity: bool = False):
        super().__init__()
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim or 2 * embed_dim
        self.identity = identity
        if identity:
            return
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(
            (torch.rand(self.hidden_dim, embed_dim, generator=gen) - 0.5) * 0.1
        )
        self.b1 = nn.Parameter(torch.zeros(self.hidden_dim))
        self.w2 = nn.Parameter(
            (torch.rand(embed_dim, self.hidden_dim, generator=gen) - 0.5) * 0.1
        )
        self.b2 = nn.Parameter(torch.zeros(embed_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.identity:
            return x
        h = torch.relu(x @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2


@dataclass
class PromptEmbedding:
    """Token vectors fed to the text pathway, plus pseudo-token bookkeeping.

    token_vectors: (T, embed_dim) = template words ++ one projected vector
    per present channel (channel order) [++ optional style-suffix words].
    positions[i] is the sequence index of the i-th pseudo-token and
    channel_of_position[i] its channel.
    """

    token_vectors: torch.Tensor
    positions: list[int]
    channel_of_position: list[int]
    present: tuple[bool, ...]
    prompt_string: str = ""
    style_suffix: str = ""

    def __post_init__(self):
        if len(self.positions) != len(self.channel_of_position):
            raise ValidationError("positions/channel mapping length mismatch")


def embed_code(
    code: PromptCode,
    dictionary: TokenDictionary,
    projector: Projector,
    template: torch.Tensor | None = None,
    style_suffix: str = "",
    template_seed: int = 0,
) -> PromptEmbedding:
    """Assemble the prompt embedding y for a code.

    Looks up each present (channel, split) row, projects it, and appends
    the result after the template embeddings in channel order. Absent
    channels contribute nothing. Style-suffix words are appended after
    the pseudo-tokens as additional frozen word vectors.
    """
    if template is None:
        template = template_embeddings(dictionary.embed_dim, seed=template_seed)
    if template.shape[-1] != dictionary.embed_dim:
        raise ValidationError("template width does not match embed dim")
    present_pairs = code.present_pairs()
    if not present_pairs:
        raise ValidationError("code has no present channels")

    rows = torch.stack([dictionary.lookup(m, k) for m, k in present_pairs])
    projected = projector(rows)
    parts = [template.to(projected.dtype), projected]
    if style_suffix:
        suffix_words = tuple(style_suffix.split())
        suffix = template_embeddings(
            dictionary.embed_dim, words=suffix_words, seed=template_seed
        ).to(projected.dtype)
        parts.append(suffix)
    vectors = torch.cat(parts, dim=0)
    base = template.shape[0]
    positions = [base + i for i in range(len(present_pairs))]
    channels = [m for m, _ in present_pairs]
    return PromptEmbedding(
        token_vectors=vectors,
        positions=positions,
        channel_of_position=channels,
        present=code.present,
        prompt_string="a photo of a " + code.to_prompt_string()
        + (f" {style_suffix}" if style_suffix else ""),
        style_suffix=style_suffix,
    )


def identity_baseline(
    code: PromptCode,
    dictionary: TokenDictionary,
    template: torch.Tensor | None = None,
    style_suffix: str = "",
    template_seed: int = 0,
) -> PromptEmbedding:
    """Conventional-inversion baseline: pseudo-vectors are raw table rows."""
    return embed_code(
        code,
        dictionary,
        Projector(dictionary.embed_dim, identity=True),
        template=template,
        style_suffix=style_suffix,
        template_seed=template_seed,
    )


def null_prompt(embed_dim: int, n_channels: int, template_seed: int = 0,
                dtype: torch.dtype = torch.float32) -> PromptEmbedding:
    """Template-only prompt with every channel absent.

    Used for unconditional passes (base pretraining, null conditioning).
    """
    template = template_embeddings(embed_dim, seed=template_seed).to(dtype)
    return PromptEmbedding(
        token_vectors=template,
        positions=[],
        channel_of_position=[],
        present=tuple([False] * n_channels),
        prompt_string="a photo of a",
    )
