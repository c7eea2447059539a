"""Bundled desk-scale denoiser.

A small transformer over latent grid positions with three cross-attention
blocks reading the prompt tokens, plus a fixed analytic pixel<->latent
codec, stands in for a full latent diffusion stack so the whole training
and evaluation loop runs on a laptop CPU in seconds.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..errors import ValidationError
from ..losses import AttentionStack
from ..tokens import PromptEmbedding
from .schedule import NoiseSchedule, sinusoidal_embedding

CODEC_SEED = 1234


class ToyLatentCodec:
    """Fixed patchwise linear map between RGB images and latents.

    Each patch_size x patch_size RGB patch projects onto latent_channels
    orthonormal directions (seeded constants); decoding applies the
    transpose and clips back to [0, 1]. The first three directions span
    the uniform-color subspace, so solid-color patches round-trip
    exactly. No parameters are learned.
    """

    def __init__(self, latent_channels: int = 4, patch_size: int = 2):
        self.latent_channels = latent_channels
        self.patch_size = patch_size
        n_px = patch_size * patch_size
        n_in = n_px * 3
        if latent_channels > n_in:
            raise ValidationError("latent channels exceed patch dimensionality")
        # Rows 0..2: normalized "same color in every pixel" directions.
        color_rows = np.zeros((3, n_in))
        for c in range(3):
            color_rows[c, c::3] = 1.0 / math.sqrt(n_px)
        gen = np.random.default_rng(CODEC_SEED)
        extra = gen.normal(size=(n_in, n_in))
        basis = np.concatenate([color_rows, extra.T], axis=0)
        q, _ = np.linalg.qr(basis.T)  # columns orthonormal, first 3 span colors
        self.proj = np.ascontiguousarray(q[:, :latent_channels].T)  # (C, n_in)
        self.scale = 2.0

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) floats in [0,1] (or uint8) -> (C, H/p, W/p) float32."""
        img = np.asarray(image)
        if img.dtype == np.uint8:
            img = img.astype(np.float64) / 255.0
        img = img.astype(np.float64)
        h, w, _ = img.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValidationError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = img.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, -1)
        z = (patches - 0.5) @ self.proj.T * self.scale
        return z.transpose(2, 0, 1).astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """(C, gh, gw) -> (H, W, 3) float64 image clipped to [0,1]."""
        z = np.asarray(latent, dtype=np.float64)
        c, gh, gw = z.shape
        p = self.patch_size
        patches = z.transpose(1, 2, 0) / self.scale @ self.proj + 0.5
        img = patches.reshape(gh, gw, p, p, 3).transpose(0, 2, 1, 3, 4)
        return np.clip(img.reshape(gh * p, gw * p, 3), 0.0, 1.0)


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention plus a small feed-forward."""

    def __init__(self, d_model: int, d_ctx: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValidationError("d_model must divide evenly into heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_ctx, d_model)
        self.v = nn.Linear(d_ctx, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, 2 * d_model)
        self.ff2 = nn.Linear(2 * d_model, d_model)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor):
        """x: (N, d_model) grid tokens; ctx: (T, d_ctx) prompt tokens.

        Returns the updated grid tokens and the (heads, N, T) softmax
        attention weights over prompt positions.
        """
        n = x.shape[0]
        t = ctx.shape[0]
        q = self.q(self.ln1(x)).view(n, self.n_heads, self.d_head).transpose(0, 1)
        k = self.k(ctx).view(t, self.n_heads, self.d_head).transpose(0, 1)
        v = self.v(ctx).view(t, self.n_heads, self.d_head).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.d_head)  # (H, N, T)
        attn = torch.softmax(logits, dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(n, -1)
        x = x + self.out(mixed)
        x = x + self.ff2(torch.relu(self.ff1(self.ln2(x))))
        return x, attn


def grid_position_embedding(grid: tuple[int, int], dim: int,
                            dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed 2-d sin/cos position features, one row per grid cell."""
    h, w = grid
    if dim % 4:
        raise ValidationError("position embedding dim must divide by 4")
    quarter = dim // 4
    freqs = torch.exp(
        -math.log(100.0) * torch.arange(quarter, dtype=torch.float64)
        / max(quarter - 1, 1)
    )
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freqs[None, :]
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freqs[None, :]
    rows = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, dim/2)
    cols = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, dim/2)
    emb = torch.cat(
        [
            rows[:, None, :].expand(h, w, dim // 2),
            cols[None, :, :].expand(h, w, dim // 2),
        ],
        dim=2,
    )
    return emb.reshape(h * w, dim).to(dtype)


class ToyDenoiser(nn.Module):
    """Grid transformer denoiser with cross-attention prompt conditioning.

    Grid tokens carry a fixed sinusoidal position embedding, so attention
    can bind prompt tokens to spatial regions at any noise level.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        grid: tuple[int, int] = (16, 16),
        d_model: int = 64,
        n_heads: int = 2,
        n_blocks: int = 3,
        embed_dim: int = 32,
        time_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.grid = grid
        self.embed_dim = embed_dim
        self.time_dim = time_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.in_proj = nn.Linear(latent_channels, d_model)
            self.time_proj = nn.Linear(time_dim, d_model)
            self.text_proj = nn.Linear(embed_dim, d_model)
            self.blocks = nn.ModuleList(
                [CrossAttentionBlock(d_model, d_model, n_heads) for _ in range(n_blocks)]
            )
            self.out_ln = nn.LayerNorm(d_model)
            self.out_proj = nn.Linear(d_model, latent_channels)
        self.register_buffer(
            "pos_emb", grid_position_embedding(grid, d_model), persistent=False
        )
        # The text pathway stands in for a frozen encoder.
        for p in self.text_proj.parameters():
            p.requires_grad_(False)

    def forward(self, z_t: torch.Tensor, t: int, tokens: torch.Tensor):
        """z_t: (C, h, w); tokens: (T, embed_dim).

        Returns (clean-latent estimate (C, h, w), [per-block (heads, N, T)
        attention]).
        """
        c, h, w = z_t.shape
        x = z_t.reshape(c, h * w).T  # (N, C)
        x = self.in_proj(x) + self.pos_emb.to(x.dtype)
        temb = sinusoidal_embedding(t, self.time_dim, dtype=x.dtype)
        x = x + self.time_proj(temb)
        ctx = self.text_proj(tokens)
        attns = []
        for block in self.blocks:
            x, attn = block(x, ctx)
            attns.append(attn)
        z0_hat = self.out_proj(self.out_ln(x)).T.reshape(c, h, w)
        return z0_hat, attns


class ToyDenoiserBackend:
    """DenoiserBackend over the toy module, codec, and DDPM schedule."""

    def __init__(
        self,
        module: ToyDenoiser | None = None,
        codec: ToyLatentCodec | None = None,
        schedule: NoiseSchedule | None = None,
        grid: tuple[int, int] = (16, 16),
        latent_channels: int = 4,
        embed_dim: int = 32,
        d_model: int = 64,
        n_heads: int = 2,
        n_blocks: int = 3,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        self.module = module or ToyDenoiser(
            latent_channels=latent_channels,
            grid=grid,
            d_model=d_model,
            n_heads=n_heads,
            n_blocks=n_blocks,
            embed_dim=embed_dim,
            seed=seed,
        )
        if dtype != torch.float32:
            self.module = self.module.to(dtype)
        self.dtype = dtype
        self.codec = codec if codec is not None else ToyLatentCodec(
            latent_channels=latent_channels
        )
        self.schedule = schedule or NoiseSchedule()
        self.attention_grid = grid
        self.latent_shape = (self.module.latent_channels, grid[0], grid[1])
        self.embed_dim = self.module.embed_dim
        self.attention_layer_names = [
            f"blocks.{i}.cross_attention" for i in range(len(self.module.blocks))
        ]

    def supports_attention(self) -> bool:
        return True

    def predict_noise(
        self, z_t: torch.Tensor, t: int, prompt: PromptEmbedding
    ) -> tuple[torch.Tensor, AttentionStack]:
        """Noise estimate plus the per-layer attention maps.

        The network itself regresses the clean latent; the backend turns
        that into a noise estimate through the schedule identity. The
        clean-latent parameterization keeps prompt conditioning strong at
        high noise levels, which desk-scale sampling depends on.
        """
        if tuple(z_t.shape) != self.latent_shape:
            raise ValidationError(
                f"latent shape {tuple(z_t.shape)} does not match backend "
                f"{self.latent_shape}"
            )
        tokens = prompt.token_vectors.to(self.dtype)
        z0_hat, attns = self.module(z_t.to(self.dtype), t, tokens)
        ab = self.schedule.alpha_bars[t].to(z0_hat.dtype)
        eps = (z_t.to(self.dtype) - torch.sqrt(ab) * z0_hat) / torch.sqrt(1.0 - ab)
        h, w = self.attention_grid
        n_channels = len(prompt.present)
        layers = []
        for attn in attns:
            per_head_mean = attn.mean(dim=0)  # (N, T)
            maps = per_head_mean.new_zeros(n_channels, h, w)
            for pos, ch in zip(prompt.positions, prompt.channel_of_position):
                maps[ch] = per_head_mean[:, pos].reshape(h, w)
            layers.append(maps)
        stack = AttentionStack(torch.stack(layers, dim=0), tuple(prompt.present))
        return eps, stack

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(self.codec.encode(image)).to(self.dtype)

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        return self.codec.decode(latent.detach().cpu().double().numpy())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


def build_toy_backend(
    image_size: int = 32,
    latent_channels: int = 4,
    embed_dim: int = 32,
    d_model: int = 64,
    n_heads: int = 2,
    n_blocks: int = 3,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ToyDenoiserBackend:
    """Toy backend sized for image_size with the analytic 2px-patch codec."""
    codec = ToyLatentCodec(latent_channels=latent_channels, patch_size=2)
    grid = (image_size // 2, image_size // 2)
    return ToyDenoiserBackend(
        codec=codec,
        grid=grid,
        latent_channels=latent_channels,
        embed_dim=embed_dim,
        d_model=d_model,
        n_heads=n_heads,
        n_blocks=n_blocks,
        seed=seed,
        dtype=dtype,
    )


def pretrain_backend(
    backend: ToyDenoiserBackend,
    latents: list[torch.Tensor],
    steps: int = 800,
    lr: float = 1e-3,
    batch_size: int = 4,
    seed: int = 0,
) -> ToyDenoiserBackend:
    """Unconditional base training, standing in for a pretrained denoiser.

    Trains every module parameter except the frozen text pathway on the
    given latents under a template-only prompt. Adapter-based
    personalization afterwards freezes this base, mirroring the
    pretrained-backbone setup the inversion stage assumes.
    """
    from ..losses import diffusion_loss
    from ..tokens import null_prompt

    if not latents:
        raise ValidationError("pretraining needs at least one latent")
    module = backend.module
    params = [p for name, p in module.named_parameters()
              if not name.startswith("text_proj")]
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=0.01)
    gen = torch.Generator().manual_seed(seed)
    prompt = null_prompt(backend.embed_dim, 1, dtype=backend.dtype)
    n = len(latents)
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        loss = 0.0
        for _ in range(batch_size):
            idx = int(torch.randint(0, n, (1,), generator=gen))
            z0 = latents[idx].to(backend.dtype)
            t = int(torch.randint(0, backend.schedule.num_steps, (1,), generator=gen))
            noise = torch.empty_like(z0).normal_(generator=gen)
            z_t = backend.schedule.add_noise(z0, t, noise)
            eps_hat, _ = backend.predict_noise(z_t, t, prompt)
            loss = loss + diffusion_loss(noise, eps_hat)
        (loss / batch_size).backward()
        optimizer.step()
    for p in params:
        p.requires_grad_(False)
    return backend
