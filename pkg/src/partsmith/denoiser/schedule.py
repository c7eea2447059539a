"""DDPM noise schedule, sinusoidal time embedding, ancestral sampling."""

from __future__ import annotations

import math

import torch

from ..errors import ValidationError


def sinusoidal_embedding(t: int | torch.Tensor, dim: int,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard sin/cos position features over log-spaced frequencies."""
    if dim % 2:
        raise ValidationError("time embedding dim must be even")
    half = dim // 2
    t_val = float(t if not isinstance(t, torch.Tensor) else t.item())
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = t_val * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    return emb.to(dtype)


class NoiseSchedule:
    """Linear-beta DDPM schedule over num_steps timesteps."""

    def __init__(self, num_steps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.num_steps = num_steps
        self.betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    def add_noise(self, z0: torch.Tensor, t: int, noise: torch.Tensor) -> torch.Tensor:
        """Forward-process sample z_t from a clean latent and unit noise."""
        if not (0 <= t < self.num_steps):
            raise ValidationError(f"timestep {t} outside schedule of {self.num_steps}")
        ab = self.alpha_bars[t].to(z0.dtype)
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise

    def timestep_subset(self, steps: int) -> list[int]:
        """Evenly spaced descending timesteps for short sampling runs."""
        if steps < 1:
            raise ValidationError("need at least one sampling step")
        steps = min(steps, self.num_steps)
        ts = torch.linspace(self.num_steps - 1, 0, steps).round().long().tolist()
        out = []
        for t in ts:
            if not out or t < out[-1]:
                out.append(int(t))
        return out

    def ancestral_step(
        self,
        z_t: torch.Tensor,
        eps_hat: torch.Tensor,
        t: int,
        t_prev: int,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """One stochastic reverse step from t to t_prev (t_prev=-1 ends)."""
        ab_t = float(self.alpha_bars[t])
        x0 = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if t_prev < 0:
            return x0
        ab_prev = float(self.alpha_bars[t_prev])
        # Posterior variance for the subsequence (eta = 1, plain ancestral).
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        var = max(var, 0.0)
        dir_coeff = math.sqrt(max(1.0 - ab_prev - var, 0.0))
        mean = math.sqrt(ab_prev) * x0 + dir_coeff * eps_hat
        noise = torch.empty_like(z_t).normal_(generator=generator)
        return mean + math.sqrt(var) * noise
