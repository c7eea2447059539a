import hashlib

import numpy as np
import pytest
import torch

from partsmith.denoiser import (
    NoiseSchedule,
    ToyLatentCodec,
    build_toy_backend,
    sinusoidal_embedding,
)
from partsmith.discovery import PromptCode
from partsmith.errors import ValidationError
from partsmith.losses import diffusion_loss
from partsmith.tokens import Projector, TokenDictionary, embed_code, template_embeddings


def make_prompt(backend, M=2, K=2, seed=0, dtype=torch.float32):
    d = TokenDictionary(M=M, K=K, embed_dim=backend.embed_dim, seed=seed)
    proj = Projector(backend.embed_dim, seed=seed + 1)
    if dtype != torch.float32:
        d.table.data = d.table.data.to(dtype)
        for p in proj.parameters():
            p.data = p.data.to(dtype)
    code = PromptCode(tuple((m, 1) for m in range(M + 1)), tuple([True] * (M + 1)))
    template = template_embeddings(backend.embed_dim).to(dtype)
    return embed_code(code, d, proj, template=template), d, proj


# -- schedule ------------------------------------------------------------------


def test_add_noise_closed_form():
    sched = NoiseSchedule(num_steps=100)
    z0 = torch.randn(2, 3, 3, dtype=torch.float64)
    eps = torch.randn(2, 3, 3, dtype=torch.float64)
    t = 42
    got = sched.add_noise(z0, t, eps)
    ab = sched.alpha_bars[t]
    want = torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps
    assert torch.allclose(got, want, atol=1e-12)


def test_timestep_subset_descends_to_zero():
    sched = NoiseSchedule(num_steps=1000)
    ts = sched.timestep_subset(50)
    assert ts[0] == 999 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_bad_timestep_rejected():
    sched = NoiseSchedule(num_steps=10)
    with pytest.raises(ValidationError):
        sched.add_noise(torch.zeros(1, 2, 2), 10, torch.zeros(1, 2, 2))


def test_sinusoidal_embedding_shape():
    emb = sinusoidal_embedding(17, 64)
    assert emb.shape == (64,)
    with pytest.raises(ValidationError):
        sinusoidal_embedding(1, 7)


# -- toy denoiser ----------------------------------------------------------------


def test_parameter_budget():
    backend = build_toy_backend()
    assert backend.parameter_count() <= 2_000_000


def test_forward_deterministic_hash():
    backend = build_toy_backend(seed=3)
    prompt, _, _ = make_prompt(backend)
    z = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(0))
    h = []
    for _ in range(2):
        eps, _ = backend.predict_noise(z, 500, prompt)
        h.append(hashlib.sha256(eps.detach().numpy().tobytes()).hexdigest())
    assert h[0] == h[1]


def test_attention_rows_sum_to_one_before_gathering():
    backend = build_toy_backend(seed=1)
    prompt, _, _ = make_prompt(backend)
    tokens = prompt.token_vectors
    z = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(1))
    _, attns = backend.module(z, 100, tokens)
    for attn in attns:
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert (attn >= 0).all()


def test_predict_noise_contract():
    backend = build_toy_backend(seed=2)
    prompt, _, _ = make_prompt(backend, M=2)
    z = torch.randn(4, 16, 16)
    eps, stack = backend.predict_noise(z, 10, prompt)
    assert eps.shape == z.shape
    assert stack.maps.shape == (3, 3, 16, 16)
    assert stack.present == (True, True, True)


def test_absent_channel_has_zero_map():
    backend = build_toy_backend(seed=2)
    d = TokenDictionary(M=2, K=2, embed_dim=backend.embed_dim, seed=0)
    proj = Projector(backend.embed_dim, seed=1)
    code = PromptCode(((0, 1), (1, 1), (2, 1)), (True, False, True))
    prompt = embed_code(code, d, proj)
    _, stack = backend.predict_noise(torch.randn(4, 16, 16), 5, prompt)
    assert stack.maps[:, 1].abs().max() == 0.0
    assert stack.present == (True, False, True)


def test_shape_mismatch_rejected():
    backend = build_toy_backend()
    prompt, _, _ = make_prompt(backend)
    with pytest.raises(ValidationError):
        backend.predict_noise(torch.randn(4, 8, 8), 5, prompt)


def test_no_nan_on_bounded_inputs():
    # Lipschitz sanity: 10^4 random latents in [-3, 3] produce finite output.
    backend = build_toy_backend(image_size=8, d_model=16, embed_dim=8, seed=0)
    prompt, _, _ = make_prompt(backend, M=1, K=1)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for i in range(10_000):
            z = (torch.rand(4, 4, 4, generator=gen) * 6) - 3
            eps, stack = backend.predict_noise(z, int(i % 1000), prompt)
            assert torch.isfinite(eps).all()


def test_gradient_through_backend_matches_fd():
    # d diffusion_loss / d prompt vectors vs central differences (float64).
    backend = build_toy_backend(image_size=8, d_model=16, embed_dim=8, seed=4,
                                dtype=torch.float64)
    gen = torch.Generator().manual_seed(7)
    z = torch.randn(4, 4, 4, generator=gen, dtype=torch.float64)
    noise = torch.randn(4, 4, 4, generator=gen, dtype=torch.float64)
    prompt, _, _ = make_prompt(backend, M=1, K=1, dtype=torch.float64)
    vectors = prompt.token_vectors.detach().clone().requires_grad_()

    def forward(v):
        p2 = type(prompt)(
            token_vectors=v, positions=prompt.positions,
            channel_of_position=prompt.channel_of_position,
            present=prompt.present,
        )
        eps, _ = backend.predict_noise(z, 300, p2)
        return diffusion_loss(noise, eps)

    loss = forward(vectors)
    (grad,) = torch.autograd.grad(loss, vectors)
    h = 1e-5
    flat = vectors.detach().clone().view(-1)
    for idx in range(0, flat.numel(), 3):
        orig = flat[idx].item()
        flat[idx] = orig + h
        up = forward(flat.view_as(vectors)).item()
        flat[idx] = orig - h
        dn = forward(flat.view_as(vectors)).item()
        flat[idx] = orig
        fd = (up - dn) / (2 * h)
        an = grad.view(-1)[idx].item()
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-6)


# -- codec ------------------------------------------------------------------------


def test_codec_uniform_patch_roundtrip():
    codec = ToyLatentCodec()
    img = np.zeros((8, 8, 3))
    img[:] = (0.3, 0.6, 0.9)
    img[4:, :] = (0.8, 0.1, 0.2)
    back = codec.decode(codec.encode(img))
    assert np.abs(back - img).max() < 1e-6


def test_codec_shapes():
    codec = ToyLatentCodec()
    z = codec.encode(np.random.default_rng(0).random((32, 32, 3)))
    assert z.shape == (4, 16, 16)
    img = codec.decode(z)
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_codec_rejects_indivisible():
    codec = ToyLatentCodec()
    with pytest.raises(ValidationError):
        codec.encode(np.zeros((9, 8, 3)))
