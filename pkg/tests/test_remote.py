import json

import httpx
import numpy as np
import pytest
import torch

from partsmith.denoiser.remote import (
    RemoteDenoiserBackend,
    b64_to_tensor,
    tensor_to_b64,
)
from partsmith.discovery import PromptCode
from partsmith.errors import BackendUnavailableError, ValidationError
from partsmith.tokens import Projector, TokenDictionary, embed_code

LATENT_SHAPE = (4, 8, 8)
GRID = (8, 8)


def capabilities_doc(versions=("1",), layers=("block0",)):
    return {
        "protocol_versions": list(versions),
        "latent_shape": list(LATENT_SHAPE),
        "attention_grid": list(GRID),
        "attention_layers": list(layers),
        "embed_dim": 16,
    }


def echo_handler(request: httpx.Request) -> httpx.Response:
    if request.url.path == "/v1/capabilities":
        return httpx.Response(200, json=capabilities_doc())
    if request.url.path == "/v1/predict_noise":
        doc = json.loads(request.content)
        latent = b64_to_tensor(doc["latent"])
        n_ch = len(doc["present"])
        attn = np.full((1 * n_ch, GRID[0], GRID[1]), 1.0, dtype=np.float32)
        return httpx.Response(200, json={
            "noise": tensor_to_b64(latent),  # echo
            "attention": tensor_to_b64(attn),
            "attention_layout": [1, n_ch, GRID[0], GRID[1]],
        })
    return httpx.Response(404)


def make_backend(handler, **kwargs):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteDenoiserBackend("http://backend.test", client=client,
                                 backoff_base=0.0, **kwargs)


def make_prompt(embed_dim=16):
    d = TokenDictionary(M=1, K=2, embed_dim=embed_dim, seed=0)
    proj = Projector(embed_dim, seed=0)
    code = PromptCode(((0, 1), (1, 2)), (True, True))
    return embed_code(code, d, proj)


def test_tensor_b64_roundtrip():
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    assert np.array_equal(b64_to_tensor(tensor_to_b64(arr)), arr)


def test_echo_roundtrip_shapes():
    backend = make_backend(echo_handler)
    assert backend.latent_shape == LATENT_SHAPE
    assert backend.supports_attention()
    prompt = make_prompt()
    z = torch.randn(*LATENT_SHAPE)
    eps, stack = backend.predict_noise(z, 3, prompt)
    assert eps.shape == z.shape
    assert torch.allclose(eps, z)  # echo server
    assert stack.maps.shape == (1, 2, 8, 8)


def test_version_mismatch_hard_error():
    def handler(request):
        return httpx.Response(200, json=capabilities_doc(versions=("2",)))

    with pytest.raises(BackendUnavailableError):
        make_backend(handler)


def test_version_negotiation_picks_common():
    def handler(request):
        if request.url.path == "/v1/capabilities":
            return httpx.Response(200, json=capabilities_doc(versions=("0", "1")))
        return httpx.Response(404)

    backend = make_backend(handler)
    assert backend.protocol_version == "1"


def test_retries_then_success():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] <= 2:
            return httpx.Response(503, text="warming up")
        return httpx.Response(200, json=capabilities_doc())

    backend = make_backend(handler)
    assert calls["n"] == 3


def test_retries_exhausted_unavailable():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        raise httpx.ConnectError("refused", request=request)

    with pytest.raises(BackendUnavailableError):
        make_backend(handler)
    assert calls["n"] == 4  # initial try plus 3 retries


def test_422_maps_to_validation_error():
    def handler(request):
        if request.url.path == "/v1/capabilities":
            return httpx.Response(200, json=capabilities_doc())
        return httpx.Response(422, text="bad code")

    backend = make_backend(handler)
    with pytest.raises(ValidationError):
        backend.predict_noise(torch.randn(*LATENT_SHAPE), 1, make_prompt())


def test_latent_shape_validated_locally():
    backend = make_backend(echo_handler)
    with pytest.raises(ValidationError):
        backend.predict_noise(torch.randn(4, 4, 4), 1, make_prompt())


def test_auth_header_sent():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("Authorization")
        return httpx.Response(200, json=capabilities_doc())

    client = httpx.Client(transport=httpx.MockTransport(handler))
    RemoteDenoiserBackend("http://backend.test", auth_token="secret",
                          client=client, backoff_base=0.0)
    assert seen["auth"] == "Bearer secret"
