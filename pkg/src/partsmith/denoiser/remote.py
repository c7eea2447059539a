"""HTTP client for a full-scale denoiser service.

Wire protocol: JSON control messages over HTTP, tensors embedded as
base64-encoded PSFM blobs. Endpoints: GET /v1/capabilities and
POST /v1/predict_noise. Transient failures retry three times with
exponential backoff before surfacing as backend-unavailable.
"""

from __future__ import annotations

import base64
import time

import numpy as np
import torch

import httpx

from .. import tensorfile
from ..errors import BackendUnavailableError, ValidationError
from ..losses import AttentionStack
from ..tokens import PromptEmbedding

SUPPORTED_PROTOCOLS = ("1",)
MAX_RETRIES = 3


def tensor_to_b64(arr: np.ndarray) -> str:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    return base64.b64encode(tensorfile.to_bytes(arr)).decode("ascii")


def b64_to_tensor(text: str) -> np.ndarray:
    return tensorfile.from_bytes(base64.b64decode(text))


class RemoteDenoiserBackend:
    """DenoiserBackend speaking the JSON-over-HTTP tensor protocol."""

    def __init__(
        self,
        endpoint: str,
        auth_token: str | None = None,
        client: httpx.Client | None = None,
        backoff_base: float = 0.25,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        headers = {}
        if auth_token:
            headers["Authorization"] = f"Bearer {auth_token}"
        self._client = client or httpx.Client(headers=headers, timeout=timeout)
        self._own_client = client is None
        self._auth_headers = headers
        self._backoff_base = backoff_base
        caps = self._request("GET", "/v1/capabilities")
        offered = [str(v) for v in caps.get("protocol_versions", [])]
        common = [v for v in offered if v in SUPPORTED_PROTOCOLS]
        if not common:
            raise BackendUnavailableError(
                f"no common protocol version: server offers {offered}, "
                f"client supports {list(SUPPORTED_PROTOCOLS)}"
            )
        self.protocol_version = max(common)
        self.latent_shape = tuple(caps["latent_shape"])
        self.attention_grid = tuple(caps["attention_grid"])
        self.attention_layer_names = list(caps.get("attention_layers", []))
        self.embed_dim = int(caps["embed_dim"])

    def close(self):
        if self._own_client:
            self._client.close()

    def supports_attention(self) -> bool:
        return bool(self.attention_layer_names)

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = self.endpoint + path
        last_error: Exception | None = None
        for attempt in range(MAX_RETRIES + 1):
            try:
                resp = self._client.request(
                    method, url, json=payload, headers=self._auth_headers
                )
                if resp.status_code == 422:
                    raise ValidationError(f"backend rejected request: {resp.text}")
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server error {resp.status_code}",
                        request=resp.request,
                        response=resp,
                    )
                if resp.status_code >= 400:
                    raise BackendUnavailableError(
                        f"{url} -> {resp.status_code}: {resp.text}"
                    )
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_error = exc
                if attempt < MAX_RETRIES:
                    time.sleep(self._backoff_base * (2**attempt))
        raise BackendUnavailableError(
            f"{url} unreachable after {MAX_RETRIES} retries: {last_error}"
        )

    def predict_noise(
        self, z_t: torch.Tensor, t: int, prompt: PromptEmbedding
    ) -> tuple[torch.Tensor, AttentionStack]:
        if tuple(z_t.shape) != tuple(self.latent_shape):
            raise ValidationError(
                f"latent shape {tuple(z_t.shape)} does not match backend "
                f"{self.latent_shape}"
            )
        payload = {
            "version": self.protocol_version,
            "t": int(t),
            "latent": tensor_to_b64(z_t.detach().cpu().numpy()),
            "tokens": tensor_to_b64(prompt.token_vectors.detach().cpu().numpy()),
            "positions": list(prompt.positions),
            "channels": list(prompt.channel_of_position),
            "present": list(prompt.present),
        }
        doc = self._request("POST", "/v1/predict_noise", payload)
        noise = b64_to_tensor(doc["noise"])
        if noise.shape != tuple(self.latent_shape):
            raise ValidationError(
                f"backend returned noise shape {noise.shape}, expected "
                f"{self.latent_shape}"
            )
        eps = torch.from_numpy(noise.copy())
        attention = doc.get("attention")
        if attention is None:
            maps = torch.zeros(
                (max(len(self.attention_layer_names), 1), len(prompt.present))
                + tuple(self.attention_grid)
            )
            stack = AttentionStack(maps, tuple(prompt.present))
        else:
            layout = doc["attention_layout"]  # [L, C, h, w]
            flat = b64_to_tensor(attention)
            maps = torch.from_numpy(flat.copy().reshape(layout))
            stack = AttentionStack(maps, tuple(prompt.present))
        return eps, stack
