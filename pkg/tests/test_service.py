import base64
import hashlib
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from partsmith.discovery import SubConceptDictionary
from partsmith.service import create_app


def wait_for_job(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        doc = client.get(f"/v1/jobs/{job_id}").json()
        if doc["status"] in ("done", "failed"):
            return doc
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} did not finish")


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    from conftest import train_toy
    from partsmith.synth import toy_block_task

    task = toy_block_task(seed=0)
    _, bundle, _, _ = train_toy(task, steps=60)
    app = create_app(bundle, task.dictionary, concurrency=2, sample_steps=6)
    return TestClient(app), task


def base_code_doc(task):
    return task.codes[task.image_ids[0]].to_json()


def test_health(service):
    client, task = service
    doc = client.get("/v1/health").json()
    assert doc["status"] == "ok"


def test_dictionary_payload(service):
    client, task = service
    doc = client.get("/v1/dictionary").json()
    assert doc["M"] == 2 and doc["K"] == 2
    assert len(doc["channels"]) == 3
    assert doc["channels"][0]["name"] == "background"
    assert all(ch["splits"] == 2 for ch in doc["channels"])


def test_dictionary_bird_scale():
    # Contract check at the full-scale dictionary size: 6 channels x 256.
    rng = np.random.default_rng(0)
    d = SubConceptDictionary(
        8, 5, 256,
        rng.normal(size=(2, 8)).astype(np.float32),
        rng.normal(size=(5, 8)).astype(np.float32),
        rng.normal(size=(6, 256, 8)).astype(np.float32),
    )

    class DummyBundle:
        backend = None

    app = create_app(DummyBundle(), d, concurrency=1)
    client = TestClient(app)
    doc = client.get("/v1/dictionary").json()
    assert doc["M"] == 5 and doc["K"] == 256
    assert len(doc["channels"]) == 6
    assert all(ch["splits"] == 256 for ch in doc["channels"])


def test_compose_empty_replacements_echo(service):
    client, task = service
    base = base_code_doc(task)
    doc = client.post("/v1/compose", json={"base": base, "replacements": []}).json()
    assert doc["code"] == base


def test_compose_applies_replacements(service):
    client, task = service
    base = base_code_doc(task)
    doc = client.post("/v1/compose", json={
        "base": base, "replacements": [{"channel": 1, "split": 2}],
    }).json()
    assert doc["code"]["pairs"][1] == [1, 2]


def test_invalid_code_422_with_diagnostics(service):
    client, task = service
    bad = {"pairs": [[0, 1], [1, 99], [2, 1]], "present": [True, True, True]}
    resp = client.post("/v1/compose", json={"base": bad, "replacements": []})
    assert resp.status_code == 422
    problems = resp.json()["detail"]["code_problems"]
    assert any(p["channel"] == 1 for p in problems)


def test_invalid_replacement_422(service):
    client, task = service
    base = base_code_doc(task)
    resp = client.post("/v1/compose", json={
        "base": base, "replacements": [{"channel": 9, "split": 1}],
    })
    assert resp.status_code == 422


def test_generate_job_roundtrip_and_determinism(service):
    client, task = service
    base = base_code_doc(task)
    images = []
    for _ in range(2):
        resp = client.post("/v1/generate", json={"code": base, "seed": 5})
        assert resp.status_code == 202
        doc = wait_for_job(client, resp.json()["job_id"])
        assert doc["status"] == "done", doc
        images.append(base64.b64decode(doc["image_png_base64"]))
    assert images[0] == images[1]


def test_attention_overlay_endpoint(service):
    client, task = service
    base = base_code_doc(task)
    resp = client.post("/v1/generate", json={"code": base, "seed": 1})
    job_id = resp.json()["job_id"]
    wait_for_job(client, job_id)
    doc = client.get(f"/v1/attention/{job_id}").json()
    n_present = sum(task.codes[task.image_ids[0]].present)
    assert len(doc["channels"]) == n_present
    for entry in doc["channels"]:
        png = base64.b64decode(entry["png_base64"])
        assert png[:4] == b"\x89PNG"


def test_unknown_job_404(service):
    client, task = service
    assert client.get("/v1/jobs/deadbeef").status_code == 404
    assert client.get("/v1/attention/deadbeef").status_code == 404


def test_generate_invalid_code_422(service):
    client, task = service
    bad = {"pairs": [[0, 0]], "present": [True]}
    resp = client.post("/v1/generate", json={"code": bad, "seed": 0})
    assert resp.status_code == 422


def test_backend_down_503_with_retry_after(tmp_path):
    from partsmith.errors import BackendUnavailableError
    from partsmith.synth import toy_block_task
    from conftest import train_toy
    import dataclasses

    task = toy_block_task(seed=0)
    _, bundle, _, _ = train_toy(task, steps=5)

    class DownBackend:
        latent_shape = bundle.backend.latent_shape
        attention_grid = bundle.backend.attention_grid
        embed_dim = bundle.backend.embed_dim
        attention_layer_names = bundle.backend.attention_layer_names
        schedule = bundle.backend.schedule

        def supports_attention(self):
            return True

        def predict_noise(self, z, t, prompt):
            raise BackendUnavailableError("connection refused")

    b2 = dataclasses.replace(bundle, backend=DownBackend())
    app = create_app(b2, task.dictionary, concurrency=1, sample_steps=3)
    client = TestClient(app)
    base = task.codes[task.image_ids[0]].to_json()
    resp = client.post("/v1/generate", json={"code": base, "seed": 0})
    assert resp.status_code == 202
    doc = wait_for_job(client, resp.json()["job_id"])
    assert doc["status"] == "failed"
    assert "unavailable" in doc["error"]
    resp2 = client.post("/v1/generate", json={"code": base, "seed": 0})
    assert resp2.status_code == 503
    assert resp2.headers.get("Retry-After") == "5"


def test_artifacts_read_only(tmp_path):
    # The service never mutates dictionary or checkpoint files.
    from conftest import train_toy
    from partsmith.discovery import save_dictionary, load_dictionary
    from partsmith.synth import toy_block_task
    from partsmith.training import save_checkpoint, load_bundle

    task = toy_block_task(seed=0)
    trainer, bundle, _, _ = train_toy(task, steps=5)
    dict_dir = tmp_path / "dict"
    ckpt_dir = tmp_path / "ckpt"
    save_dictionary(task.dictionary, dict_dir)
    save_checkpoint(trainer, ckpt_dir)

    def fingerprint():
        out = {}
        for p in sorted(list(dict_dir.rglob("*")) + list(ckpt_dir.rglob("*"))):
            if p.is_file():
                out[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return out

    before = fingerprint()
    app = create_app(load_bundle(ckpt_dir), load_dictionary(dict_dir),
                     concurrency=1, sample_steps=3)
    client = TestClient(app)
    base = task.codes[task.image_ids[0]].to_json()
    client.get("/v1/dictionary")
    resp = client.post("/v1/generate", json={"code": base, "seed": 2})
    wait_for_job(client, resp.json()["job_id"])
    assert fingerprint() == before
