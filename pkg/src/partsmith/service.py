"""Mixer HTTP service: read-only access to a frozen dictionary and
checkpoint, with composition, asynchronous generation jobs, and
attention heatmaps for the browser UI.

Artifacts are never mutated; generated images live in memory keyed by
job id. The job queue is the only synchronized structure.
"""

from __future__ import annotations

import base64
import io
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .composition import generate
from .discovery import PromptCode, SubConceptDictionary, load_dictionary
from .errors import BackendUnavailableError, DependencyError
from .training import ModelBundle, load_bundle

SERVICE_VERSION = "1"


class ComposeRequest(BaseModel):
    base: dict
    replacements: list[dict] = []


class GenerateRequest(BaseModel):
    code: dict
    seed: int = 0
    steps: int = 25
    style_suffix: str = ""


@dataclass
class Job:
    job_id: str
    status: str = "queued"          # queued | running | done | failed
    error: str | None = None
    code: dict | None = None
    seed: int = 0
    style_suffix: str = ""
    image_png: bytes | None = None
    attention: list[tuple[int, bytes]] = field(default_factory=list)


def _code_diagnostics(doc: dict, dictionary: SubConceptDictionary) -> list[dict]:
    """Channel-level problems with a submitted code; empty when valid."""
    problems = []
    pairs = doc.get("pairs")
    present = doc.get("present")
    if not isinstance(pairs, list) or not isinstance(present, list):
        return [{"channel": None, "problem": "code needs 'pairs' and 'present' lists"}]
    if len(pairs) != dictionary.n_channels or len(present) != dictionary.n_channels:
        return [{
            "channel": None,
            "problem": f"expected {dictionary.n_channels} channels, "
                       f"got {len(pairs)} pairs / {len(present)} flags",
        }]
    for i, (pair, pres) in enumerate(zip(pairs, present)):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            problems.append({"channel": i, "problem": "pair must be [channel, split]"})
            continue
        m, k = pair
        if m != i:
            problems.append({"channel": i, "problem": f"pair channel {m} out of order"})
        if pres and not (1 <= int(k) <= dictionary.K):
            problems.append(
                {"channel": i, "problem": f"split {k} outside 1..{dictionary.K}"}
            )
    if not any(bool(p) for p in present):
        problems.append({"channel": None, "problem": "no present channels"})
    return problems


def _parse_code(doc: dict, dictionary: SubConceptDictionary) -> PromptCode:
    problems = _code_diagnostics(doc, dictionary)
    if problems:
        raise HTTPException(status_code=422, detail={"code_problems": problems})
    return PromptCode.from_json(doc)


def _png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _gray_png(values: np.ndarray) -> bytes:
    from PIL import Image

    gray = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    bundle: ModelBundle,
    dictionary: SubConceptDictionary,
    concurrency: int = 2,
    sample_steps: int = 25,
) -> FastAPI:
    app = FastAPI(title="partsmith mixer service", version=SERVICE_VERSION)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    jobs: dict[str, Job] = {}
    jobs_lock = threading.Lock()
    executor = ThreadPoolExecutor(max_workers=max(concurrency, 1))
    backend_down = {"flag": False}

    def _run_job(job: Job):
        with jobs_lock:
            job.status = "running"
        try:
            code = PromptCode.from_json(job.code)
            result = generate(code, bundle, seed=job.seed, steps=sample_steps,
                              style_suffix=job.style_suffix, dictionary=dictionary)
            if result.image is None:
                raise DependencyError("backend returned no decodable image")
            png = _png_bytes(result.image)
            attention = []
            if result.attention_mean is not None:
                values = result.attention_mean.numpy()
                for m, pres in enumerate(result.present):
                    if pres:
                        attention.append((m, _gray_png(values[m])))
            with jobs_lock:
                job.image_png = png
                job.attention = attention
                job.status = "done"
        except BackendUnavailableError as exc:
            backend_down["flag"] = True
            with jobs_lock:
                job.status = "failed"
                job.error = f"backend unavailable: {exc}"
        except Exception as exc:  # surfaced via job status, never silent
            with jobs_lock:
                job.status = "failed"
                job.error = str(exc)

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "version": SERVICE_VERSION}

    @app.get("/v1/dictionary")
    def get_dictionary():
        channels = []
        for m in range(dictionary.n_channels):
            channels.append({
                "index": m,
                "name": "background" if m == 0 else f"part-{m}",
                "splits": dictionary.K,
            })
        return {
            "M": dictionary.M,
            "K": dictionary.K,
            "dim": dictionary.dim,
            "dataset_name": dictionary.metadata.get("dataset_name", ""),
            "channels": channels,
        }

    @app.post("/v1/compose")
    def compose_code(req: ComposeRequest):
        code = _parse_code(req.base, dictionary)
        for rep in req.replacements:
            if "channel" not in rep or "split" not in rep:
                raise HTTPException(
                    status_code=422,
                    detail={"code_problems": [
                        {"channel": rep.get("channel"),
                         "problem": "replacement needs 'channel' and 'split'"}]},
                )
            m, k = int(rep["channel"]), int(rep["split"])
            if not (0 <= m <= dictionary.M) or not (1 <= k <= dictionary.K):
                raise HTTPException(
                    status_code=422,
                    detail={"code_problems": [
                        {"channel": m, "problem": f"({m},{k}) outside dictionary"}]},
                )
            code = code.replace(m, k)
        return {"code": code.to_json(), "prompt": code.to_prompt_string()}

    @app.post("/v1/generate", status_code=202)
    def submit_generate(req: GenerateRequest):
        if backend_down["flag"]:
            raise HTTPException(status_code=503, detail="backend unavailable",
                                headers={"Retry-After": "5"})
        _parse_code(req.code, dictionary)
        job = Job(job_id=uuid.uuid4().hex, code=req.code, seed=req.seed,
                  style_suffix=req.style_suffix)
        with jobs_lock:
            jobs[job.job_id] = job
        executor.submit(_run_job, job)
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/v1/jobs/{job_id}")
    def job_status(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
            if job is None:
                raise HTTPException(status_code=404, detail="unknown job id")
            doc = {
                "job_id": job.job_id,
                "status": job.status,
                "seed": job.seed,
                "code": job.code,
                "style_suffix": job.style_suffix,
                "error": job.error,
            }
            if job.status == "done" and job.image_png is not None:
                doc["image_png_base64"] = base64.b64encode(job.image_png).decode()
        return doc

    @app.get("/v1/attention/{job_id}")
    def job_attention(job_id: str):
        with jobs_lock:
            job = jobs.get(job_id)
            if job is None:
                raise HTTPException(status_code=404, detail="unknown job id")
            if job.status != "done":
                raise HTTPException(status_code=409,
                                    detail=f"job is {job.status}, not done")
            channels = [
                {"channel": m, "png_base64": base64.b64encode(png).decode()}
                for m, png in job.attention
            ]
        return {"job_id": job_id, "channels": channels}

    return app


def build_service(ckpt_dir: str | Path, dict_dir: str | Path,
                  backend_spec: str | None = None, concurrency: int = 2) -> FastAPI:
    from .cli import _resolve_backend

    dictionary = load_dictionary(dict_dir)
    backend = None
    if backend_spec and not backend_spec.startswith("toy"):
        backend = _resolve_backend(backend_spec)
    bundle = load_bundle(ckpt_dir, backend=backend)
    return create_app(bundle, dictionary, concurrency=concurrency)
