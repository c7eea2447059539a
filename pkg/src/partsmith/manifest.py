"""Run manifests: every command records its inputs, seeds, config hash,
and artifact checksums, and links to the manifests of upstream runs so
any artifact on disk traces back through the chain that produced it."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

RUN_MANIFEST_NAME = "run_manifest.json"


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(params: dict) -> str:
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    params: dict,
    inputs: dict[str, str | Path] | None = None,
    artifacts: list[str | Path] | None = None,
    parents: list[str | Path] | None = None,
    seed: int | None = None,
) -> Path:
    """Write run_manifest.json into out_dir.

    artifacts are checksummed relative to out_dir when inside it;
    parents point at upstream run manifests (checksummed too).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "created_unix": int(time.time()),
        "seed": seed,
        "params": params,
        "config_hash": config_hash(params),
        "inputs": {},
        "artifacts": {},
        "parents": [],
    }
    for name, p in (inputs or {}).items():
        p = Path(p)
        doc["inputs"][name] = {
            "path": str(p),
            "sha256": sha256_file(p) if p.is_file() else None,
        }
    for p in artifacts or []:
        p = Path(p)
        try:
            rel = str(p.relative_to(out))
        except ValueError:
            rel = str(p)
        doc["artifacts"][rel] = sha256_file(p)
    for p in parents or []:
        p = Path(p)
        if p.is_dir():
            p = p / RUN_MANIFEST_NAME
        entry = {"path": str(p), "sha256": None}
        if p.is_file():
            entry["sha256"] = sha256_file(p)
        doc["parents"].append(entry)
    path = out / RUN_MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def read_run_manifest(dir_or_file: str | Path) -> dict:
    p = Path(dir_or_file)
    if p.is_dir():
        p = p / RUN_MANIFEST_NAME
    return json.loads(p.read_text())
