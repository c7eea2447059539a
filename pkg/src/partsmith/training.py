"""Optimization loop: learn the token table, projector, and adapters by
reconstructing training latents from their tagged codes.

Only those three parameter groups train; the denoiser base stays frozen.
Checkpoints capture parameters, optimizer state, and RNG state so an
interrupted run resumes bit-identically.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import tensorfile
from .discovery import PartMaskSet, PromptCode, SubConceptDictionary, downsample_masks, tag_image
from .errors import NonFiniteLossError, NonFiniteTensorError, ValidationError
from .losses import (
    DEFAULT_LAMBDA_ATTN,
    LossReport,
    attention_loss,
    diffusion_loss,
    mse_attention_loss,
    normalize_attention,
    total_loss,
)
from .denoiser.lora import attach_lora, lora_parameters
from .tokens import Projector, TokenDictionary, embed_code, template_embeddings

CHECKPOINT_FORMAT = "partsmith-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Training recipe; defaults follow the reference full-scale setup."""

    batch_size: int = 2
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    lambda_attn: float = DEFAULT_LAMBDA_ATTN
    horizontal_flip: bool = True
    image_size: int = 512
    seed: int = 0
    attn_loss: str = "bce"          # "mse" kept as an ablation flag
    attn_reduction: str = "cellsum"  # "mean" follows the module contract
    use_projector: bool = True
    lora_rank: int = 4
    lora_alpha: float = 4.0
    grad_accum: int = 1
    log_every: int = 100
    checkpoint_every: int = 1000
    max_steps: int | None = None
    embed_dim: int = 32
    hidden_dim: int | None = None   # projector width, default 2*embed_dim

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.grad_accum) < 1:
            raise ValidationError("batch_size, epochs, grad_accum must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be > 0, weight_decay >= 0")
        if self.lambda_attn < 0:
            raise ValidationError("lambda_attn must be >= 0")
        if self.attn_loss not in ("bce", "mse"):
            raise ValidationError(f"unknown attn_loss {self.attn_loss!r}")
        if self.attn_reduction not in ("mean", "cellsum"):
            raise ValidationError(f"unknown attn_reduction {self.attn_reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        return TrainConfig(**{k: v for k, v in doc.items() if k in known})

    @staticmethod
    def from_toml(path: str | Path) -> "TrainConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # py3.10
            import tomli as tomllib
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        flat = dict(doc.get("train", doc))
        return TrainConfig.from_dict(flat)


@dataclass
class TrainingSample:
    image_id: str
    latent: torch.Tensor            # (C, h, w) float32
    code: PromptCode
    masks: PartMaskSet              # at the backend attention grid

    def __post_init__(self):
        if tuple(self.code.present) != tuple(self.masks.present):
            raise ValidationError(
                f"{self.image_id}: code/mask presence flags disagree"
            )


def build_training_set(
    images: list[tuple[str, np.ndarray]],
    dictionary: SubConceptDictionary,
    extractor,
    backend,
) -> list[TrainingSample]:
    """Tag each image, resample masks to the attention grid, encode latents."""
    samples = []
    for image_id, image in images:
        fm = extractor.extract(image, image_id)
        code, masks = tag_image(fm, dictionary)
        masks = downsample_masks(masks, backend.attention_grid)
        # Resampling can erase a small part; keep code consistent with it.
        if tuple(masks.present) != tuple(code.present):
            pairs = list(code.pairs)
            code = PromptCode(tuple(pairs), tuple(masks.present))
        latent = backend.encode_image(image)
        samples.append(TrainingSample(image_id, latent, code, masks))
    return samples


def module_weight_hash(module: torch.nn.Module, skip_lora: bool = True) -> str:
    """Digest of the frozen base weights, for frozen-base assertions."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        if skip_lora and (".down" in name or ".up" in name):
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Single-writer optimization loop over one backend and sample set."""

    def __init__(
        self,
        samples: list[TrainingSample],
        dictionary: SubConceptDictionary,
        backend,
        cfg: TrainConfig,
        attach_adapters: bool = True,
    ):
        if not samples:
            raise ValidationError("no training samples")
        if cfg.lambda_attn > 0 and not backend.supports_attention():
            raise ValidationError(
                "attention loss requested but the backend declares no attention "
                "taps; rerun with lambda_attn=0 or a tapped backend"
            )
        self.samples = samples
        self.cfg = cfg
        self.backend = backend
        self.dictionary_meta = {"M": dictionary.M, "K": dictionary.K, "dim": dictionary.dim}
        self.template = template_embeddings(cfg.embed_dim, seed=cfg.seed)
        self.token_dict = TokenDictionary(
            dictionary.M,
            dictionary.K,
            cfg.embed_dim,
            seed=cfg.seed,
            init_mean=self.template.mean(dim=0),
        )
        self.projector = Projector(
            cfg.embed_dim,
            hidden_dim=cfg.hidden_dim,
            seed=cfg.seed + 1,
            identity=not cfg.use_projector,
        )
        if attach_adapters:
            attach_lora(backend, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed + 2)
        self._params = self._parameter_list()
        self.optimizer = torch.optim.AdamW(
            self._params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        self.generator = torch.Generator().manual_seed(cfg.seed + 3)
        self.step = 0
        self.epoch = 0
        self.cursor = 0
        self.perm: list[int] = []
        self.history: list[LossReport] = []
        self.dump_dir: Path | None = None

    # -- parameters -----------------------------------------------------

    def _parameter_list(self) -> list[torch.nn.Parameter]:
        params = [self.token_dict.table]
        if not self.projector.identity:
            params += [self.projector.w1, self.projector.b1,
                       self.projector.w2, self.projector.b2]
        params += list(lora_parameters(self.backend))
        return params

    # -- one optimizer step ---------------------------------------------

    def _sample_losses(self, sample: TrainingSample):
        cfg = self.cfg
        latent = sample.latent
        masks = sample.masks
        if cfg.horizontal_flip:
            flip = bool(
                torch.rand(1, generator=self.generator).item() < 0.5
            )
            if flip:
                latent = torch.flip(latent, dims=[-1])
                masks = masks.flip_horizontal()
        t = int(
            torch.randint(
                0, self.backend.schedule.num_steps, (1,), generator=self.generator
            ).item()
        )
        noise = torch.empty_like(latent).normal_(generator=self.generator)
        z_t = self.backend.schedule.add_noise(latent, t, noise)
        prompt = embed_code(sample.code, self.token_dict, self.projector,
                            template=self.template)
        eps_hat, stack = self.backend.predict_noise(z_t, t, prompt)
        l_ldm = diffusion_loss(noise, eps_hat)
        if cfg.lambda_attn > 0:
            norm = normalize_attention(stack)
            if cfg.attn_loss == "mse":
                l_attn = mse_attention_loss(norm, masks)
            else:
                l_attn = attention_loss(norm, masks, reduction=cfg.attn_reduction)
        else:
            l_attn = torch.zeros((), dtype=l_ldm.dtype)
        return l_ldm, l_attn, z_t, t

    def train_step(self, batch: list[TrainingSample]) -> LossReport:
        cfg = self.cfg
        self.optimizer.zero_grad(set_to_none=True)
        l_ldm_total = 0.0
        l_attn_total = 0.0
        micro_batches = np.array_split(np.arange(len(batch)), cfg.grad_accum)
        micro_batches = [mb for mb in micro_batches if len(mb)]
        for mb in micro_batches:
            l_ldm = 0.0
            l_attn = 0.0
            diagnostics = []
            try:
                for idx in mb:
                    s_ldm, s_attn, z_t, t = self._sample_losses(batch[idx])
                    l_ldm = l_ldm + s_ldm
                    l_attn = l_attn + s_attn
                    diagnostics.append((batch[idx].image_id, t, z_t))
                l_ldm = l_ldm / len(batch)
                l_attn = l_attn / len(batch)
                loss = total_loss(l_ldm, l_attn, cfg.lambda_attn)
                finite = bool(torch.isfinite(loss))
            except NonFiniteTensorError:
                finite = False
                loss = None
                # Forward blew up before losses; dump the raw batch latents.
                diagnostics = [(batch[idx].image_id, -1, batch[idx].latent)
                               for idx in mb]
            if not finite:
                ids = [batch[idx].image_id for idx in mb]
                dump = self._dump_batch(diagnostics, ids)
                raise NonFiniteLossError(
                    f"non-finite loss at step {self.step}; batch dumped to {dump}",
                    dump_path=str(dump),
                )
            loss.backward()
            l_ldm_total += float(l_ldm.detach())
            l_attn_total += float(l_attn.detach())
        self.optimizer.step()
        self.step += 1
        report = LossReport(l_ldm_total, l_attn_total, cfg.lambda_attn)
        self.history.append(report)
        return report

    def _dump_batch(self, diagnostics, batch_ids: list[str]) -> Path:
        root = self.dump_dir or Path.cwd()
        dump_dir = root / f"nonfinite_step{self.step}"
        dump_dir.mkdir(parents=True, exist_ok=True)
        meta = {"step": self.step, "batch": batch_ids, "items": []}
        for image_id, t, z_t in diagnostics:
            name = f"{image_id}_t{t}.psfm"
            arr = z_t.detach().cpu().float().numpy()
            tensorfile.write_tensor(dump_dir / name, arr.transpose(1, 2, 0))
            meta["items"].append({"image_id": image_id, "t": t, "latent": name})
        (dump_dir / "dump.json").write_text(json.dumps(meta, indent=2))
        return dump_dir

    # -- epoch/step driver ----------------------------------------------

    def _next_batch(self) -> list[TrainingSample]:
        n = len(self.samples)
        if self.cursor >= len(self.perm):
            if self.perm:
                self.epoch += 1
            self.perm = torch.randperm(n, generator=self.generator).tolist()
            self.cursor = 0
        batch_idx = self.perm[self.cursor : self.cursor + self.cfg.batch_size]
        self.cursor += len(batch_idx)
        return [self.samples[i] for i in batch_idx]

    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        per_epoch = -(-len(self.samples) // self.cfg.batch_size)
        return per_epoch * self.cfg.epochs

    def run(self, out_dir: str | Path | None = None,
            progress: bool = False) -> list[LossReport]:
        if out_dir is not None:
            self.dump_dir = Path(out_dir)
        target = self.total_steps()
        while self.step < target:
            report = self.train_step(self._next_batch())
            if out_dir is not None and self.cfg.checkpoint_every > 0 \
                    and self.step % self.cfg.checkpoint_every == 0 \
                    and self.step < target:
                save_checkpoint(self, Path(out_dir))
            if progress and self.step % max(self.cfg.log_every, 1) == 0:
                print(f"step {self.step}/{target} "
                      f"l_total={report.l_total:.5f} l_ldm={report.l_ldm:.5f}")
        if out_dir is not None:
            save_checkpoint(self, Path(out_dir))
            write_history_csv(self.history, Path(out_dir) / "training_log.csv")
        return self.history


def write_history_csv(history: list[LossReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_ldm", "l_attn", "lambda_attn", "l_total"])
        for i, r in enumerate(history, start=1):
            writer.writerow([i, r.l_ldm, r.l_attn, r.lambda_attn, r.l_total])


# ---------------------------------------------------------------------------
# Checkpointing


def _named_blocks(trainer: Trainer) -> list[tuple[str, torch.nn.Parameter]]:
    names = ["tokens.table"]
    params = [trainer.token_dict.table]
    if not trainer.projector.identity:
        names += ["projector.w1", "projector.b1", "projector.w2", "projector.b2"]
        params += [trainer.projector.w1, trainer.projector.b1,
                   trainer.projector.w2, trainer.projector.b2]
    module = getattr(trainer.backend, "module", trainer.backend)
    from .denoiser.lora import LoraLinear

    for mod_name, sub in module.named_modules():
        if isinstance(sub, LoraLinear):
            safe = mod_name.replace(".", "_")
            names += [f"lora.{safe}.down", f"lora.{safe}.up"]
            params += [sub.down, sub.up]
    return list(zip(names, params))


def _tensor_block(arr: torch.Tensor) -> np.ndarray:
    a = arr.detach().cpu().float().numpy()
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        a = a.reshape(a.shape[0], -1)
    return a


def _base_blocks(backend) -> list[tuple[str, torch.nn.Parameter]]:
    """Frozen base weights of the backend module (pretrained at build)."""
    module = getattr(backend, "module", None)
    if module is None:
        return []
    return [
        (f"base.{name}", p)
        for name, p in module.named_parameters()
        if not (name.endswith(".down") or name.endswith(".up"))
    ]


def save_checkpoint(trainer: Trainer, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "blocks").mkdir(parents=True, exist_ok=True)
    blocks = {}
    named = _named_blocks(trainer) + _base_blocks(trainer.backend)
    for name, param in named:
        fname = name.replace(".", "_") + ".psfm"
        tensorfile.write_matrix(out / "blocks" / fname, _tensor_block(param))
        blocks[name] = {
            "file": f"blocks/{fname}",
            "shape": list(param.shape),
        }
    opt_meta = {}
    for name, param in named:
        state = trainer.optimizer.state.get(param, {})
        if state:
            for key in ("exp_avg", "exp_avg_sq"):
                fname = name.replace(".", "_") + f".{key}.psfm"
                tensorfile.write_matrix(out / "blocks" / fname, _tensor_block(state[key]))
                blocks[f"opt.{name}.{key}"] = {
                    "file": f"blocks/{fname}",
                    "shape": list(param.shape),
                }
            step_t = state["step"]
            opt_meta[name] = float(step_t if not isinstance(step_t, torch.Tensor)
                                   else step_t.item())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": trainer.step,
        "epoch": trainer.epoch,
        "cursor": trainer.cursor,
        "perm": trainer.perm,
        "config": trainer.cfg.to_dict(),
        "dictionary": trainer.dictionary_meta,
        "backend": {
            "latent_shape": list(trainer.backend.latent_shape),
            "attention_grid": list(trainer.backend.attention_grid),
            "embed_dim": trainer.backend.embed_dim,
        },
        "rng": {
            "torch_generator": base64.b64encode(
                trainer.generator.get_state().numpy().tobytes()
            ).decode("ascii"),
        },
        "optimizer_steps": opt_meta,
        "blocks": blocks,
        "history_tail": [asdict(r) for r in trainer.history[-5:]],
    }
    (out / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(
    ckpt_dir: str | Path,
    samples: list[TrainingSample],
    dictionary: SubConceptDictionary,
    backend,
) -> Trainer:
    """Rebuild a Trainer mid-run; parameters, optimizer moments, and RNG
    state restore bit-identically."""
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "checkpoint.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{ckpt} is not a checkpoint directory")
    cfg = TrainConfig.from_dict(manifest["config"])
    trainer = Trainer(samples, dictionary, backend, cfg)

    named = dict(_named_blocks(trainer) + _base_blocks(backend))
    for name, spec in manifest["blocks"].items():
        if name.startswith("opt."):
            continue
        if name not in named:
            raise ValidationError(f"checkpoint block {name!r} has no target")
        flat = tensorfile.read_matrix(ckpt / spec["file"])
        target = named[name]
        with torch.no_grad():
            target.copy_(torch.from_numpy(flat.reshape(spec["shape"]).copy()))
    # Optimizer moments; states are created lazily, so install directly.
    for name, param in dict(_named_blocks(trainer)).items():
        key_avg = f"opt.{name}.exp_avg"
        if key_avg in manifest["blocks"]:
            spec = manifest["blocks"][key_avg]
            exp_avg = tensorfile.read_matrix(ckpt / spec["file"]).reshape(spec["shape"])
            spec2 = manifest["blocks"][f"opt.{name}.exp_avg_sq"]
            exp_avg_sq = tensorfile.read_matrix(ckpt / spec2["file"]).reshape(spec2["shape"])
            trainer.optimizer.state[param] = {
                "step": torch.tensor(manifest["optimizer_steps"][name]),
                "exp_avg": torch.from_numpy(exp_avg.copy()),
                "exp_avg_sq": torch.from_numpy(exp_avg_sq.copy()),
            }
    state_bytes = base64.b64decode(manifest["rng"]["torch_generator"])
    trainer.generator.set_state(
        torch.from_numpy(np.frombuffer(state_bytes, dtype=np.uint8).copy())
    )
    trainer.step = manifest["step"]
    trainer.epoch = manifest["epoch"]
    trainer.cursor = manifest["cursor"]
    trainer.perm = list(manifest["perm"])
    trainer.history = [LossReport(**{k: r[k] for k in ("l_ldm", "l_attn", "lambda_attn")})
                       for r in manifest.get("history_tail", [])]
    return trainer


# ---------------------------------------------------------------------------
# Inference bundle: trained parameters without the optimizer machinery.


@dataclass
class ModelBundle:
    """Everything generation/evaluation needs from a finished run."""

    token_dict: TokenDictionary
    projector: Projector
    backend: object
    template: torch.Tensor
    cfg: TrainConfig
    dictionary_meta: dict
    checkpoint_dir: Path | None = None

    def embed(self, code: PromptCode, style_suffix: str = ""):
        return embed_code(code, self.token_dict, self.projector,
                          template=self.template, style_suffix=style_suffix,
                          template_seed=self.cfg.seed)


def load_bundle(ckpt_dir: str | Path, backend=None) -> ModelBundle:
    """Load a checkpoint for inference.

    When backend is None, a toy backend matching the recorded geometry is
    built; remote backends must be passed in explicitly (their adapters
    live server-side).
    """
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "checkpoint.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{ckpt} is not a checkpoint directory")
    cfg = TrainConfig.from_dict(manifest["config"])
    meta = manifest["dictionary"]
    template = template_embeddings(cfg.embed_dim, seed=cfg.seed)
    token_dict = TokenDictionary(meta["M"], meta["K"], cfg.embed_dim, seed=cfg.seed,
                                 init_mean=template.mean(dim=0))
    projector = Projector(cfg.embed_dim, hidden_dim=cfg.hidden_dim,
                          seed=cfg.seed + 1, identity=not cfg.use_projector)
    own_backend = backend is None
    if own_backend:
        from .denoiser import build_toy_backend

        b_meta = manifest["backend"]
        grid = tuple(b_meta["attention_grid"])
        backend = build_toy_backend(
            image_size=grid[0] * 2,
            latent_channels=b_meta["latent_shape"][0],
            embed_dim=b_meta["embed_dim"],
            seed=cfg.seed,
        )
    if own_backend or getattr(backend, "module", None) is not None:
        attach_lora(backend, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed + 2)

    named: dict[str, torch.nn.Parameter] = {"tokens.table": token_dict.table}
    if not projector.identity:
        named.update({
            "projector.w1": projector.w1, "projector.b1": projector.b1,
            "projector.w2": projector.w2, "projector.b2": projector.b2,
        })
    module = getattr(backend, "module", None)
    if module is not None:
        from .denoiser.lora import LoraLinear

        for mod_name, sub in module.named_modules():
            if isinstance(sub, LoraLinear):
                safe = mod_name.replace(".", "_")
                named[f"lora.{safe}.down"] = sub.down
                named[f"lora.{safe}.up"] = sub.up
        named.update(dict(_base_blocks(backend)))
    for name, spec in manifest["blocks"].items():
        if name.startswith("opt."):
            continue
        if name not in named:
            continue  # e.g. remote backend without local adapters
        flat = tensorfile.read_matrix(ckpt / spec["file"])
        with torch.no_grad():
            named[name].copy_(torch.from_numpy(flat.reshape(spec["shape"]).copy()))
    return ModelBundle(token_dict, projector, backend, template, cfg, meta,
                       checkpoint_dir=ckpt)
