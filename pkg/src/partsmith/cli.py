"""Command-line surface.

Every subcommand writes a run manifest (inputs, seed, config hash,
artifact checksums) next to its outputs; manifests of downstream runs
link to upstream ones. Exit codes: 0 success, 1 validation error,
2 dependency/backend error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import DependencyError, PartsmithError, ValidationError

BACKEND_URL_ENV = "PARTSMITH_BACKEND_URL"


def _resolve_backend(spec: str | None, embed_dim: int = 32, image_size: int = 32,
                     seed: int = 0):
    """toy | remote:URL | remote (URL from PARTSMITH_BACKEND_URL)."""
    from .denoiser import RemoteDenoiserBackend, build_toy_backend

    if spec is None:
        spec = "remote" if os.environ.get(BACKEND_URL_ENV) else "toy"
    if spec == "toy":
        return build_toy_backend(image_size=image_size, embed_dim=embed_dim, seed=seed)
    if spec.startswith("remote"):
        url = spec.partition(":")[2] or os.environ.get(BACKEND_URL_ENV, "")
        if not url:
            raise ValidationError(
                f"remote backend requested but no URL given (flag or {BACKEND_URL_ENV})"
            )
        return RemoteDenoiserBackend(url)
    raise ValidationError(f"unknown backend {spec!r}")


def _load_extractor_for(corpus):
    from .extractors import make_extractor

    info = dict(corpus.extractor_info or {})
    name = info.pop("name", "stub")
    return make_extractor(name, **info)


# -- subcommand implementations ----------------------------------------------


def cmd_extract(args) -> int:
    from . import synth
    from .extractors import StubColorExtractor, load_image_rgb
    from .features import CorpusEntry, FeatureCorpus, save_manifest, write_feature_map
    from .manifest import write_run_manifest

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        if args.synthetic != "toy-blocks":
            raise ValidationError(f"unknown synthetic preset {args.synthetic!r}")
        img_dir = Path(args.images) if args.images else out / "images"
        pairs = synth.write_toy_images(img_dir)
        extractor = StubColorExtractor(dim=64, patch_size=2, seed=7, length_scale=0.45)
        dataset = "toy-blocks"
    else:
        if not args.images:
            raise ValidationError("--images is required unless --synthetic is used")
        img_dir = Path(args.images)
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        pairs = [(p.stem, p) for p in sorted(img_dir.iterdir())
                 if p.suffix.lower() in exts]
        if not pairs:
            raise ValidationError(f"no images found in {img_dir}")
        extractor = StubColorExtractor(
            dim=args.dim, patch_size=args.patch_size, seed=args.seed
        )
        dataset = args.dataset_name or img_dir.name

    entries = []
    artifacts = []
    for image_id, path in pairs:
        fm = extractor.extract(load_image_rgb(path), image_id)
        fpath = out / f"{image_id}.psfm"
        write_feature_map(fm, fpath)
        artifacts.append(fpath)
        entries.append(CorpusEntry(image_id, fpath.name, fm.grid_h, fm.grid_w, fm.dim))
    corpus = FeatureCorpus(dataset, entries, root=out,
                           extractor_info=synth.extractor_info(extractor))
    save_manifest(corpus, out / "manifest.json")
    artifacts.append(out / "manifest.json")
    write_run_manifest(
        out, "extract",
        params={"dim": extractor.dim, "patch_size": extractor.patch_size,
                "seed": extractor.seed, "synthetic": args.synthetic or ""},
        inputs={"images": img_dir},
        artifacts=artifacts, seed=extractor.seed,
    )
    print(f"extracted {len(entries)} feature maps -> {out}")
    return 0


def cmd_discover(args) -> int:
    from .discovery import KMeansOptions, fit_hierarchy, save_dictionary, tag_image
    from .features import build_corpus
    from .manifest import write_run_manifest

    corpus = build_corpus(args.features)
    opts = KMeansOptions(max_iter=args.max_iter, tol=args.tol,
                         restarts=args.restarts, n_init=args.n_init)
    dictionary = fit_hierarchy(corpus, M=args.M, K=args.K, seed=args.seed, opts=opts)
    out = Path(args.out)
    save_dictionary(dictionary, out)
    tags = {}
    for fm in corpus.iter_maps():
        code, masks = tag_image(fm, dictionary)
        tags[fm.image_id] = {
            "code": code.to_json(),
            "prompt": code.to_prompt_string(),
        }
    (out / "tags.json").write_text(json.dumps(tags, indent=2, sort_keys=True))
    artifacts = [out / "dictionary.json", out / "fgbg.psfm", out / "parts.psfm",
                 out / "splits.psfm", out / "tags.json"]
    from dataclasses import asdict

    write_run_manifest(
        out, "discover",
        params={"M": args.M, "K": args.K, "seed": args.seed,
                "kmeans": asdict(opts)},
        inputs={"features": Path(args.features) / "manifest.json"},
        artifacts=artifacts,
        parents=[Path(args.features)],
        seed=args.seed,
    )
    print(f"dictionary M={args.M} K={args.K} -> {out}")
    return 0


def _load_tags(dict_dir: Path) -> dict:
    from .discovery import PromptCode

    tags_path = dict_dir / "tags.json"
    if not tags_path.exists():
        raise ValidationError(f"{tags_path} not found; run discover first")
    raw = json.loads(tags_path.read_text())
    return {k: PromptCode.from_json(v["code"]) for k, v in raw.items()}


def cmd_train(args) -> int:
    from .discovery import load_dictionary
    from .extractors import load_image_rgb
    from .features import build_corpus
    from .manifest import write_run_manifest
    from .reporting import render_training_curve
    from .training import TrainConfig, Trainer, build_training_set, load_checkpoint

    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.lambda_attn is not None:
        overrides["lambda_attn"] = args.lambda_attn
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_projector:
        overrides["use_projector"] = False
    if args.attn_loss:
        overrides["attn_loss"] = args.attn_loss
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})

    dictionary = load_dictionary(args.dict)
    corpus = build_corpus(args.features)
    extractor = _load_extractor_for(corpus)
    images_dir = Path(args.images) if args.images else None
    if images_dir is None:
        raise ValidationError("--images DIR is required (decoded RGB inputs)")
    images = []
    for e in corpus.entries:
        candidates = [images_dir / f"{e.image_id}{s}" for s in (".png", ".jpg", ".bmp")]
        path = next((c for c in candidates if c.exists()), None)
        if path is None:
            raise ValidationError(f"no image file for {e.image_id} in {images_dir}")
        images.append((e.image_id, load_image_rgb(path)))

    image_size = images[0][1].shape[0]
    spec = args.backend or ("remote" if os.environ.get(BACKEND_URL_ENV) else "toy")
    if spec == "toy":
        from .synth import pretrained_toy_backend

        backend = pretrained_toy_backend(
            [img for _, img in images], seed=cfg.seed,
            pretrain_steps=args.pretrain_steps, embed_dim=cfg.embed_dim,
            image_size=image_size,
        )
    else:
        backend = _resolve_backend(spec, embed_dim=cfg.embed_dim,
                                   image_size=image_size, seed=cfg.seed)
    samples = build_training_set(images, dictionary, extractor, backend)
    out = Path(args.out)
    if args.resume and (out / "checkpoint.json").exists():
        trainer = load_checkpoint(out, samples, dictionary, backend)
    else:
        trainer = Trainer(samples, dictionary, backend, cfg)
    history = trainer.run(out_dir=out, progress=True)
    rows = [{"step": i + 1, "l_ldm": r.l_ldm, "l_attn": r.l_attn,
             "l_total": r.l_total} for i, r in enumerate(history)]
    render_training_curve(rows, out / "training_curve.png")
    write_run_manifest(
        out, "train",
        params=cfg.to_dict(),
        inputs={"dictionary": Path(args.dict) / "dictionary.json",
                "features": Path(args.features) / "manifest.json"},
        artifacts=[out / "checkpoint.json", out / "training_log.csv",
                   out / "training_curve.png"],
        parents=[Path(args.dict), Path(args.features)],
        seed=cfg.seed,
    )
    print(f"trained {trainer.step} steps -> {out}")
    return 0


def cmd_compose(args) -> int:
    from .composition import compose
    from .manifest import write_run_manifest

    dict_dir = Path(args.dict)
    tags = _load_tags(dict_dir)
    if args.base not in tags:
        raise ValidationError(f"unknown base image id {args.base!r}")
    donors = []
    for spec in args.donor or []:
        image_id, _, channel = spec.rpartition(":")
        if not image_id:
            raise ValidationError(f"--donor expects ID:channel, got {spec!r}")
        if image_id not in tags:
            raise ValidationError(f"unknown donor image id {image_id!r}")
        donors.append((tags[image_id], int(channel)))
    code = compose(tags[args.base], donors)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(
        {"code": code.to_json(), "prompt": code.to_prompt_string(),
         "base": args.base, "donors": args.donor or []},
        indent=2, sort_keys=True))
    write_run_manifest(
        out.parent, "compose",
        params={"base": args.base, "donors": args.donor or []},
        inputs={"tags": dict_dir / "tags.json"},
        artifacts=[out],
        parents=[dict_dir],
    )
    print(f"composed code {code.to_prompt_string()} -> {out}")
    return 0


def _read_code(path: str | Path):
    from .discovery import PromptCode

    doc = json.loads(Path(path).read_text())
    return PromptCode.from_json(doc["code"] if "code" in doc else doc)


def cmd_generate(args) -> int:
    from .composition import generate
    from .extractors import save_image_rgb
    from .manifest import write_run_manifest
    from .training import load_bundle
    from . import tensorfile

    code = _read_code(args.code)
    backend = None
    if args.backend and not args.backend.startswith("toy"):
        backend = _resolve_backend(args.backend)
    bundle = load_bundle(args.ckpt, backend=backend)
    result = generate(code, bundle, seed=args.seed, steps=args.steps,
                      style_suffix=args.style_suffix or "")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    latent_path = out / f"latent_seed{args.seed}.psfm"
    tensorfile.write_tensor(
        latent_path, result.latent.numpy().transpose(1, 2, 0))
    artifacts.append(latent_path)
    if result.image is not None:
        img_path = out / f"image_seed{args.seed}.png"
        save_image_rgb(result.image, img_path)
        artifacts.append(img_path)
    (out / "prompt.txt").write_text(result.prompt_string + "\n")
    artifacts.append(out / "prompt.txt")
    write_run_manifest(
        out, "generate",
        params={"seed": args.seed, "steps": args.steps,
                "style_suffix": args.style_suffix or ""},
        inputs={"code": args.code, "checkpoint": Path(args.ckpt) / "checkpoint.json"},
        artifacts=artifacts,
        parents=[Path(args.ckpt)],
        seed=args.seed,
    )
    print(f"generated '{result.prompt_string}' -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .composition import load_suite, sample_composition_suite, save_suite
    from .discovery import dictionary_checksum, load_dictionary
    from .evaluation import eval_suite
    from .features import build_corpus
    from .manifest import write_run_manifest
    from .reporting import eval_report_rows, render_eval_figure, write_csv
    from .training import load_bundle

    if not Path(args.ckpt, "checkpoint.json").exists():
        raise ValidationError(f"no checkpoint at {args.ckpt}")
    dictionary = load_dictionary(args.dict)
    bundle = load_bundle(args.ckpt)
    report_path = Path(args.report)
    out_dir = report_path.parent if report_path.parent != Path("") else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.suite:
        items = load_suite(args.suite)
        suite_path = Path(args.suite)
    else:
        if not args.features:
            raise ValidationError("--features is required with --make-suite")
        tags = _load_tags(Path(args.dict))
        codes = sorted(tags.items())
        items = []
        for k in range(1, args.sources + 1):
            items.extend(sample_composition_suite(
                codes, n=args.make_suite, n_pool=args.n_pool or len(codes),
                sources_per_item=k, seed=args.seed, dictionary=dictionary))
        suite_path = out_dir / "suite.json"
        save_suite(items, suite_path, dictionary_checksum(args.dict))

    corpus = build_corpus(args.features) if args.features else None
    if corpus is None or corpus.extractor_info is None:
        raise ValidationError(
            "--features with extractor metadata is required to re-tag generations"
        )
    extractor = _load_extractor_for(corpus)
    report = eval_suite(items, bundle, dictionary, extractor,
                        steps=args.steps, seed=args.seed)
    report["suite"] = str(suite_path)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    csv_path = report_path.with_suffix(".csv")
    write_csv(eval_report_rows(report), csv_path)
    fig_path = report_path.with_suffix(".png")
    render_eval_figure(report, fig_path)
    write_run_manifest(
        out_dir, "eval",
        params={"steps": args.steps, "seed": args.seed},
        inputs={"suite": suite_path,
                "checkpoint": Path(args.ckpt) / "checkpoint.json",
                "dictionary": Path(args.dict) / "dictionary.json"},
        artifacts=[report_path, csv_path, fig_path],
        parents=[Path(args.ckpt), Path(args.dict)],
        seed=args.seed,
    )
    print(f"evaluated {report['n_samples']} samples: "
          f"EMR={report['overall']['emr']:.3f} CoSim={report['overall']['cosim']:.3f}")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import PAPER_LAMBDA_GRID, lambda_sweep
    from .manifest import write_run_manifest
    from .reporting import render_sweep_figure, write_csv

    lambdas = tuple(float(x) for x in args.lambdas.split(",")) if args.lambdas \
        else PAPER_LAMBDA_GRID
    seeds = tuple(int(x) for x in args.seeds.split(","))
    rows = lambda_sweep(
        lambdas=lambdas, seeds=seeds, train_steps=args.steps,
        suite_size=args.suite_size, use_projector=not args.no_projector,
        pretrain_steps=args.pretrain_steps, progress=True,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    write_csv(rows, out / "sweep.csv")
    render_sweep_figure(rows, out / "sweep.png")
    write_run_manifest(
        out, "sweep",
        params={"lambdas": list(lambdas), "seeds": list(seeds),
                "steps": args.steps, "suite_size": args.suite_size,
                "pretrain_steps": args.pretrain_steps,
                "use_projector": not args.no_projector},
        artifacts=[out / "sweep.json", out / "sweep.csv", out / "sweep.png"],
        seed=seeds[0],
    )
    for row in rows:
        print(f"lambda={row['lambda_attn']}: emr={row['emr']:.3f} "
              f"cosim={row['cosim']:.3f}")
    return 0


def cmd_dump_attn(args) -> int:
    from .evaluation import dump_attention
    from .manifest import write_run_manifest
    from .training import load_bundle

    code = _read_code(args.code)
    bundle = load_bundle(args.ckpt)
    out = Path(args.out)
    written = dump_attention(code, bundle, out, seed=args.seed)
    write_run_manifest(
        out, "dump-attn",
        params={"seed": args.seed},
        inputs={"code": args.code, "checkpoint": Path(args.ckpt) / "checkpoint.json"},
        artifacts=written,
        parents=[Path(args.ckpt)],
        seed=args.seed,
    )
    print(f"wrote {len(written)} attention artifacts -> {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_service

    app = build_service(args.ckpt, args.dict, backend_spec=args.backend,
                        concurrency=args.concurrency)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partsmith",
        description="Sub-concept discovery, token training, and hybrid generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract patch features from images")
    p.add_argument("--images", help="directory of RGB images")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-name", default="")
    p.add_argument("--synthetic", choices=["toy-blocks"],
                   help="render the bundled synthetic set instead of reading images")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("discover", help="fit the three-level sub-concept dictionary")
    p.add_argument("--features", required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--n-init", type=int, default=10)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("train", help="train tokens, projector, and adapters")
    p.add_argument("--features", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--images", help="directory of training images")
    p.add_argument("--backend", default=None, help="toy | remote:URL")
    p.add_argument("--config", help="TOML training config")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-attn", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--attn-loss", choices=["bce", "mse"], default=None)
    p.add_argument("--no-projector", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--pretrain-steps", type=int, default=800,
                   help="unconditional base pretraining for the toy backend")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compose", help="build a hybrid code from tagged images")
    p.add_argument("--base", required=True, help="base image id")
    p.add_argument("--donor", action="append", help="ID:channel, repeatable")
    p.add_argument("--dict", required=True, help="dictionary dir (with tags.json)")
    p.add_argument("--out", required=True, help="output code.json")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("generate", help="sample an image for a code")
    p.add_argument("--code", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--style-suffix", default="")
    p.add_argument("--backend", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="EMR/CoSim over a composition suite")
    p.add_argument("--suite", help="existing suite.json")
    p.add_argument("--make-suite", type=int, default=0,
                   help="items per source-count bucket to sample")
    p.add_argument("--sources", type=int, default=4)
    p.add_argument("--n-pool", type=int, default=0)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--features", help="feature dir (for extractor + codes)")
    p.add_argument("--report", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="attention-weight ablation on the toy task")
    p.add_argument("--lambdas", default="",
                   help="comma-separated; defaults to the standard five-point grid")
    p.add_argument("--seeds", default="0")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--suite-size", type=int, default=24)
    p.add_argument("--no-projector", action="store_true")
    p.add_argument("--pretrain-steps", type=int, default=800)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-attn", help="write per-channel attention heatmaps")
    p.add_argument("--code", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("serve", help="run the mixer HTTP service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--backend", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8111)
    p.add_argument("--concurrency", type=int, default=2)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PartsmithError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
