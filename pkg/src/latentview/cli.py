"""Command-line entry point: ``latentview <verb> ...``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import Camera, load_cameras_json
from .data.cache import InversionCache, precompute_inversions
from .data.codec import PatchCodec
from .data.preprocess import to_float_image
from .data.scenes import import_colmap_dataset, lexicographic_split, read_dataset, write_dataset
from .data.synthetic import SYNTHETIC_CLASSES, generate_synthetic_dataset
from .diffusion import NoiseSchedule
from .evaluation import evaluate, synthesize
from .exceptions import ConfigurationError, DataError, LatentViewError
from .fusion import FusionConfig
from .priors import ExternalPriorAdapter, ExternalVAECodec, ToyDiffusionPrior
from .training import PairDataset, TRAIN_PRESETS, fixed_math, model_from_checkpoint, parse_config_file, train_loop
from .tunet import PRESETS, TUNet

log = logging.getLogger("latentview")

RUN_FILE = "run.json"
DEFAULTS = {
    "t_star": 600, "steps": 30, "workers": 1, "prior_train_steps": 2000, "pairs_per_scene": 16,
    "split_fractions": [0.9, 0.05, 0.05], "image_size": 128, "scenes": 60, "frames": 30,
}


def _opt(args, name):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return args.conf.get(name, DEFAULTS.get(name))


def _cache_dir(args) -> Path:
    d = args.cache_dir or os.environ.get("LATENTVIEW_CACHE")
    if not d:
        raise ConfigurationError("no cache directory: pass --cache-dir or set LATENTVIEW_CACHE")
    return Path(d)


def _load_run(cache_dir: Path) -> dict:
    p = cache_dir / RUN_FILE
    if not p.exists():
        raise ConfigurationError(f"{p} not found; run `latentview invert` first")
    return json.loads(p.read_text(encoding="utf-8"))


def _components(cache_dir: Path, run: dict):
    c = run["codec"]
    codec = PatchCodec(**c["params"]) if c["kind"] == "patch" else ExternalVAECodec(c["locator"])
    p = run["prior"]
    prior = ToyDiffusionPrior.load(cache_dir / p["path"]) if p["kind"] == "toy" else ExternalPriorAdapter(p["locator"])
    return codec, prior, NoiseSchedule.from_dict(run["schedule"])


def _select(scenes, split, fractions):
    if split == "all":
        return scenes
    parts = dict(zip(("train", "val", "test"), lexicographic_split([s.scene_id for s in scenes], fractions)))
    keep = set(parts[split])
    return [s for s in scenes if s.scene_id in keep]


def _read_camera(spec: str) -> Camera:
    """``cams.json`` holding one record, or ``cams.json#N`` for the N-th (1-based) frame of a list."""
    path, _, idx = spec.partition("#")
    try:
        if idx:
            return load_cameras_json(path)[int(idx) - 1]
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        return Camera.from_json_record(rec[0] if isinstance(rec, list) else rec)
    except (OSError, ValueError, KeyError, IndexError) as e:
        raise DataError(f"cannot read camera {spec!r}: {e}") from e


def _save_png(img, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)).save(path)


# -- verbs ---------------------------------------------------------------------

def cmd_make_synthetic(args):
    size = int(_opt(args, "image_size"))
    scenes = generate_synthetic_dataset(int(_opt(args, "scenes")), int(_opt(args, "frames")), args.seed, (size, size))
    write_dataset(scenes, args.out, SYNTHETIC_CLASSES)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_import_dataset(args):
    scenes = import_colmap_dataset(args.src, args.out, args.target)
    print(f"imported {len(scenes)} scenes into {args.out}")


def cmd_invert(args):
    cache_dir = _cache_dir(args)
    cache_dir.mkdir(parents=True, exist_ok=True)
    scenes = read_dataset(args.data)
    if not scenes:
        raise DataError(f"no scenes under {args.data}")
    t_star, steps = int(_opt(args, "t_star")), int(_opt(args, "steps"))
    if args.backbone:
        codec = ExternalVAECodec(args.backbone)
        prior = ExternalPriorAdapter(args.backbone)
        prior.check_codec(codec)
        schedule = NoiseSchedule()
        run = {"codec": {"kind": "vae", "locator": str(args.backbone)},
               "prior": {"kind": "ldm", "locator": str(args.backbone)}}
    else:
        h, w = scenes[0].frame(1).load().shape[:2]
        codec = PatchCodec(image_size=(h, w))
        schedule = NoiseSchedule()
        prior_path = cache_dir / "prior.pt"
        if prior_path.exists():
            prior = ToyDiffusionPrior.load(prior_path)
        else:
            train_ids = {s.scene_id for s in _select(scenes, "train", _opt(args, "split_fractions"))}
            lat = codec.encode(np.stack([f.load() for s in scenes if s.scene_id in train_ids for f in s.frames]))
            prior = ToyDiffusionPrior(train_steps=int(_opt(args, "prior_train_steps")), seed=args.seed,
                                      schedule=schedule).fit(lat)
            prior.save(prior_path)
        run = {"codec": {"kind": "patch", "params": codec.get_params()}, "prior": {"kind": "toy", "path": "prior.pt"}}
    run.update(t_star=t_star, steps=steps, schedule=schedule.to_dict(),
               latent_shape=list(codec.latent_shape), image_size=list(codec.image_size))
    (cache_dir / RUN_FILE).write_text(json.dumps(run, indent=1), encoding="utf-8")
    man = precompute_inversions(scenes, codec, prior, schedule, t_star, steps, cache_dir,
                                workers=int(_opt(args, "workers")))
    print(f"{len(man)} inverted frames in {cache_dir}")


def _pair_dataset(scenes, cache: InversionCache):
    return PairDataset(scenes, cache.mu_table([s.scene_id for s in scenes]))


def cmd_train(args):
    cache_dir = _cache_dir(args)
    run = _load_run(cache_dir)
    scenes = read_dataset(args.data)
    fr = _opt(args, "split_fractions")
    cache = InversionCache(cache_dir)
    train = _pair_dataset(_select(scenes, "train", fr), cache)
    val_scenes = _select(scenes, "val", fr)
    val = _pair_dataset(val_scenes, cache) if val_scenes else None
    keys = ("epochs", "batch_size", "learning_rate", "pairs_per_scene", "checkpoint_every", "cycle_fraction",
            "generic_class_prob", "grad_clip")
    over = {k: _opt(args, k) for k in keys if _opt(args, k) is not None}
    cfg = TRAIN_PRESETS[args.preset](seed=args.seed, t_star=run["t_star"], **over)
    n_classes = max(len(SYNTHETIC_CLASSES), max(s.class_id for s in scenes) + 1)
    torch.manual_seed(args.seed)
    model_cfg = dataclasses.replace(PRESETS[args.preset](n_classes), latent_size=tuple(run["latent_shape"][1:]),
                                    image_size=tuple(run["image_size"]))
    model = TUNet(model_cfg)
    ctx = fixed_math() if args.fixed_math else contextlib.nullcontext()
    with ctx:
        res = train_loop(cfg, train, model, args.out, val, resume_from=args.resume,
                         progress=lambda e, loss: print(f"epoch {e} loss {loss:.6f}", flush=True))
    print(f"trained {len(res.epoch_losses)} epochs; checkpoints in {args.out}")


def _fusion(args, run):
    return FusionConfig(strategy=args.strategy or "both", coefficient_sign=args.coefficient_sign or "minus",
                        t_star=run["t_star"])


def cmd_synthesize(args):
    cache_dir = _cache_dir(args)
    run = _load_run(cache_dir)
    codec, prior, schedule = _components(cache_dir, run)
    model = model_from_checkpoint(args.checkpoint)
    try:
        ref = to_float_image(np.asarray(Image.open(args.ref_image).convert("RGB")))
    except OSError as e:
        raise DataError(f"cannot read {args.ref_image}: {e}") from e
    res = synthesize(ref, _read_camera(args.ref_cam), _read_camera(args.tar_cam), args.class_id, model, prior,
                     codec, schedule, _fusion(args, run), run["steps"])
    _save_png(res.image, args.out)
    print(json.dumps({"out": str(args.out), "strategy": res.tag}))


def cmd_evaluate(args):
    cache_dir = _cache_dir(args)
    run = _load_run(cache_dir)
    codec, prior, schedule = _components(cache_dir, run)
    model = model_from_checkpoint(args.checkpoint)
    scenes = _select(read_dataset(args.data), args.split, _opt(args, "split_fractions"))
    cache = InversionCache(cache_dir)
    report = evaluate(model, scenes, prior, codec, schedule, _fusion(args, run),
                      pairs_per_scene=int(_opt(args, "pairs_per_scene")), seed=args.seed, cache=cache,
                      steps=run["steps"], workers=int(_opt(args, "workers")), out_dir=args.out)
    agg = report.aggregates()
    summary = {"count": report.count, "skipped": report.skipped}
    for k in ("psnr", "ssim", "copy_psnr"):
        if k in agg:
            summary[k] = agg[k]["mean"]
    print(json.dumps(summary))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentview", description="Single-image novel view synthesis in latent space.")
    p.add_argument("--config", help="flat key = value file supplying option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", help="inversion cache (default: $LATENTVIEW_CACHE)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("make-synthetic", help="render a synthetic multi-view dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--image-size", type=int)
    s.set_defaults(fn=cmd_make_synthetic)

    s = sub.add_parser("import-dataset", help="convert COLMAP-text scenes (<class>/<scene>/) to the dataset layout")
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target", type=int, default=512)
    s.set_defaults(fn=cmd_import_dataset)

    s = sub.add_parser("invert", help="DDIM-invert every frame into the cache")
    s.add_argument("--data", required=True)
    s.add_argument("--backbone", help="diffusers pipeline directory; omit to train a small prior on the data")
    s.add_argument("--t-star", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--workers", type=int)
    s.set_defaults(fn=cmd_invert)

    s = sub.add_parser("train", help="train the TUNet on cached inversions")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--pairs-per-scene", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--fixed-math", action="store_true", help="deterministic kernels")
    s.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("synthesize", cmd_synthesize, "synthesize one novel view"),
                          ("evaluate", cmd_evaluate, "score a checkpoint on a dataset split")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--strategy", choices=["a", "b", "both"])
        s.add_argument("--coefficient-sign", choices=["plus", "minus"])
        s.add_argument("--out", required=True)
        s.set_defaults(fn=fn)
        if name == "synthesize":
            s.add_argument("--ref-image", required=True)
            s.add_argument("--ref-cam", required=True, help="camera JSON, or cameras.json#N")
            s.add_argument("--tar-cam", required=True, help="camera JSON, or cameras.json#N")
            s.add_argument("--class", dest="class_id", type=int, default=0)
        else:
            s.add_argument("--data", required=True)
            s.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
            s.add_argument("--pairs-per-scene", type=int)
            s.add_argument("--workers", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.conf = parse_config_file(args.config) if args.config else {}
    except (OSError, ValueError) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return ConfigurationError.exit_code
    try:
        args.fn(args)
    except LatentViewError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigurationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
