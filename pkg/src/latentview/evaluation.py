"""Full novel-view pipeline and the evaluation report."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import Camera
from .data.preprocess import preprocess_image, resize_for_protocol
from .data.scenes import build_pairs
from .diffusion import DEFAULT_STEPS, InvertedLatent, ddim_invert, ddim_sample
from .exceptions import ConfigurationError, DataError
from .fusion import FusionConfig, fuse_strategy_a, fuse_strategy_b, select_best
from .metrics import SSIM_METADATA, get_metric, psnr, ssim
from .tunet import CameraTensors

log = logging.getLogger(__name__)

PROTOCOL_SIZES = (256, 90)


@dataclass
class SynthesisResult:
    image: np.ndarray
    tag: str
    candidates: dict
    mu_hat: torch.Tensor


def check_t_star(fusion_cfg: FusionConfig, model=None, inverted_ref: InvertedLatent | None = None, prior=None):
    """Raise ConfigurationError unless every component agrees on the inversion timestep."""
    seen = {"fusion": fusion_cfg.t_star}
    if model is not None and getattr(model, "trained_t_star", None) is not None:
        seen["model"] = model.trained_t_star
    if inverted_ref is not None:
        seen["inverted reference"] = inverted_ref.t_star
    if len(set(seen.values())) > 1:
        raise ConfigurationError("t_star mismatch: " + ", ".join(f"{k}={v}" for k, v in seen.items()))
    if prior is not None and fusion_cfg.t_star >= prior.num_train_steps:
        raise ConfigurationError(f"t_star {fusion_cfg.t_star} outside the prior's {prior.num_train_steps} steps")


def synthesize(ref_image, cam_ref: Camera, cam_tar: Camera, class_id, model, prior, codec, schedule,
               fusion_cfg: FusionConfig | None = None, steps: int = DEFAULT_STEPS, ground_truth=None,
               inverted_ref: InvertedLatent | None = None, with_mu_only: bool = False) -> SynthesisResult:
    """Synthesize the view from ``cam_tar``.

    The winning candidate is chosen against ``ground_truth`` when given,
    otherwise against the reference image. ``inverted_ref`` skips the
    inversion of the reference (e.g. when it is cached).
    """
    fusion_cfg = fusion_cfg or FusionConfig()
    check_t_star(fusion_cfg, model, inverted_ref, prior)
    side = getattr(codec, "image_size", (None,))[0]
    ref = preprocess_image(ref_image, side) if side else np.asarray(ref_image, dtype=np.float32)
    if inverted_ref is None:
        inverted_ref = ddim_invert(codec.encode(ref), prior, schedule, fusion_cfg.t_star, steps)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        mu_hat = model(inverted_ref.mu[None].to(dtype), CameraTensors.from_cameras([cam_ref], dtype),
                       CameraTensors.from_cameras([cam_tar], dtype), class_id, class_id, fusion_cfg.t_star)[0]
    mu_hat = mu_hat.to(inverted_ref.mu.dtype)

    fused = {}
    for tag in fusion_cfg.strategies:
        if tag == "A":
            fused[tag] = fuse_strategy_a(mu_hat, inverted_ref.sigma, prior, schedule, fusion_cfg)
        else:
            fused[tag] = fuse_strategy_b(mu_hat, inverted_ref.z, schedule, fusion_cfg)
    if with_mu_only:
        fused["mu"] = mu_hat
    tags = list(fused)
    z0 = ddim_sample(torch.stack([fused[t] for t in tags]), prior, schedule, fusion_cfg.t_star, steps)
    imgs = codec.decode(z0)
    candidates = {t: imgs[i] for i, t in enumerate(tags)}
    target = ground_truth if ground_truth is not None else ref
    img, tag = select_best([(candidates[t], t) for t in fusion_cfg.strategies], target, fusion_cfg.selector)
    return SynthesisResult(img, tag, candidates, mu_hat)


def _json_number(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    skipped: int = 0

    @property
    def count(self):
        return len(self.records)

    def aggregates(self) -> dict:
        """Mean and std of every numeric column; infinite values are left out and counted."""
        out = {}
        if not self.records:
            return out
        for k, v in self.records[0].items():
            if not isinstance(v, (int, float)) or k in ("ref", "tar"):
                continue
            vals = np.array([r[k] for r in self.records], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            out[k] = {"mean": float(finite.mean()) if len(finite) else None,
                      "std": float(finite.std()) if len(finite) else None,
                      "n_infinite": int((~np.isfinite(vals)).sum())}
        return out

    def to_dict(self):
        return {
            "count": self.count,
            "skipped": self.skipped,
            "metadata": self.metadata,
            "aggregates": self.aggregates(),
            "records": [{k: _json_number(v) for k, v in r.items()} for r in self.records],
        }

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        cols = list(self.records[0]) if self.records else ["scene_id", "ref", "tar", "strategy"]
        with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as f:
            wr = csv.DictWriter(f, fieldnames=cols)
            wr.writeheader()
            for r in self.records:
                wr.writerow({k: _json_number(v) for k, v in r.items()})
        return out_dir / f"{stem}.json", out_dir / f"{stem}.csv"


def _image_metrics(img, gt, prefix, protocol_sizes, extra):
    row = {f"{prefix}psnr": psnr(img, gt), f"{prefix}ssim": ssim(img, gt)}
    for s in protocol_sizes:
        a, b = resize_for_protocol(img, s), resize_for_protocol(gt, s)
        row[f"{prefix}psnr@{s}"] = psnr(a, b)
        row[f"{prefix}ssim@{s}"] = ssim(a, b)
    for name in extra:
        row[f"{prefix}{name}"] = get_metric(name).fn(img, gt)
    return row


def evaluate(model, scenes, prior, codec, schedule, fusion_cfg: FusionConfig | None = None,
             pairs_per_scene: int = 16, seed: int = 0, cache=None, protocol_sizes=PROTOCOL_SIZES,
             metrics=(), steps: int = DEFAULT_STEPS, workers: int = 1, with_mu_only: bool = False,
             out_dir=None) -> EvalReport:
    """Synthesize sampled (ref, tar) pairs of every scene and score them against ground truth.

    ``cache`` (an :class:`InversionCache`) supplies reference inversions when present.
    Rows are ordered by ``(scene_id, pair index)``. Pairs whose frames cannot be
    loaded are skipped and counted.
    """
    fusion_cfg = fusion_cfg or FusionConfig()
    check_t_star(fusion_cfg, model, prior=prior)
    jobs = []
    for s in sorted(scenes, key=lambda s: s.scene_id):
        for i, p in enumerate(build_pairs(s, pairs_per_scene, seed)):
            jobs.append((s, i, p))

    def run(job):
        s, i, p = job
        try:
            ref_img = s.frame(p.ref_index).load()
            gt = s.frame(p.tar_index).load()
        except DataError as e:
            log.warning("skipping %s pair %d: %s", s.scene_id, i, e)
            return None
        inv = cache.load(s.scene_id, p.ref_index) if cache is not None and (s.scene_id, p.ref_index) in cache else None
        res = synthesize(ref_img, s.frame(p.ref_index).camera, s.frame(p.tar_index).camera, s.class_id,
                         model, prior, codec, schedule, fusion_cfg, steps, ground_truth=gt,
                         inverted_ref=inv, with_mu_only=with_mu_only)
        row = {"scene_id": s.scene_id, "pair": i, "ref": p.ref_index, "tar": p.tar_index, "strategy": res.tag}
        row.update(_image_metrics(res.image, gt, "", protocol_sizes, metrics))
        row.update({"copy_psnr": psnr(ref_img, gt), "copy_ssim": ssim(ref_img, gt)})
        for tag, img in res.candidates.items():
            row[f"psnr_{tag}"] = psnr(img, gt)
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    report = EvalReport(
        records=[r for r in rows if r is not None],
        skipped=sum(r is None for r in rows),
        metadata={"protocol_sizes": list(protocol_sizes), "resize": "bilinear", "ssim": SSIM_METADATA,
                  "t_star": fusion_cfg.t_star, "steps": steps, "strategy": fusion_cfg.strategy,
                  "coefficient_sign": fusion_cfg.coefficient_sign, "selector": fusion_cfg.selector,
                  "pairs_per_scene": pairs_per_scene, "seed": seed},
    )
    if out_dir is not None:
        report.write(out_dir)
    return report
