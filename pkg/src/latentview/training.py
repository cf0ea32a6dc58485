"""TUNet optimization on cached inverted-latent pairs."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CAMVEC_LAYOUT_VERSION
from .data.scenes import REF_RANGE, TAR_RANGE, build_pairs
from .diffusion import DEFAULT_T_STAR
from .exceptions import CheckpointError, NumericalError
from .tunet import CameraTensors, TUNet, TUNetConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latentview-tunet-checkpoint"
CHECKPOINT_VERSION = 1
GENERIC_CLASS_ID = 0


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-5
    epochs: int = 450
    seed: int = 0
    pairs_per_scene: int = 20
    resample_pairs: bool = False    # draw fresh (ref, tar) pairs every epoch
    cycle_fraction: float = 0.1     # LR cycle period as a fraction of all epochs
    lr_floor_ratio: float = 0.1
    grad_clip: float = 1.0
    generic_class_prob: float = 0.1
    checkpoint_every: int = 10
    t_star: int = DEFAULT_T_STAR
    ref_range: tuple = REF_RANGE
    tar_range: tuple = TAR_RANGE

    def __post_init__(self):
        self.ref_range = tuple(self.ref_range)
        self.tar_range = tuple(self.tar_range)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


def paper_train_config(**overrides) -> TrainConfig:
    return dataclasses.replace(TrainConfig(batch_size=32, learning_rate=1e-5, epochs=450), **overrides)


def desk_train_config(**overrides) -> TrainConfig:
    return dataclasses.replace(
        TrainConfig(batch_size=8, learning_rate=2e-4, epochs=50, pairs_per_scene=16, checkpoint_every=10),
        **overrides,
    )


TRAIN_PRESETS = {"paper": paper_train_config, "desk": desk_train_config}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; values are JSON when they parse as JSON."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


@contextlib.contextmanager
def fixed_math(dtype=None):
    """Deterministic kernels (and optionally a default dtype) for bit-reproducible runs."""
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_dtype = torch.get_default_dtype()
    torch.use_deterministic_algorithms(True)
    if dtype is not None:
        torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_default_dtype(prev_dtype)


class PairDataset:
    """Inverted mean latents, cameras and classes for a set of scenes.

    ``mu`` maps ``(scene_id, frame)`` to a ``(C, H, W)`` tensor.
    """

    def __init__(self, scenes, mu):
        self.scenes = {s.scene_id: s for s in scenes}
        self.mu = mu
        missing = [(s.scene_id, f.index) for s in scenes for f in s.frames if (s.scene_id, f.index) not in mu]
        if missing:
            raise KeyError(f"no inverted latent for {missing[:3]}{'...' if len(missing) > 3 else ''}")

    @property
    def scene_ids(self):
        return sorted(self.scenes)

    def pairs(self, pairs_per_scene, seed, ref_range=REF_RANGE, tar_range=TAR_RANGE):
        """Deterministic ``[(scene_id, ref, tar)]`` ordered by scene id."""
        out = []
        for i, sid in enumerate(self.scene_ids):
            for p in build_pairs(self.scenes[sid], pairs_per_scene, seed * 7919 + i, ref_range, tar_range):
                out.append((sid, p.ref_index, p.tar_index))
        return out

    def collate(self, items, class_override=None):
        z_ref = torch.stack([self.mu[(s, r)] for s, r, _ in items])
        z_tar = torch.stack([self.mu[(s, t)] for s, _, t in items])
        cam_ref = CameraTensors.from_cameras([self.scenes[s].frame(r).camera for s, r, _ in items])
        cam_tar = CameraTensors.from_cameras([self.scenes[s].frame(t).camera for s, _, t in items])
        cls = torch.tensor([self.scenes[s].class_id for s, _, _ in items], dtype=torch.long)
        if class_override is not None:
            cls = torch.where(torch.as_tensor(class_override), torch.full_like(cls, GENERIC_CLASS_ID), cls)
        return {"z_ref": z_ref, "z_tar": z_tar, "cam_ref": cam_ref, "cam_tar": cam_tar,
                "cls_ref": cls, "cls_tar": cls, "ids": items}


def mse_loss(pred, target):
    """Mean over batch and elements of the squared residual."""
    return F.mse_loss(pred, target, reduction="mean")


def _to(batch, dtype):
    return {**batch, "z_ref": batch["z_ref"].to(dtype), "z_tar": batch["z_tar"].to(dtype),
            "cam_ref": batch["cam_ref"].to(dtype), "cam_tar": batch["cam_tar"].to(dtype)}


def train_step(model: TUNet, optimizer, batch, t_star=DEFAULT_T_STAR, grad_clip=1.0, scheduler=None) -> float:
    """One optimizer update on ``batch``; returns the pre-update loss."""
    dtype = next(model.parameters()).dtype
    b = _to(batch, dtype)
    model.train()
    pred = model(b["z_ref"], b["cam_ref"], b["cam_tar"], b["cls_ref"], b["cls_tar"], t_star)
    loss = mse_loss(pred, b["z_tar"])
    if not torch.isfinite(loss):
        pnorm = float(torch.sqrt(sum((p.detach() ** 2).sum() for p in model.parameters())))
        raise NumericalError(f"non-finite loss on batch {b.get('ids')} (parameter norm {pnorm:.4g})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return float(loss.detach())


@torch.no_grad()
def evaluate_mse(model: TUNet, dataset: PairDataset, items, t_star=DEFAULT_T_STAR, batch_size=32):
    """Mean MSE of the model and of the identity baseline (predict the reference mean)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    tot_m = tot_i = 0.0
    for i in range(0, len(items), batch_size):
        b = _to(dataset.collate(items[i:i + batch_size]), dtype)
        pred = model(b["z_ref"], b["cam_ref"], b["cam_tar"], b["cls_ref"], b["cls_tar"], t_star)
        n = len(b["ids"])
        tot_m += float(mse_loss(pred, b["z_tar"])) * n
        tot_i += float(mse_loss(b["z_ref"], b["z_tar"])) * n
    n = max(len(items), 1)
    return tot_m / n, tot_i / n


def make_optimizer(model, cfg: TrainConfig, steps_per_epoch: int):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    period = max(2, int(round(cfg.cycle_fraction * cfg.epochs * steps_per_epoch)))
    sched = torch.optim.lr_scheduler.CyclicLR(
        opt, base_lr=cfg.learning_rate * cfg.lr_floor_ratio, max_lr=cfg.learning_rate,
        step_size_up=period // 2, step_size_down=period - period // 2, mode="triangular",
        cycle_momentum=False,
    )
    return opt, sched


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: TUNet, optimizer=None, scheduler=None, epoch=0, train_cfg=None, extra=None):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "camvec_layout_version": CAMVEC_LAYOUT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} is unreadable or corrupt: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a TUNet checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    if blob.get("camvec_layout_version") != CAMVEC_LAYOUT_VERSION:
        raise CheckpointError(f"{path}: camera vector layout {blob.get('camvec_layout_version')} "
                              f"!= {CAMVEC_LAYOUT_VERSION}")
    return blob


def model_from_checkpoint(path, dtype=torch.float32) -> TUNet:
    blob = load_checkpoint(path)
    model = TUNet(TUNetConfig.from_dict(blob["model_config"])).to(dtype)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {e}") from e
    model.eval()
    if blob.get("train_config"):
        model.trained_t_star = blob["train_config"]["t_star"]
    return model


@dataclass
class TrainResult:
    epoch_losses: list
    step_log: list
    checkpoints: list
    best_val: float | None = None


def smoothed(values, window=10):
    """Trailing moving average (only full windows)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v[:0]
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def train_loop(cfg: TrainConfig, dataset: PairDataset, model: TUNet, out_dir=None,
               val_dataset: PairDataset | None = None, resume_from=None, stop_after_epoch=None,
               progress=None) -> TrainResult:
    """Epoch loop with seeded shuffling, cyclic LR, periodic and best-validation checkpoints.

    Pair sampling, shuffling and generic-class substitution for epoch ``e``
    depend only on ``(seed, e)``, so resuming from a checkpoint continues the
    exact same run.
    """

    def epoch_items(epoch):
        seed = cfg.seed * 100_003 + epoch if cfg.resample_pairs else cfg.seed
        return dataset.pairs(cfg.pairs_per_scene, seed, cfg.ref_range, cfg.tar_range)

    items = epoch_items(0)
    if not items:
        raise ValueError("dataset yields no training pairs")
    steps_per_epoch = (len(items) + cfg.batch_size - 1) // cfg.batch_size
    optimizer, scheduler = make_optimizer(model, cfg, steps_per_epoch)
    val_items = val_dataset.pairs(cfg.pairs_per_scene, cfg.seed + 1, cfg.ref_range, cfg.tar_range) if val_dataset else []

    start_epoch, epoch_losses, step_log, best_val = 0, [], [], None
    if resume_from is not None:
        blob = load_checkpoint(resume_from)
        model.load_state_dict(blob["state_dict"])
        optimizer.load_state_dict(blob["optimizer"])
        scheduler.load_state_dict(blob["scheduler"])
        start_epoch = blob["epoch"]
        epoch_losses = list(blob["extra"].get("epoch_losses", []))
        step_log = list(blob["extra"].get("step_log", []))
        best_val = blob["extra"].get("best_val")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    t0 = time.time()
    step = start_epoch * steps_per_epoch
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last):
        if cfg.resample_pairs:
            items = epoch_items(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(items))
        generic = rng.random(len(items)) < cfg.generic_class_prob
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = dataset.collate([items[j] for j in idx], class_override=generic[idx])
            lr = optimizer.param_groups[0]["lr"]
            loss = train_step(model, optimizer, batch, cfg.t_star, cfg.grad_clip, scheduler)
            losses.append(loss)
            step += 1
            step_log.append({"epoch": epoch + 1, "step": step, "loss": loss, "lr": lr,
                             "wall_time": round(time.time() - t0, 3)})
        epoch_losses.append(float(np.mean(losses)))
        extra = {"epoch_losses": epoch_losses, "step_log": step_log, "best_val": best_val}
        if val_items:
            val, _ = evaluate_mse(model, val_dataset, val_items, cfg.t_star)
            extra["val_mse"] = val
            if best_val is None or val < best_val:
                best_val = extra["best_val"] = val
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", model, optimizer, scheduler, epoch + 1, cfg, extra)
        if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            p = out_dir / f"epoch{epoch + 1:04d}.pt"
            save_checkpoint(p, model, optimizer, scheduler, epoch + 1, cfg, extra)
            checkpoints.append(p)
        if progress is not None:
            progress(epoch + 1, epoch_losses[-1])
        log.info("epoch %d loss %.6f", epoch + 1, epoch_losses[-1])
    if out_dir is not None:
        write_metrics_csv(step_log, out_dir / "metrics.csv")
    model.eval()
    model.trained_t_star = cfg.t_star
    return TrainResult(epoch_losses, step_log, checkpoints, best_val)


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "step", "loss", "lr", "wall_time"])
        w.writeheader()
        w.writerows(rows)
