"""Camera, class and time embeddings, and the per-stage projections added to feature maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .camera import CAMVEC_SIZE

GENERIC_CLASS = "generic"

# Which embeddings each stage sees, in concatenation order (after the time embedding).
STAGE_PARTS = {
    "down": ("cam_ref", "cls_ref"),
    "mid": ("cam_ref", "cam_tar", "cls_tar"),
    "up": ("cam_tar", "cls_tar"),
}


@dataclass
class ConditioningConfig:
    d_cam: int = 64
    d_class: int = 64
    d_time: int = 256
    num_classes: int = 16

    def __post_init__(self):
        for name in ("d_cam", "d_class", "d_time", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def part_width(self, part: str) -> int:
        return self.d_cam if part.startswith("cam") else self.d_class

    def stage_width(self, stage: str) -> int:
        return self.d_time + sum(self.part_width(p) for p in STAGE_PARTS[stage])


def time_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t w_k) ..., cos(t w_k) ...]`` with ``w_k = max_period^(-k/half)``.

    ``t`` may be a python int (returns ``(dim,)``) or a 1-D tensor (returns ``(B, dim)``).
    """
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor([t] if scalar else t, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = tt * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    emb = emb.to(torch.get_default_dtype())
    return emb[0] if scalar else emb


class CameraEmbedding(nn.Module):
    """Affine map of the 16-value camera vector.

    ``input_scale`` is a fixed (non-learned) per-entry scale so pixel-unit
    intrinsics do not swamp the rotation entries.
    """

    def __init__(self, d_cam: int, input_scale=None):
        super().__init__()
        self.linear = nn.Linear(CAMVEC_SIZE, d_cam)
        scale = torch.ones(CAMVEC_SIZE) if input_scale is None else torch.as_tensor(input_scale, dtype=torch.float32)
        self.register_buffer("input_scale", scale.reshape(CAMVEC_SIZE))

    def forward(self, camvec: torch.Tensor) -> torch.Tensor:
        if camvec.shape[-1] != CAMVEC_SIZE:
            raise ValueError(f"camera vector width {camvec.shape[-1]} != {CAMVEC_SIZE}")
        return self.linear(camvec * self.input_scale.to(camvec.dtype))


class ClassEmbedding(nn.Module):
    def __init__(self, num_classes: int, d_class: int):
        super().__init__()
        self.table = nn.Embedding(num_classes, d_class)

    def forward(self, class_id: torch.Tensor) -> torch.Tensor:
        class_id = torch.as_tensor(class_id, dtype=torch.long)
        n = self.table.num_embeddings
        if class_id.numel() and (class_id.min() < 0 or class_id.max() >= n):
            raise ValueError(f"class id out of range [0, {n})")
        return self.table(class_id)


class StageProjection(nn.Module):
    """Linear map from ``time ⊕ parts`` to a block's channel width."""

    def __init__(self, cfg: ConditioningConfig, stage: str, out_channels: int):
        super().__init__()
        if stage not in STAGE_PARTS:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        self.in_width = cfg.stage_width(stage)
        self.linear = nn.Linear(self.in_width, out_channels)

    def forward(self, t_emb: torch.Tensor, parts) -> torch.Tensor:
        if len(parts) != len(STAGE_PARTS[self.stage]):
            raise ValueError(f"{self.stage} stage takes {len(STAGE_PARTS[self.stage])} embeddings, got {len(parts)}")
        x = torch.cat([t_emb, *parts], dim=-1)
        if x.shape[-1] != self.in_width:
            raise ValueError(f"{self.stage} projection expects width {self.in_width}, got {x.shape[-1]}")
        return self.linear(x)


def inject(f: torch.Tensor, proj: StageProjection, parts, t_emb: torch.Tensor) -> torch.Tensor:
    """``f + broadcast(proj[t_emb ⊕ parts])`` over the spatial axes of ``f`` (B, C, H, W)."""
    v = proj(t_emb, parts)
    if v.shape[-1] != f.shape[1]:
        raise ValueError(f"projection width {v.shape[-1]} != feature channels {f.shape[1]}")
    return f + v[:, :, None, None]


def load_class_vocab(path) -> list:
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if not names or names[0] != GENERIC_CLASS:
        raise ValueError(f"class vocabulary must start with {GENERIC_CLASS!r} at id 0")
    return names


def save_class_vocab(names, path) -> None:
    names = list(names)
    if not names or names[0] != GENERIC_CLASS:
        names = [GENERIC_CLASS] + [n for n in names if n != GENERIC_CLASS]
    Path(path).write_text("\n".join(names) + "\n", encoding="utf-8")
