"""Translation U-Net mapping a reference view's inverted mean latent to the target view's."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import Camera, ray_grid, stack_cameras
from .conditioning import (
    STAGE_PARTS,
    CameraEmbedding,
    ClassEmbedding,
    ConditioningConfig,
    StageProjection,
    time_embedding,
)
from .diffusion import DEFAULT_T_STAR

RAY_CHANNELS = 6


@dataclass
class TUNetConfig:
    in_channels: int = 4
    latent_size: tuple = (64, 64)
    image_size: tuple = (512, 512)
    base_width: int = 192
    channel_mult: tuple = (1, 2, 4, 4)
    layers_per_stage: int = 2
    attn_dim: int = 768
    head_dim: int = 64
    norm_groups: int = 32
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)

    def __post_init__(self):
        if isinstance(self.conditioning, dict):
            self.conditioning = ConditioningConfig(**self.conditioning)
        self.latent_size = tuple(self.latent_size)
        self.image_size = tuple(self.image_size)
        self.channel_mult = tuple(self.channel_mult)
        if self.attn_dim % self.head_dim:
            raise ValueError("attn_dim must be divisible by head_dim")
        if len(self.channel_mult) < 1:
            raise ValueError("need at least one down stage")
        if self.layers_per_stage < 1:
            raise ValueError("layers_per_stage must be >= 1")
        if any(s % 2 ** (len(self.channel_mult) - 1) for s in self.latent_size):
            raise ValueError(f"latent size {self.latent_size} not divisible by 2^(stages-1)")

    @property
    def num_down_stages(self) -> int:
        return len(self.channel_mult)

    @property
    def widths(self):
        return [self.base_width * m for m in self.channel_mult]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def paper_config(num_classes: int = 168) -> TUNetConfig:
    """Full-size preset: 4x64x64 latents, 768-wide / 64-per-head cross-attention, 64-d embeddings."""
    return TUNetConfig(
        in_channels=4, latent_size=(64, 64), image_size=(512, 512),
        base_width=192, channel_mult=(1, 2, 4, 4), layers_per_stage=2,
        attn_dim=768, head_dim=64, norm_groups=32,
        conditioning=ConditioningConfig(d_cam=64, d_class=64, d_time=256, num_classes=num_classes),
    )


def desk_config(num_classes: int = 8) -> TUNetConfig:
    """CPU-trainable preset for 4x16x16 latents."""
    return TUNetConfig(
        in_channels=4, latent_size=(16, 16), image_size=(128, 128),
        base_width=64, channel_mult=(1, 2), layers_per_stage=2,
        attn_dim=128, head_dim=32, norm_groups=16,
        conditioning=ConditioningConfig(d_cam=64, d_class=64, d_time=256, num_classes=num_classes),
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


@dataclass
class CameraTensors:
    """A batch of cameras as tensors; all share ``image_size``."""

    K: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    image_size: tuple

    @classmethod
    def from_cameras(cls, cams, dtype=torch.float32):
        if isinstance(cams, Camera):
            cams = [cams]
        return cls(*stack_cameras(cams, dtype))

    @property
    def camvec(self) -> torch.Tensor:
        K = self.K
        intr = torch.stack([K[:, 0, 0], K[:, 1, 1], K[:, 0, 2], K[:, 1, 2]], dim=-1)
        return torch.cat([intr, self.R.reshape(-1, 9), self.t], dim=-1)

    def to(self, dtype):
        return CameraTensors(self.K.to(dtype), self.R.to(dtype), self.t.to(dtype), self.image_size)

    def __getitem__(self, idx):
        return CameraTensors(self.K[idx], self.R[idx], self.t[idx], self.image_size)

    def __len__(self):
        return self.K.shape[0]


def _groups(ch, max_groups):
    g = math.gcd(ch, max_groups)
    return max(g, 1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Target features attend to the reference mean latent, keyed by rays.

    Q = W_Q [r_tar || f_tar], K = W_K [r_ref || z_ref], V = W_V z_ref; the
    multi-head result is projected back to the feature width and added to f_tar.
    """

    def __init__(self, channels, latent_channels, attn_dim, head_dim, groups):
        super().__init__()
        self.heads = attn_dim // head_dim
        self.head_dim = head_dim
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.to_q = nn.Conv2d(RAY_CHANNELS + channels, attn_dim, 1, bias=False)
        self.to_k = nn.Conv2d(RAY_CHANNELS + latent_channels, attn_dim, 1, bias=False)
        self.to_v = nn.Conv2d(latent_channels, attn_dim, 1, bias=False)
        self.to_out = nn.Conv2d(attn_dim, channels, 1, bias=False)

    def _split(self, x):
        b, _, h, w = x.shape
        return x.reshape(b, self.heads, self.head_dim, h * w).transpose(2, 3)  # (B, heads, N, d)

    def forward(self, f_tar, r_tar, r_ref, z_ref, return_weights=False):
        if r_tar.shape[-2:] != f_tar.shape[-2:] or r_ref.shape[-2:] != z_ref.shape[-2:]:
            raise RuntimeError("ray/feature grids disagree")
        q = self._split(self.to_q(torch.cat([r_tar, self.norm(f_tar)], dim=1)))
        k = self._split(self.to_k(torch.cat([r_ref, z_ref], dim=1)))
        v = self._split(self.to_v(z_ref))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = weights @ v  # (B, heads, Nq, d)
        b, _, h, w = f_tar.shape
        out = out.transpose(2, 3).reshape(b, self.heads * self.head_dim, h, w)
        out = f_tar + self.to_out(out)
        return (out, weights) if return_weights else out


class _Stage(nn.Module):
    def __init__(self, kind, in_ch, out_ch, n_layers, cfg: TUNetConfig, attention):
        super().__init__()
        cc = cfg.conditioning
        self.projs = nn.ModuleList()
        self.blocks = nn.ModuleList()
        ch = in_ch
        for _ in range(n_layers):
            self.projs.append(StageProjection(cc, kind, ch))
            self.blocks.append(ResBlock(ch, out_ch, cfg.norm_groups))
            ch = out_ch
        self.attn = (
            CrossAttention(out_ch, cfg.in_channels, cfg.attn_dim, cfg.head_dim, cfg.norm_groups)
            if attention else None
        )


class TUNet(nn.Module):
    def __init__(self, cfg: TUNetConfig | None = None):
        super().__init__()
        cfg = cfg or desk_config()
        self.cfg = cfg
        cc = cfg.conditioning
        h, w = cfg.image_size
        scale = np.ones(16, dtype=np.float32)
        scale[:4] = 1.0 / max(h, w)
        self.cam_embed = CameraEmbedding(cc.d_cam, scale)
        self.cls_embed = ClassEmbedding(cc.num_classes, cc.d_class)

        widths = cfg.widths
        n = cfg.num_down_stages
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = widths[0]
        for i, wd in enumerate(widths):
            self.down.append(_Stage("down", ch, wd, cfg.layers_per_stage, cfg, attention=False))
            ch = wd
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < n - 1 else nn.Identity())

        self.mid = _Stage("mid", ch, ch, 2, cfg, attention=True)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(n)):
            wd = widths[i]
            self.up.append(_Stage("up", ch + wd, wd, cfg.layers_per_stage, cfg, attention=True))
            ch = wd
            self.upsample.append(nn.Conv2d(ch, widths[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            if i > 0:
                ch = widths[i - 1]

        self.norm_out = nn.GroupNorm(_groups(ch, cfg.norm_groups), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, z_ref_mu, cam_ref: CameraTensors, cam_tar: CameraTensors,
                class_ref, class_tar, t: int = DEFAULT_T_STAR, return_activations=False):
        cfg = self.cfg
        if z_ref_mu.ndim != 4 or z_ref_mu.shape[1] != cfg.in_channels or tuple(z_ref_mu.shape[-2:]) != cfg.latent_size:
            raise ValueError(
                f"expected latents (B, {cfg.in_channels}, {cfg.latent_size[0]}, {cfg.latent_size[1]}), "
                f"got {tuple(z_ref_mu.shape)}"
            )
        B, dtype = z_ref_mu.shape[0], z_ref_mu.dtype
        cam_ref, cam_tar = cam_ref.to(dtype), cam_tar.to(dtype)
        if len(cam_ref) != B or len(cam_tar) != B:
            raise ValueError("camera batch size does not match latent batch")
        class_ref = torch.as_tensor(class_ref, dtype=torch.long).reshape(-1).expand(B)
        class_tar = torch.as_tensor(class_tar, dtype=torch.long).reshape(-1).expand(B)

        t_emb = time_embedding(int(t), cfg.conditioning.d_time).to(dtype).expand(B, -1)
        emb = {
            "cam_ref": self.cam_embed(cam_ref.camvec),
            "cam_tar": self.cam_embed(cam_tar.camvec),
            "cls_ref": self.cls_embed(class_ref),
            "cls_tar": self.cls_embed(class_tar),
        }
        parts = {k: [emb[p] for p in v] for k, v in STAGE_PARTS.items()}
        acts = {"down": [], "mid": [], "up": [], "down_cond": [], "mid_cond": [], "up_cond": []}
        rays = {}

        def cond(f, proj, stage):
            v = proj(t_emb, parts[stage])
            acts[stage + "_cond"].append(v)
            if v.shape[-1] != f.shape[1]:
                raise ValueError(f"projection width {v.shape[-1]} != feature channels {f.shape[1]}")
            return f + v[:, :, None, None]

        def attend(stage, f):
            grid = tuple(f.shape[-2:])
            if grid not in rays:
                rays[grid] = (
                    ray_grid(cam_tar.K, cam_tar.R, cam_tar.t, cam_tar.image_size, *grid),
                    ray_grid(cam_ref.K, cam_ref.R, cam_ref.t, cam_ref.image_size, *grid),
                    F.adaptive_avg_pool2d(z_ref_mu, grid),
                )
            r_tar, r_ref, z_pool = rays[grid]
            return stage.attn(f, r_tar, r_ref, z_pool)

        f = self.conv_in(z_ref_mu)
        skips = []
        for stage, down in zip(self.down, self.downsample):
            for proj, block in zip(stage.projs, stage.blocks):
                f = block(cond(f, proj, "down"))
                acts["down"].append(f)
            skips.append(f)
            f = down(f)

        m = self.mid
        f = m.blocks[0](cond(f, m.projs[0], "mid"))
        f = attend(m, f)
        f = m.blocks[1](cond(f, m.projs[1], "mid"))
        acts["mid"].append(f)

        for stage, up in zip(self.up, self.upsample):
            f = torch.cat([f, skips.pop()], dim=1)
            for proj, block in zip(stage.projs, stage.blocks):
                f = block(cond(f, proj, "up"))
            f = attend(stage, f)
            acts["up"].append(f)
            if not isinstance(up, nn.Identity):
                f = up(F.interpolate(f, scale_factor=2.0, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(f)))
        return (out, acts) if return_activations else out


def tunet_forward(model: TUNet, z_ref_mu, cam_ref: Camera, cam_tar: Camera,
                  class_ref: int, class_tar: int, t: int = DEFAULT_T_STAR) -> torch.Tensor:
    """Single-latent convenience wrapper around :class:`TUNet`."""
    z = torch.as_tensor(z_ref_mu)
    batched = z.ndim == 4
    if not batched:
        z = z.unsqueeze(0)
    dtype = next(model.parameters()).dtype
    z = z.to(dtype)
    with torch.no_grad():
        out = model(z, CameraTensors.from_cameras([cam_ref], dtype),
                    CameraTensors.from_cameras([cam_tar], dtype), class_ref, class_tar, t)
    return out if batched else out[0]
