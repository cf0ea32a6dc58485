"""Concrete diffusion priors: a zero test double, a small trainable prior, and an
adapter for an external pretrained latent-diffusion U-Net."""

from __future__ import annotations

import hashlib
import logging
import threading
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .conditioning import time_embedding
from .diffusion import NoiseSchedule, forward_diffuse
from .exceptions import ConfigurationError, NotFittedError, NumericalError
from .tunet import ResBlock

log = logging.getLogger(__name__)


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class ZeroPrior:
    """Predicts zero noise everywhere. Inversion and sampling reduce to pure rescaling."""

    def __init__(self, latent_shape=(4, 16, 16), num_train_steps=1000):
        self.latent_shape = tuple(latent_shape)
        self.num_train_steps = num_train_steps

    @property
    def identity(self):
        return "zero"

    def predict_noise(self, z, t):
        return torch.zeros_like(z)


class CountingPrior:
    """Wraps a prior and counts ``predict_noise`` calls."""

    def __init__(self, prior):
        self.prior = prior
        self.calls = 0
        self._lock = threading.Lock()
        self.latent_shape = prior.latent_shape
        self.num_train_steps = prior.num_train_steps

    @property
    def identity(self):
        return self.prior.identity

    def predict_noise(self, z, t):
        with self._lock:
            self.calls += 1
        return self.prior.predict_noise(z, t)


class SerializedPrior(CountingPrior):
    """Serializes calls for priors that are not re-entrant."""

    def predict_noise(self, z, t):
        with self._lock:
            self.calls += 1
            return self.prior.predict_noise(z, t)


class ToyEpsNet(nn.Module):
    """Two-level conv U-Net predicting noise from ``(z_t, t)``."""

    def __init__(self, in_channels=4, width=48, d_time=128, groups=8):
        super().__init__()
        self.d_time = d_time
        self.time_mlp = nn.Sequential(nn.Linear(d_time, 2 * width), nn.SiLU(), nn.Linear(2 * width, 2 * width))
        self.conv_in = nn.Conv2d(in_channels, width, 3, padding=1)
        self.t1 = nn.Linear(2 * width, width)
        self.b1 = ResBlock(width, width, groups)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.t2 = nn.Linear(2 * width, 2 * width)
        self.b2 = ResBlock(2 * width, 2 * width, groups)
        self.b3 = ResBlock(2 * width, 2 * width, groups)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.t3 = nn.Linear(2 * width, width)
        self.b4 = ResBlock(2 * width, width, groups)
        self.norm_out = nn.GroupNorm(groups, width)
        self.conv_out = nn.Conv2d(width, in_channels, 3, padding=1)

    def forward(self, z, t):
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.time_mlp(time_embedding(t, self.d_time).to(z.dtype))
        h1 = self.b1(self.conv_in(z) + self.t1(temb)[:, :, None, None])
        h = self.down(h1) + self.t2(temb)[:, :, None, None]
        h = self.b3(self.b2(h))
        h = self.up(F.interpolate(h, scale_factor=2.0, mode="nearest")) + self.t3(temb)[:, :, None, None]
        h = self.b4(torch.cat([h, h1], dim=1))
        return self.conv_out(F.silu(self.norm_out(h)))


class ToyDiffusionPrior(BaseEstimator):
    """Small noise-prediction prior trained on a set of latents.

    ``fit`` minimizes the standard denoising objective: corrupt a latent to a
    random timestep and regress the injected noise.
    """

    def __init__(self, width=32, train_steps=2000, batch_size=32, learning_rate=2e-3,
                 max_timestep=None, seed=0, schedule=None):
        self.width = width
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_timestep = max_timestep
        self.seed = seed
        self.schedule = schedule

    def _schedule(self):
        return self.schedule if self.schedule is not None else NoiseSchedule()

    def fit(self, latents, y=None):
        latents = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
        if latents.ndim != 4:
            raise ValueError(f"latents must be (N, C, H, W), got {tuple(latents.shape)}")
        if latents.shape[0] < 100:
            raise ValueError(f"need at least 100 latents to train a prior, got {latents.shape[0]}")
        sched = self._schedule()
        t_max = self.max_timestep or sched.num_train_steps
        g = torch.Generator().manual_seed(self.seed)
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            net = ToyEpsNet(latents.shape[1], self.width)
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, self.train_steps, eta_min=self.learning_rate * 0.05)
        ab = torch.tensor(sched.alpha_bars, dtype=torch.float32)
        self.loss_history_ = []
        net.train()
        n = latents.shape[0]
        for step in range(self.train_steps):
            idx = torch.randint(0, n, (self.batch_size,), generator=g)
            x0 = latents[idx]
            t = torch.randint(0, t_max, (self.batch_size,), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            a = ab[t][:, None, None, None]
            xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
            loss = F.mse_loss(net(xt, t), eps)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"toy prior diverged at step {step} (seed={self.seed}, params={self.get_params(deep=False)})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched_lr.step()
            self.loss_history_.append(float(loss.detach()))
        net.eval()
        self.net_ = net
        self.latent_shape = tuple(latents.shape[1:])
        self.num_train_steps = sched.num_train_steps
        self.identity_ = "toy-" + state_digest(net)
        return self

    @property
    def identity(self):
        self._check_fitted()
        return self.identity_

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("ToyDiffusionPrior is not fitted")

    @torch.no_grad()
    def predict_noise(self, z, t):
        self._check_fitted()
        dtype = z.dtype
        p = next(self.net_.parameters())
        return self.net_(z.to(p.dtype), int(t)).to(dtype)

    def denoising_loss(self, latents, t, seed=0):
        """Mean noise-regression error at a single timestep (diagnostic)."""
        self._check_fitted()
        x0 = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
        g = torch.Generator().manual_seed(seed)
        eps = torch.randn(x0.shape, generator=g)
        xt = forward_diffuse(x0, t, eps, self._schedule())
        return float(F.mse_loss(self.predict_noise(xt, t), eps))

    def save(self, path):
        self._check_fitted()
        torch.save({
            "format": "latentview-toy-prior", "params": {k: v for k, v in self.get_params(deep=False).items() if k != "schedule"},
            "schedule": self._schedule().to_dict(), "latent_shape": self.latent_shape,
            "state_dict": self.net_.state_dict(),
        }, path)

    @classmethod
    def load(cls, path):
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise ConfigurationError(f"cannot read prior file {path}: {e}") from e
        if not isinstance(blob, dict) or blob.get("format") != "latentview-toy-prior":
            raise ConfigurationError(f"{path} is not a toy prior file")
        obj = cls(**blob["params"], schedule=NoiseSchedule.from_dict(blob["schedule"]))
        net = ToyEpsNet(blob["latent_shape"][0], obj.width)
        net.load_state_dict(blob["state_dict"])
        net.eval()
        obj.net_ = net
        obj.latent_shape = tuple(blob["latent_shape"])
        obj.num_train_steps = obj._schedule().num_train_steps
        obj.identity_ = "toy-" + state_digest(net)
        return obj


def train_toy_prior(latents, **params) -> ToyDiffusionPrior:
    return ToyDiffusionPrior(**params).fit(latents)


class ExternalPriorAdapter:
    """Noise prediction from a pretrained latent-diffusion U-Net with null text conditioning.

    ``locator`` is a local diffusers-format pipeline directory (``unet/``,
    ``text_encoder/``, ``tokenizer/``). Alternatively pass an already loaded
    ``unet`` and ``null_embedding``. The backbone is frozen and never trained.
    """

    RETRIEVAL_HINT = (
        "download a latent diffusion pipeline (e.g. with `huggingface-cli download <repo> "
        "--local-dir <dir>`) and pass that directory as the backbone locator; "
        "install the optional extra with `pip install .[ldm]`"
    )

    def __init__(self, locator=None, unet=None, null_embedding=None, num_train_steps=1000):
        self.locator = locator
        if unet is None:
            unet, null_embedding = self._load(locator)
        self.unet = unet.eval() if hasattr(unet, "eval") else unet
        for p in getattr(self.unet, "parameters", lambda: [])():
            p.requires_grad_(False)
        self.null_embedding = null_embedding
        cfg = self.unet.config
        size = cfg["sample_size"] if isinstance(cfg, dict) else cfg.sample_size
        ch = cfg["in_channels"] if isinstance(cfg, dict) else cfg.in_channels
        if isinstance(size, int):
            size = (size, size)
        self.latent_shape = (ch, *size)
        self.num_train_steps = num_train_steps

    @property
    def identity(self):
        return f"ldm:{Path(self.locator).name}" if self.locator else f"ldm:{type(self.unet).__name__}"

    @classmethod
    def _load(cls, locator):
        if locator is None or not Path(locator).is_dir():
            raise ConfigurationError(f"backbone not found at {locator!r}: {cls.RETRIEVAL_HINT}")
        root = Path(locator)
        if not (root / "unet").is_dir():
            raise ConfigurationError(f"{root} has no unet/ subdirectory: {cls.RETRIEVAL_HINT}")
        try:
            from diffusers import UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise ConfigurationError(f"missing optional dependency ({e}): {cls.RETRIEVAL_HINT}") from e
        unet = UNet2DConditionModel.from_pretrained(root, subfolder="unet", local_files_only=True)
        tok = CLIPTokenizer.from_pretrained(root, subfolder="tokenizer", local_files_only=True)
        enc = CLIPTextModel.from_pretrained(root, subfolder="text_encoder", local_files_only=True)
        ids = tok([""], padding="max_length", max_length=tok.model_max_length, return_tensors="pt").input_ids
        with torch.no_grad():
            null = enc(ids)[0]
        return unet, null

    def check_codec(self, codec):
        if tuple(codec.latent_shape) != tuple(self.latent_shape):
            raise ConfigurationError(
                f"backbone latent shape {self.latent_shape} does not match codec {tuple(codec.latent_shape)}"
            )

    @torch.no_grad()
    def predict_noise(self, z, t):
        dtype = z.dtype
        p = next(iter(self.unet.parameters()), None)
        work = p.dtype if p is not None else dtype
        ctx = None
        if self.null_embedding is not None:
            ctx = self.null_embedding.to(work).expand(z.shape[0], -1, -1)
        tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
        out = self.unet(z.to(work), tt, encoder_hidden_states=ctx)
        out = getattr(out, "sample", out)
        return out.to(dtype)


class ExternalVAECodec:
    """Latent-diffusion autoencoder (``vae/`` of a diffusers pipeline directory) as a codec."""

    def __init__(self, locator=None, vae=None, scaling=0.18215, image_size=(512, 512)):
        self.locator = locator
        self.scaling = scaling
        self.image_size = tuple(image_size)
        if vae is None:
            root = Path(locator) if locator else None
            if root is None or not (root / "vae").is_dir():
                raise ConfigurationError(f"autoencoder not found at {locator!r}: {ExternalPriorAdapter.RETRIEVAL_HINT}")
            try:
                from diffusers import AutoencoderKL
            except ImportError as e:
                raise ConfigurationError(f"missing optional dependency ({e}): {ExternalPriorAdapter.RETRIEVAL_HINT}") from e
            vae = AutoencoderKL.from_pretrained(root, subfolder="vae", local_files_only=True)
        self.vae = vae.eval()

    @property
    def latent_shape(self):
        return (4, self.image_size[0] // 8, self.image_size[1] // 8)

    @property
    def identity(self):
        return f"vae:{Path(self.locator).name if self.locator else type(self.vae).__name__}"

    @torch.no_grad()
    def encode(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        single = x.ndim == 3
        x = (x[None] if single else x).permute(0, 3, 1, 2) * 2 - 1
        z = self.vae.encode(x).latent_dist.mean * self.scaling
        return z[0] if single else z

    @torch.no_grad()
    def decode(self, latents):
        z = torch.as_tensor(latents)
        single = z.ndim == 3
        x = self.vae.decode((z[None] if single else z) / self.scaling).sample
        img = ((x.clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy().astype(np.float32)
        return img[0] if single else img
