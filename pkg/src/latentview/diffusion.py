"""Noise schedule, forward diffusion, DDIM inversion and deterministic DDIM sampling.

Every operation is pure given ``(prior, schedule)``. Latents are torch tensors
shaped ``(C, H, W)`` or ``(B, C, H, W)``; numpy arrays are accepted and
converted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch

from ._validation import as_latent_batch, check_finite, check_same_shape, check_timestep
from .exceptions import DataError

DEFAULT_T_STAR = 600
DEFAULT_STEPS = 30


@runtime_checkable
class DiffusionPrior(Protocol):
    """Anything that predicts the noise in a noisy latent.

    ``predict_noise`` takes a batch ``(B, C, H, W)`` and an integer timestep and
    returns a tensor of the same shape. It must be deterministic.
    """

    latent_shape: tuple
    num_train_steps: int

    @property
    def identity(self) -> str: ...

    def predict_noise(self, z: torch.Tensor, t: int) -> torch.Tensor: ...


@dataclass
class NoiseSchedule:
    """Beta/alpha tables of a discrete diffusion process.

    ``kind="scaled_linear"`` reproduces the latent diffusion backbone
    (betas linear in sqrt-space between ``beta_start`` and ``beta_end``);
    ``kind="linear"`` is the plain DDPM linspace.
    """

    num_train_steps: int = 1000
    kind: str = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012
    use_per_step_alpha: bool = False
    betas: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise ValueError("num_train_steps must be positive")
        if self.betas is None:
            self.betas = _make_betas(self.kind, self.num_train_steps, self.beta_start, self.beta_end)
        else:
            self.kind = "custom"
            self.betas = np.asarray(self.betas, dtype=np.float64)
            self.num_train_steps = len(self.betas)
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def from_alpha_bars(cls, alpha_bars, **kwargs):
        """Build a schedule whose cumulative table equals ``alpha_bars``."""
        ab = np.asarray(alpha_bars, dtype=np.float64)
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bars must be non-increasing and in (0, 1]")
        prev = np.concatenate([[1.0], ab[:-1]])
        return cls(betas=1.0 - ab / prev, **kwargs)

    def coef(self, t: int) -> float:
        """Table entry the engine treats as the cumulative signal fraction at ``t``."""
        table = self.alphas if self.use_per_step_alpha else self.alpha_bars
        return float(table[t])

    def to_dict(self):
        return {
            "num_train_steps": self.num_train_steps,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "use_per_step_alpha": self.use_per_step_alpha,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("num_train_steps", "kind", "beta_start", "beta_end", "use_per_step_alpha") if k in d})


def _make_betas(kind, n, start, end):
    if kind == "linear":
        return np.linspace(start, end, n, dtype=np.float64)
    if kind == "scaled_linear":
        return np.linspace(start**0.5, end**0.5, n, dtype=np.float64) ** 2
    raise ValueError(f"unknown beta schedule {kind!r}")


def step_grid(t_end: int, steps: int) -> np.ndarray:
    """Uniform integer grid over ``[0, t_end]`` with ``steps`` intervals, endpoints included."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > t_end:
        raise ValueError(f"cannot take {steps} integer steps over [0, {t_end}]")
    return np.floor(np.linspace(0, t_end, steps + 1) + 0.5).astype(np.int64)


@dataclass
class InvertedLatent:
    """A latent at ``t_star`` split into its signal (``mu``) and noise (``sigma``) terms."""

    mu: torch.Tensor
    sigma: torch.Tensor
    t_star: int
    steps: int
    trajectory: list | None = None
    z: torch.Tensor = field(init=False)

    def __post_init__(self):
        check_same_shape(self.mu, self.sigma, ("mu", "sigma"))
        self.z = self.mu + self.sigma

    def __len__(self):
        return self.mu.shape[0] if self.mu.ndim == 4 else 1

    def __getitem__(self, i):
        if self.mu.ndim != 4:
            raise TypeError("unbatched InvertedLatent is not indexable")
        traj = None
        if self.trajectory is not None:
            traj = [(m[i], s[i]) for m, s in self.trajectory]
        return InvertedLatent(self.mu[i], self.sigma[i], self.t_star, self.steps, traj)


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule):
    """Corrupt a clean latent to timestep ``t``: ``sqrt(abar) z0 + sqrt(1 - abar) eps``."""
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps)
    check_same_shape(z0, eps, ("z0", "eps"))
    t = check_timestep(t, schedule.num_train_steps)
    ab = float(schedule.alpha_bars[t])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def _predict(prior, x, t, step):
    eps = prior.predict_noise(x, int(t))
    if tuple(eps.shape) != tuple(x.shape):
        raise ValueError(f"prior returned shape {tuple(eps.shape)} for input {tuple(x.shape)}")
    return check_finite(eps.to(x.dtype), "prior output", step)


@torch.no_grad()
def ddim_invert(
    z0,
    prior: DiffusionPrior,
    schedule: NoiseSchedule,
    t_star: int = DEFAULT_T_STAR,
    steps: int = DEFAULT_STEPS,
    keep_trajectory: bool = False,
) -> InvertedLatent:
    """Run deterministic DDIM inversion from timestep 0 up to ``t_star``.

    At each step the update is split into

        mu    = (x_t - sqrt(1 - a_t) eps) * sqrt(a_next / a_t)
        sigma = sqrt(1 - a_next) * eps

    and the next latent is ``mu + sigma``. Only the final pair is kept unless
    ``keep_trajectory`` is set.
    """
    t_star = check_timestep(t_star, schedule.num_train_steps, "t_star")
    if t_star < 1:
        raise ValueError("t_star must be >= 1")
    grid = step_grid(t_star, steps)
    x, batched = as_latent_batch(z0, "z0")
    check_finite(x, "input latent")
    traj = [] if keep_trajectory else None
    mu = sigma = None
    for k in range(steps):
        t, t_next = int(grid[k]), int(grid[k + 1])
        a_t, a_next = schedule.coef(t), schedule.coef(t_next)
        eps = _predict(prior, x, t, k)
        mu = (x - math.sqrt(1.0 - a_t) * eps) * math.sqrt(a_next / a_t)
        sigma = math.sqrt(1.0 - a_next) * eps
        x = mu + sigma
        if keep_trajectory:
            traj.append((mu if batched else mu[0], sigma if batched else sigma[0]))
    if not batched:
        mu, sigma = mu[0], sigma[0]
    return InvertedLatent(mu, sigma, t_star, steps, traj)


@torch.no_grad()
def ddim_sample(
    z_t,
    prior: DiffusionPrior,
    schedule: NoiseSchedule,
    t_start: int = DEFAULT_T_STAR,
    steps: int = DEFAULT_STEPS,
    return_x0: bool = False,
):
    """Deterministic (eta = 0) DDIM reverse iteration from ``t_start`` down to 0.

    By default the result is the latent at timestep 0, which makes sampling the
    exact inverse of :func:`ddim_invert` for a noise-free prior. With
    ``return_x0`` the final step returns the clean estimate
    ``(x - sqrt(1 - a) eps) / sqrt(a)`` instead.
    """
    t_start = check_timestep(t_start, schedule.num_train_steps, "t_start")
    grid = step_grid(t_start, steps)[::-1]
    x, batched = as_latent_batch(z_t, "z_t")
    check_finite(x, "input latent")
    for k in range(steps):
        t, t_prev = int(grid[k]), int(grid[k + 1])
        a_t, a_prev = schedule.coef(t), schedule.coef(t_prev)
        eps = _predict(prior, x, t, k)
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        if return_x0 and k == steps - 1:
            x = x0
        else:
            x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps
    check_finite(x, "sampled latent")
    return x if batched else x[0]


# -- binary format -----------------------------------------------------------

_MAGIC = b"INVL"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


def inverted_latent_to_bytes(inv: InvertedLatent) -> bytes:
    if inv.mu.ndim != 3:
        raise ValueError("only single (C, H, W) latents can be serialized")
    c, h, w = inv.mu.shape
    head = _HEADER.pack(_MAGIC, _VERSION, inv.t_star, inv.steps, c, h, w)
    mu = inv.mu.detach().cpu().numpy().astype("<f4", copy=False)
    sigma = inv.sigma.detach().cpu().numpy().astype("<f4", copy=False)
    return head + mu.tobytes(order="C") + sigma.tobytes(order="C")


def inverted_latent_from_bytes(buf: bytes) -> InvertedLatent:
    if len(buf) < _HEADER.size:
        raise DataError("truncated inverted-latent header")
    magic, version, t_star, steps, c, h, w = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise DataError(f"unsupported inverted-latent format version {version}")
    n = c * h * w
    if len(buf) != _HEADER.size + 8 * n:
        raise DataError(f"inverted-latent body has {len(buf) - _HEADER.size} bytes, expected {8 * n}")
    body = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    mu = torch.from_numpy(body[:n].reshape(c, h, w).astype(np.float32))
    sigma = torch.from_numpy(body[n:].reshape(c, h, w).astype(np.float32))
    return InvertedLatent(mu, sigma, t_star, steps)


def save_inverted_latent(inv: InvertedLatent, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(inverted_latent_to_bytes(inv))
    tmp.replace(path)


def load_inverted_latent(path) -> InvertedLatent:
    return inverted_latent_from_bytes(Path(path).read_bytes())
