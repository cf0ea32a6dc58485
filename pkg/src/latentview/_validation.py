"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import NumericalError


def as_latent_batch(z, name="z"):
    """Return ``(tensor, was_batched)`` with a leading batch axis.

    Accepts numpy arrays or tensors shaped ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    if isinstance(z, np.ndarray):
        z = torch.from_numpy(np.ascontiguousarray(z))
    if not isinstance(z, torch.Tensor):
        raise TypeError(f"{name} must be a numpy array or torch tensor, got {type(z).__name__}")
    if z.ndim == 3:
        return z.unsqueeze(0), False
    if z.ndim == 4:
        return z, True
    raise ValueError(f"{name} must have shape (C, H, W) or (B, C, H, W), got {tuple(z.shape)}")


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {names[0]}{tuple(a.shape)} vs {names[1]}{tuple(b.shape)}")


def check_timestep(t, num_train_steps, name="t", allow_end=False):
    t = int(t)
    hi = num_train_steps if allow_end else num_train_steps - 1
    if not 0 <= t <= hi:
        raise ValueError(f"{name}={t} outside [0, {hi}]")
    return t


def check_finite(x, what, step=None):
    if not torch.isfinite(x).all():
        where = f" at step {step}" if step is not None else ""
        raise NumericalError(f"non-finite values in {what}{where}")
    return x


def check_image(img, name="image"):
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValueError(f"{name} must be HxW or HxWxC, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} is empty: {img.shape}")
    return img
