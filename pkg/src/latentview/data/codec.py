"""Latent codecs: fixed orthogonal patch transform (desk scale) and a pass-through codec."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin


@runtime_checkable
class LatentCodec(Protocol):
    latent_shape: tuple

    @property
    def identity(self) -> str: ...

    def encode(self, images) -> torch.Tensor: ...

    def decode(self, latents) -> np.ndarray: ...


def _patch_basis(p: int) -> np.ndarray:
    """Four orthonormal vectors over a flattened (p, p, 3) patch.

    Overall brightness, red-green, yellow-blue, and a top-to-bottom brightness ramp.
    """
    ramp = (np.arange(p) - (p - 1) / 2.0)[:, None, None] * np.ones((p, p, 3))
    vecs = [
        np.ones((p, p, 3)),
        np.broadcast_to(np.array([1.0, -1.0, 0.0]), (p, p, 3)),
        np.broadcast_to(np.array([1.0, 1.0, -2.0]), (p, p, 3)),
        ramp,
    ]
    B = np.stack([v.reshape(-1) for v in vecs])
    return B / np.linalg.norm(B, axis=1, keepdims=True)


class PatchCodec(BaseEstimator, TransformerMixin):
    """Project each non-overlapping ``patch x patch`` RGB block onto four fixed
    orthonormal directions. Decoding is the transpose, so ``decode(encode(x))``
    is the orthogonal projection of ``x`` onto the codec subspace.
    """

    def __init__(self, patch=8, scale=0.5, image_size=(128, 128)):
        self.patch = patch
        self.scale = scale
        self.image_size = image_size

    @property
    def basis_(self):
        return _patch_basis(self.patch)

    @property
    def latent_shape(self):
        h, w = self.image_size
        return (4, h // self.patch, w // self.patch)

    @property
    def identity(self):
        return f"patch{self.patch}x{self.patch}-s{self.scale}-v1"

    def fit(self, X=None, y=None):
        return self

    def encode(self, images) -> torch.Tensor:
        x = np.asarray(images, dtype=np.float32)
        single = x.ndim == 3
        if single:
            x = x[None]
        n, h, w, c = x.shape
        p = self.patch
        if c != 3 or h % p or w % p:
            raise ValueError(f"images must be (N, H, W, 3) with H, W divisible by {p}, got {x.shape}")
        patches = (x - 0.5).reshape(n, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(n, h // p, w // p, p * p * 3).astype(np.float64)
        z = (patches @ self.basis_.T) * self.scale
        z = torch.from_numpy(z.transpose(0, 3, 1, 2).astype(np.float32))
        return z[0] if single else z

    def decode(self, latents) -> np.ndarray:
        z = torch.as_tensor(latents).detach().cpu().numpy().astype(np.float64)
        single = z.ndim == 3
        if single:
            z = z[None]
        n, _, gh, gw = z.shape
        p = self.patch
        patches = (z.transpose(0, 2, 3, 1) / self.scale) @ self.basis_
        img = patches.reshape(n, gh, gw, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * p, gw * p, 3)
        img = np.clip(img + 0.5, 0.0, 1.0).astype(np.float32)
        return img[0] if single else img

    transform = encode
    inverse_transform = decode


class IdentityCodec:
    """Pixels as latents: RGB in the first three channels, zeros elsewhere."""

    def __init__(self, latent_channels=4, image_size=(16, 16)):
        self.latent_channels = latent_channels
        self.image_size = tuple(image_size)

    @property
    def latent_shape(self):
        return (self.latent_channels, *self.image_size)

    @property
    def identity(self):
        return "identity"

    def encode(self, images):
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        single = x.ndim == 3
        if single:
            x = x[None]
        z = torch.zeros(x.shape[0], self.latent_channels, *x.shape[1:3])
        z[:, :3] = x.permute(0, 3, 1, 2)
        return z[0] if single else z

    def decode(self, latents):
        z = torch.as_tensor(latents).detach()
        single = z.ndim == 3
        if single:
            z = z[None]
        img = np.clip(z[:, :3].permute(0, 2, 3, 1).cpu().numpy(), 0.0, 1.0).astype(np.float32)
        return img[0] if single else img
