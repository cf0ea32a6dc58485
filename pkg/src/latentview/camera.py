"""Pinhole cameras, the 16-value conditioning vector, and per-cell ray maps.

Convention: world-to-camera extrinsics ``x_cam = R x_world + t``, camera looks
down +z with x right and y down, pixel centers at half-integer coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

CAMVEC_LAYOUT_VERSION = 1
CAMVEC_SIZE = 16
_ORTHO_TOL = 1e-5


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple  # (height, width) in pixels

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        validate_camera(self)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, R, t, image_size):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, R, t, image_size)

    def to_json_record(self) -> dict:
        return {
            "fx": float(self.K[0, 0]),
            "fy": float(self.K[1, 1]),
            "cx": float(self.K[0, 2]),
            "cy": float(self.K[1, 2]),
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "h": self.image_size[0],
            "w": self.image_size[1],
        }

    @classmethod
    def from_json_record(cls, rec: dict) -> "Camera":
        try:
            return cls.from_intrinsics(
                rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                np.asarray(rec["R"], dtype=np.float64).reshape(3, 3),
                rec["t"], (rec["h"], rec["w"]),
            )
        except KeyError as e:
            raise ValueError(f"camera record missing field {e}") from None


def validate_camera(cam: Camera) -> None:
    K, R = cam.K, cam.R
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(cam.t))):
        raise ValueError("camera has non-finite entries")
    if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
        raise ValueError("intrinsics must be upper-triangular with K[2,2] == 1")
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise ValueError("intrinsics must have positive focal lengths")
    if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation must have determinant +1")
    if cam.image_size[0] < 1 or cam.image_size[1] < 1:
        raise ValueError(f"invalid image size {cam.image_size}")


def vectorize_camera(cam: Camera) -> np.ndarray:
    """Flatten to ``[fx, fy, cx, cy] + R (row-major) + t``; 16 float64 values."""
    if cam.K[0, 1] != 0:
        raise ValueError("skewed intrinsics are not representable in the camera vector")
    K = cam.K
    return np.concatenate([[K[0, 0], K[1, 1], K[0, 2], K[1, 2]], cam.R.reshape(-1), cam.t])


def devectorize_camera(vec, image_size) -> Camera:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (CAMVEC_SIZE,):
        raise ValueError(f"camera vector must have {CAMVEC_SIZE} entries, got {vec.shape}")
    fx, fy, cx, cy = vec[:4]
    return Camera.from_intrinsics(fx, fy, cx, cy, vec[4:13].reshape(3, 3), vec[13:16], image_size)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


@dataclass
class RayMap:
    origins: np.ndarray     # (h, w, 3)
    directions: np.ndarray  # (h, w, 3), unit norm

    @property
    def grid_size(self):
        return self.origins.shape[:2]


def ray_grid(K, R, t, image_size, grid_h: int, grid_w: int) -> torch.Tensor:
    """Batched ray embedding ``(B, 6, grid_h, grid_w)``: origin then unit direction.

    ``K``, ``R`` are ``(B, 3, 3)``, ``t`` is ``(B, 3)``; ``image_size`` is the
    ``(height, width)`` all cameras in the batch share. Grid cell ``(i, j)``
    looks through the image point ``((j + .5) W / grid_w, (i + .5) H / grid_h)``.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dims must be >= 1")
    K, R, t = (torch.as_tensor(a) for a in (K, R, t))
    dtype = K.dtype
    H, W = image_size
    u = (torch.arange(grid_w, dtype=dtype) + 0.5) * (W / grid_w)
    v = (torch.arange(grid_h, dtype=dtype) + 0.5) * (H / grid_h)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    pix = torch.stack([uu, vv, torch.ones_like(uu)], dim=-1).reshape(-1, 3)  # (N, 3)
    det = torch.linalg.det(K)
    if torch.any(det.abs() < 1e-12):
        raise ValueError("singular intrinsics")
    d_cam = pix @ torch.linalg.inv(K).transpose(1, 2)  # (B, N, 3)
    d_world = d_cam @ R  # row-vector form of R^T d
    d_world = d_world / d_world.norm(dim=-1, keepdim=True)
    origin = -(R.transpose(1, 2) @ t.unsqueeze(-1)).squeeze(-1)  # (B, 3)
    origins = origin.unsqueeze(1).expand_as(d_world)
    emb = torch.cat([origins, d_world], dim=-1)  # (B, N, 6)
    return emb.transpose(1, 2).reshape(K.shape[0], 6, grid_h, grid_w)


def compute_rays(cam: Camera, grid_h: int, grid_w: int) -> RayMap:
    if abs(np.linalg.det(cam.K)) < 1e-12:
        raise ValueError("singular intrinsics")
    emb = ray_grid(
        torch.from_numpy(cam.K)[None], torch.from_numpy(cam.R)[None],
        torch.from_numpy(cam.t)[None], cam.image_size, grid_h, grid_w,
    )[0].permute(1, 2, 0).numpy()
    return RayMap(origins=emb[..., :3].copy(), directions=emb[..., 3:].copy())


def embed_rays(rays: RayMap) -> np.ndarray:
    """Per-cell ``origin || direction`` features, shape ``(h, w, 6)``."""
    if rays.origins.shape != rays.directions.shape or rays.origins.shape[-1] != 3:
        raise ValueError("origins and directions must both be (h, w, 3)")
    return np.concatenate([rays.origins, rays.directions], axis=-1)


def stack_cameras(cams, dtype=torch.float32):
    """Batch tensors ``(K, R, t)`` plus the shared image size for a list of cameras."""
    sizes = {c.image_size for c in cams}
    if len(sizes) != 1:
        raise ValueError(f"cameras in a batch must share an image size, got {sizes}")
    K = torch.tensor(np.stack([c.K for c in cams]), dtype=dtype)
    R = torch.tensor(np.stack([c.R for c in cams]), dtype=dtype)
    t = torch.tensor(np.stack([c.t for c in cams]), dtype=dtype)
    return K, R, t, sizes.pop()


def load_cameras_json(path) -> list:
    with open(path, encoding="utf-8") as f:
        recs = json.load(f)
    return [Camera.from_json_record(r) for r in recs]


def save_cameras_json(cams, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([c.to_json_record() for c in cams], f, indent=1)
