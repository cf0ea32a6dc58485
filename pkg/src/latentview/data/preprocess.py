"""Resize-and-center-crop preprocessing and protocol resizing."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .._validation import check_image


def to_float_image(img) -> np.ndarray:
    """uint8 or float image to float32 HxWx3 in [0, 1]."""
    img = check_image(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    img = img.astype(np.float32, copy=False)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return img


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Antialiased bilinear resize with half-pixel centers; float32 HxWxC in, out."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False, antialias=True)
    return y[0].permute(1, 2, 0).numpy()


def resized_shape(h: int, w: int, target: int):
    """Shape after scaling the shorter side to ``target``; the long side rounds half-up."""
    if h <= w:
        return target, (2 * w * target + h) // (2 * h)
    return (2 * h * target + w) // (2 * w), target


def crop_offsets(h: int, w: int, target: int):
    """(top, left) of the centered crop; odd overhang drops the extra pixel at bottom/right."""
    return (h - target) // 2, (w - target) // 2


def preprocess_image(img, target: int = 512) -> np.ndarray:
    """Scale the shorter side to ``target`` then center-crop to ``target x target``."""
    img = to_float_image(img)
    h, w = img.shape[:2]
    if target < 1:
        raise ValueError("target side must be >= 1")
    if (h, w) == (target, target):
        return img.copy()
    nh, nw = resized_shape(h, w, target)
    out = resize_bilinear(img, nh, nw)
    top, left = crop_offsets(nh, nw, target)
    return np.clip(out[top:top + target, left:left + target], 0.0, 1.0)


def preprocess_intrinsics(fx, fy, cx, cy, h, w, target: int = 512):
    """Intrinsics of the image produced by :func:`preprocess_image`."""
    nh, nw = resized_shape(h, w, target)
    sx, sy = nw / w, nh / h
    top, left = crop_offsets(nh, nw, target)
    return fx * sx, fy * sy, cx * sx - left, cy * sy - top


def resize_for_protocol(image, target: int) -> np.ndarray:
    """Square-to-square bilinear resize used by comparison protocols (e.g. 512 -> 256 or 90)."""
    img = to_float_image(image)
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"protocol resize expects a square image, got {h}x{w}")
    if h == target:
        return img.copy()
    return np.clip(resize_bilinear(img, target, target), 0.0, 1.0)
