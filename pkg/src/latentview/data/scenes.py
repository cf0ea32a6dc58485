"""Multi-view scene records, on-disk layout, frame pairing and dataset import."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import Camera, load_cameras_json, save_cameras_json
from ..conditioning import GENERIC_CLASS, load_class_vocab, save_class_vocab
from ..exceptions import DataError
from .preprocess import preprocess_image, preprocess_intrinsics, to_float_image

log = logging.getLogger(__name__)

REF_RANGE = (1, 10)
TAR_RANGE = (15, 25)


@dataclass
class Frame:
    index: int  # 1-based
    camera: Camera
    image: np.ndarray | None = None
    path: Path | None = None

    def load(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise DataError(f"frame {self.index} has neither pixels nor a path")
            try:
                self.image = to_float_image(np.asarray(Image.open(self.path).convert("RGB")))
            except OSError as e:
                raise DataError(f"cannot read {self.path}: {e}") from e
        return self.image


@dataclass
class SceneRecord:
    scene_id: str
    class_id: int
    frames: list = field(default_factory=list)
    class_name: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"scene {self.scene_id} has no frames")
        idx = [f.index for f in self.frames]
        if idx != list(range(1, len(idx) + 1)):
            raise ValueError(f"scene {self.scene_id}: frame indices must be contiguous from 1")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> Frame:
        return self.frames[index - 1]


@dataclass(frozen=True)
class FramePair:
    ref_index: int
    tar_index: int


def build_pairs(scene, pairs_per_scene: int, seed: int,
                ref_range=REF_RANGE, tar_range=TAR_RANGE) -> list:
    """Sample distinct (ref, tar) pairs uniformly from ``ref_range x tar_range`` (inclusive).

    Returns an empty list (with a warning) when the scene is too short.
    """
    n = scene.frame_count if isinstance(scene, SceneRecord) else int(scene)
    sid = scene.scene_id if isinstance(scene, SceneRecord) else "?"
    if max(ref_range[1], tar_range[1]) > n:
        log.warning("scene %s has %d frames, needs %d; skipped", sid, n, max(ref_range[1], tar_range[1]))
        return []
    refs = np.arange(ref_range[0], ref_range[1] + 1)
    tars = np.arange(tar_range[0], tar_range[1] + 1)
    total = len(refs) * len(tars)
    k = min(int(pairs_per_scene), total)
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=k, replace=False)
    return [FramePair(int(refs[i // len(tars)]), int(tars[i % len(tars)])) for i in flat]


def lexicographic_split(scene_ids, fractions=(0.9, 0.05, 0.05)):
    """Split ids into train/val/test by sorted order."""
    ids = sorted(scene_ids)
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:]


# -- on-disk layout: <root>/<class>/<scene_id>/images/NNN.png + cameras.json ----

def write_scene(scene: SceneRecord, root, class_name: str | None = None) -> Path:
    cls = class_name or scene.class_name or str(scene.class_id)
    d = Path(root) / cls / scene.scene_id
    (d / "images").mkdir(parents=True, exist_ok=True)
    for f in scene.frames:
        img = np.clip(np.round(f.load() * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(d / "images" / f"{f.index:03d}.png")
    save_cameras_json([f.camera for f in scene.frames], d / "cameras.json")
    return d


def read_scene(scene_dir, class_id: int, class_name: str = "") -> SceneRecord:
    d = Path(scene_dir)
    try:
        cams = load_cameras_json(d / "cameras.json")
    except (OSError, ValueError, json.JSONDecodeError) as e:
        raise DataError(f"bad cameras.json in {d}: {e}") from e
    frames = []
    for i, cam in enumerate(cams, start=1):
        p = d / "images" / f"{i:03d}.png"
        if not p.exists():
            raise DataError(f"missing frame image {p}")
        frames.append(Frame(i, cam, path=p))
    return SceneRecord(d.name, class_id, frames, class_name)


def write_dataset(scenes, root, class_names) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_class_vocab(class_names, root / "classes.txt")
    for s in scenes:
        write_scene(s, root, class_names[s.class_id])


def read_dataset(root) -> list:
    """All scenes under ``root`` sorted by scene id."""
    root = Path(root)
    vocab_file = root / "classes.txt"
    if not vocab_file.exists():
        raise DataError(f"{root} has no classes.txt")
    vocab = load_class_vocab(vocab_file)
    scenes = []
    for cid, name in enumerate(vocab):
        cdir = root / name
        if not cdir.is_dir():
            continue
        for sdir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            scenes.append(read_scene(sdir, cid, name))
    return sorted(scenes, key=lambda s: s.scene_id)


# -- COLMAP text import (MVImgNet ships sparse/0/{cameras,images}.txt) ------------

def _qvec_to_rotmat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def read_colmap_text(sparse_dir):
    """Parse ``cameras.txt``/``images.txt``. Returns ``[(name, K, R, t, (h, w))]`` sorted by name."""
    sparse_dir = Path(sparse_dir)
    intr = {}
    for line in (sparse_dir / "cameras.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        p = [float(v) for v in parts[4:]]
        if model in ("SIMPLE_PINHOLE", "SIMPLE_RADIAL", "RADIAL"):
            fx = fy = p[0]
            cx, cy = p[1], p[2]
        elif model in ("PINHOLE", "OPENCV", "FULL_OPENCV"):
            fx, fy, cx, cy = p[:4]
        else:
            raise DataError(f"unsupported COLMAP camera model {model}")
        intr[cam_id] = (fx, fy, cx, cy, h, w)
    out = []
    # records alternate: pose line, then a 2D point line that may be empty
    lines = [ln for ln in (sparse_dir / "images.txt").read_text().splitlines() if not ln.startswith("#")]
    for line in lines[::2]:
        parts = line.split()
        if not parts:
            continue
        q = np.array([float(v) for v in parts[1:5]])
        t = np.array([float(v) for v in parts[5:8]])
        fx, fy, cx, cy, h, w = intr[int(parts[8])]
        K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
        R = _qvec_to_rotmat(q / np.linalg.norm(q))
        out.append((parts[9], K, R, t, (h, w)))
    return sorted(out, key=lambda r: r[0])


def normalize_poses(Rs, ts):
    """Move the world origin to the point nearest all optical axes and scale to unit mean camera distance."""
    centers = np.stack([-R.T @ t for R, t in zip(Rs, ts)])
    axes = np.stack([R[2] for R in Rs])
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, axes):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ c
    focus = np.linalg.lstsq(A, b, rcond=None)[0]
    scale = np.mean(np.linalg.norm(centers - focus, axis=1))
    if scale <= 0:
        raise DataError("degenerate camera arrangement")
    new_ts = [(t + R @ focus) / scale for R, t in zip(Rs, ts)]
    return list(Rs), new_ts


def import_colmap_scene(scene_dir, out_root, class_name: str, class_id: int, target: int = 512) -> SceneRecord:
    """Convert ``<scene>/images/*`` + ``<scene>/sparse/0/*.txt`` into the package layout."""
    scene_dir = Path(scene_dir)
    recs = read_colmap_text(scene_dir / "sparse" / "0")
    Rs, ts = normalize_poses([r[2] for r in recs], [r[3] for r in recs])
    frames = []
    for i, ((name, K, _, _, (h, w)), R, t) in enumerate(zip(recs, Rs, ts), start=1):
        img = np.asarray(Image.open(scene_dir / "images" / name).convert("RGB"))
        if img.shape[:2] != (h, w):
            raise DataError(f"{name}: image is {img.shape[:2]}, COLMAP says {(h, w)}")
        fx, fy, cx, cy = preprocess_intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], h, w, target)
        cam = Camera.from_intrinsics(fx, fy, cx, cy, R, t, (target, target))
        frames.append(Frame(i, cam, image=preprocess_image(img, target)))
    scene = SceneRecord(scene_dir.name, class_id, frames, class_name)
    write_scene(scene, out_root, class_name)
    return scene


def import_colmap_dataset(src_root, out_root, target: int = 512) -> list:
    """Import ``<src>/<class>/<scene>/`` trees; class ids follow sorted class names after ``generic``."""
    src_root, out_root = Path(src_root), Path(out_root)
    classes = sorted(p.name for p in src_root.iterdir() if p.is_dir())
    vocab = [GENERIC_CLASS] + classes
    out_root.mkdir(parents=True, exist_ok=True)
    save_class_vocab(vocab, out_root / "classes.txt")
    scenes = []
    for cid, cls in enumerate(classes, start=1):
        for sdir in sorted(p for p in (src_root / cls).iterdir() if p.is_dir()):
            if not (sdir / "sparse" / "0" / "images.txt").exists():
                log.warning("skipping %s: no COLMAP text model", sdir)
                continue
            scenes.append(import_colmap_scene(sdir, out_root, cls, cid, target))
    return scenes
