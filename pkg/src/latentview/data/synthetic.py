"""Ray-cast Lambertian scenes (spheres and boxes on a ground plane) seen from a camera orbit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Camera, look_at, ray_grid
from .scenes import Frame, SceneRecord

SYNTHETIC_CLASSES = ["generic", "spheres", "boxes", "mixed"]
_SKY_TOP = np.array([0.35, 0.55, 0.85])
_SKY_HORIZON = np.array([0.85, 0.88, 0.92])
_AMBIENT = 0.3


@dataclass
class Primitive:
    kind: str          # "sphere" or "box"
    center: tuple      # world xyz; spheres/boxes rest on z = 0 when generated randomly
    size: tuple        # sphere: (radius,), box: half extents (x, y, z)
    color: tuple
    yaw: float = 0.0   # box rotation about +z, radians

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        if len(self.size) != (1 if self.kind == "sphere" else 3) or min(self.size) <= 0:
            raise ValueError(f"degenerate {self.kind} size {self.size}")


@dataclass
class SceneSpec:
    primitives: list
    ground_color: tuple = (0.55, 0.5, 0.45)
    light_position: tuple = (3.0, -2.0, 6.0)
    image_size: tuple = (128, 128)
    fov_degrees: float = 50.0
    orbit_radius: float = 3.0
    orbit_height: float = 1.4
    look_height: float = 0.3
    start_azimuth: float = 0.0
    arc_degrees: float = 180.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    @property
    def class_name(self):
        kinds = {p.kind for p in self.primitives}
        return "mixed" if len(kinds) > 1 else ("spheres" if kinds == {"sphere"} else "boxes")


def random_scene_spec(rng: np.random.Generator, image_size=(128, 128)) -> SceneSpec:
    n = int(rng.integers(1, 4))
    prims = []
    placed = []
    for _ in range(n):
        for _attempt in range(20):
            xy = rng.uniform(-0.9, 0.9, size=2)
            if all(np.linalg.norm(xy - q) > 0.8 for q in placed):
                break
        placed.append(xy)
        hue = rng.uniform(0, 1)
        color = tuple(np.clip(0.5 + 0.45 * np.cos(2 * np.pi * (hue + np.array([0, 1 / 3, 2 / 3]))), 0.05, 1.0))
        if rng.random() < 0.5:
            r = float(rng.uniform(0.25, 0.5))
            prims.append(Primitive("sphere", (xy[0], xy[1], r), (r,), color))
        else:
            he = rng.uniform(0.2, 0.45, size=3)
            prims.append(Primitive("box", (xy[0], xy[1], he[2]), tuple(he), color, float(rng.uniform(0, np.pi))))
    g = rng.uniform(0.35, 0.65)
    return SceneSpec(
        primitives=prims,
        ground_color=(g, g * rng.uniform(0.85, 1.0), g * rng.uniform(0.7, 0.95)),
        light_position=(float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4)), float(rng.uniform(4, 7))),
        image_size=tuple(image_size),
        orbit_radius=float(rng.uniform(2.7, 3.3)),
        orbit_height=float(rng.uniform(1.1, 1.7)),
        start_azimuth=float(rng.uniform(0, 2 * np.pi)),
    )


def orbit_cameras(spec: SceneSpec, n_frames: int) -> list:
    h, w = spec.image_size
    f = 0.5 * w / np.tan(np.radians(spec.fov_degrees) / 2)
    cams = []
    for k in range(n_frames):
        az = spec.start_azimuth + np.radians(spec.arc_degrees) * k / max(n_frames - 1, 1)
        eye = (spec.orbit_radius * np.cos(az), spec.orbit_radius * np.sin(az), spec.orbit_height)
        R, t = look_at(eye, (0.0, 0.0, spec.look_height))
        cams.append(Camera.from_intrinsics(f, f, w / 2, h / 2, R, t, (h, w)))
    return cams


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - cc
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    tt = np.where(t0 > 1e-6, t0, t1)
    sel = ok & (tt > 1e-6)
    t[sel] = tt[sel]
    pts = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
    n = (pts - c) / r
    return t, n


def _hit_box(o, d, c, he, yaw):
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    lo = (o - c) @ Rz  # world -> box frame
    ld = d @ Rz
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-he - lo) * inv
        t2 = (he - lo) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    t = np.full(len(d), np.inf)
    hit = (tmax >= tmin) & (tmax > 1e-6)
    tt = np.where(tmin > 1e-6, tmin, tmax)
    t[hit] = tt[hit]
    p = lo + ld * np.where(np.isfinite(t), t, 0.0)[:, None]
    rel = np.abs(p) / he
    axis = np.argmax(rel, axis=1)
    nl = np.zeros_like(p)
    nl[np.arange(len(p)), axis] = np.sign(p[np.arange(len(p)), axis])
    return t, nl @ Rz.T


def _intersect_prims(o, d, prims):
    best_t = np.full(len(d), np.inf)
    best_n = np.zeros((len(d), 3))
    best_id = np.full(len(d), -1)
    for i, p in enumerate(prims):
        c = np.asarray(p.center, dtype=np.float64)
        if p.kind == "sphere":
            t, n = _hit_sphere(o, d, c, p.size[0])
        else:
            t, n = _hit_box(o, d, c, np.asarray(p.size, dtype=np.float64), p.yaw)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = n[closer]
        best_id[closer] = i
    return best_t, best_n, best_id


def render(spec: SceneSpec, cam: Camera, return_ids=False):
    """Render ``cam``'s view. ids: -1 sky, 0 ground, k>0 primitive k-1."""
    h, w = cam.image_size
    emb = ray_grid(cam.K[None], cam.R[None], cam.t[None], (h, w), h, w)[0].numpy()
    o = emb[:3].reshape(3, -1).T
    d = emb[3:].reshape(3, -1).T
    t_obj, n_obj, pid = _intersect_prims(o, d, spec.primitives)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_gnd = np.where(d[:, 2] < -1e-9, -o[:, 2] / d[:, 2], np.inf)
    use_obj = t_obj < t_gnd
    t_hit = np.where(use_obj, t_obj, t_gnd)
    hit = np.isfinite(t_hit)
    pts = o + d * np.where(hit, t_hit, 0.0)[:, None]
    normals = np.where(use_obj[:, None], n_obj, np.array([0.0, 0.0, 1.0]))
    base = np.tile(np.asarray(spec.ground_color, dtype=np.float64), (len(d), 1))
    colors = np.array([p.color for p in spec.primitives], dtype=np.float64)
    base[use_obj] = colors[pid[use_obj]]

    L = np.asarray(spec.light_position, dtype=np.float64) - pts
    dist = np.linalg.norm(L, axis=1, keepdims=True)
    L = L / np.maximum(dist, 1e-9)
    lam = np.clip(np.einsum("ij,ij->i", normals, L), 0.0, None)
    t_sh, _, _ = _intersect_prims(pts + normals * 1e-4, L, spec.primitives)
    lam = np.where(t_sh < dist[:, 0], 0.0, lam)
    shade = _AMBIENT + (1 - _AMBIENT) * lam
    rgb = base * shade[:, None]

    s = np.clip(d[:, 2], 0.0, 1.0)[:, None]
    sky = _SKY_HORIZON * (1 - s) + _SKY_TOP * s
    rgb = np.where(hit[:, None], rgb, sky)
    img = np.clip(rgb, 0.0, 1.0).reshape(h, w, 3).astype(np.float32)
    if not return_ids:
        return img
    ids = np.where(hit, np.where(use_obj, pid + 1, 0), -1).reshape(h, w)
    return img, ids


def generate_synthetic_scene(spec: SceneSpec | None = None, n_frames: int = 30, seed: int = 0,
                             scene_id: str | None = None) -> SceneRecord:
    """Render ``n_frames`` views along an orbit. A random spec is drawn from ``seed`` if none is given."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if spec is None:
        spec = random_scene_spec(np.random.default_rng(seed))
    cams = orbit_cameras(spec, n_frames)
    frames = [Frame(i + 1, cam, image=render(spec, cam)) for i, cam in enumerate(cams)]
    name = spec.class_name
    return SceneRecord(scene_id or f"syn{seed:05d}", SYNTHETIC_CLASSES.index(name), frames, name)


def generate_synthetic_dataset(n_scenes: int, n_frames: int = 30, seed: int = 0, image_size=(128, 128)) -> list:
    scenes = []
    for i in range(n_scenes):
        s = seed * 100003 + i
        spec = random_scene_spec(np.random.default_rng(s), image_size)
        scenes.append(generate_synthetic_scene(spec, n_frames, s, scene_id=f"syn{s:07d}"))
    return scenes
