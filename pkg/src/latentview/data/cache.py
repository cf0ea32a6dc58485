"""Content-addressed cache of DDIM-inverted frame latents."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from ..diffusion import ddim_invert, load_inverted_latent, save_inverted_latent
from ..exceptions import DataError

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def cache_key(image, codec_id: str, prior_id: str, t_star: int, steps: int) -> str:
    img = np.ascontiguousarray(image, dtype=np.float32)
    h = hashlib.sha256()
    h.update(repr(img.shape).encode())
    h.update(img.tobytes())
    h.update(f"|codec={codec_id}|prior={prior_id}|t={t_star}|steps={steps}".encode())
    return h.hexdigest()


def _entry_path(cache_dir: Path, key: str) -> Path:
    return cache_dir / key[:2] / f"{key}.invl"


def _try_load(path: Path, t_star, steps):
    if not path.exists():
        return None
    try:
        inv = load_inverted_latent(path)
    except DataError as e:
        log.warning("corrupt cache entry %s (%s); recomputing", path.name, e)
        return None
    if inv.t_star != t_star or inv.steps != steps:
        log.warning("cache entry %s has t_star/steps %d/%d; recomputing", path.name, inv.t_star, inv.steps)
        return None
    return inv


def _write_json_atomic(obj, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1), encoding="utf-8")
    os.replace(tmp, path)


def precompute_inversions(scenes, codec, prior, schedule, t_star, steps, cache_dir,
                          workers: int = 1, batch_size: int = 32) -> list:
    """Invert every frame of every scene, skipping entries already cached.

    Returns the manifest (also written to ``cache_dir/manifest.json``): one
    ``{key, path, scene_id, frame, t_star, steps}`` record per frame.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)

    def do_scene(scene):
        records, todo = [], []
        for f in scene.frames:
            img = f.load()
            key = cache_key(img, codec.identity, prior.identity, t_star, steps)
            path = _entry_path(cache_dir, key)
            records.append({"key": key, "path": str(path.relative_to(cache_dir)),
                            "scene_id": scene.scene_id, "frame": f.index,
                            "t_star": t_star, "steps": steps})
            if _try_load(path, t_star, steps) is None:
                todo.append((img, path))
        for i in range(0, len(todo), batch_size):
            chunk = todo[i:i + batch_size]
            z0 = codec.encode(np.stack([c[0] for c in chunk]))
            inv = ddim_invert(z0, prior, schedule, t_star, steps)
            for j, (_, path) in enumerate(chunk):
                path.parent.mkdir(parents=True, exist_ok=True)
                save_inverted_latent(inv[j], path)
        return records

    manifest = []
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for recs in pool.map(do_scene, scenes):
                    manifest.extend(recs)
        else:
            for s in scenes:
                manifest.extend(do_scene(s))
    except OSError as e:
        _write_json_atomic(manifest, cache_dir / MANIFEST)
        raise DataError(f"cache write failed after {len(manifest)} entries: {e}") from e
    _write_json_atomic(manifest, cache_dir / MANIFEST)
    return manifest


def load_manifest(cache_dir) -> list:
    p = Path(cache_dir) / MANIFEST
    if not p.exists():
        raise DataError(f"no manifest in {cache_dir}")
    return json.loads(p.read_text(encoding="utf-8"))


class InversionCache:
    """Read access to cached inversions indexed by ``(scene_id, frame)``."""

    def __init__(self, cache_dir, manifest=None):
        self.cache_dir = Path(cache_dir)
        manifest = manifest if manifest is not None else load_manifest(cache_dir)
        self.index = {(r["scene_id"], r["frame"]): r for r in manifest}

    def __contains__(self, item):
        return item in self.index

    def load(self, scene_id, frame):
        rec = self.index.get((scene_id, frame))
        if rec is None:
            raise DataError(f"no cache entry for {scene_id} frame {frame}")
        return load_inverted_latent(self.cache_dir / rec["path"])

    def mu_table(self, scene_ids=None) -> dict:
        """``{(scene_id, frame): mu}`` for all (or the given) scenes."""
        keep = None if scene_ids is None else set(scene_ids)
        return {
            k: self.load(*k).mu for k in self.index if keep is None or k[0] in keep
        }


def stack_mu(table, keys) -> torch.Tensor:
    return torch.stack([table[k] for k in keys])
