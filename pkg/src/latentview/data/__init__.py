from .cache import InversionCache, cache_key, load_manifest, precompute_inversions
from .codec import IdentityCodec, LatentCodec, PatchCodec
from .preprocess import preprocess_image, resize_for_protocol
from .scenes import (
    FramePair,
    Frame,
    SceneRecord,
    build_pairs,
    import_colmap_dataset,
    lexicographic_split,
    read_dataset,
    write_dataset,
)
from .synthetic import SYNTHETIC_CLASSES, Primitive, SceneSpec, generate_synthetic_dataset, generate_synthetic_scene, render

__all__ = [
    "Frame", "FramePair", "IdentityCodec", "InversionCache", "LatentCodec", "PatchCodec", "Primitive",
    "SYNTHETIC_CLASSES", "SceneRecord", "SceneSpec", "build_pairs", "cache_key", "generate_synthetic_dataset",
    "generate_synthetic_scene", "import_colmap_dataset", "lexicographic_split", "load_manifest",
    "precompute_inversions", "preprocess_image", "read_dataset", "render", "resize_for_protocol",
    "write_dataset",
]
