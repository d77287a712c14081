"""Part retrieval and assembly for 3D shape reconstruction."""

from ._para import (
    Vae,
    assemble,
    canonicalize,
    chamfer,
    detect_symmetry_plane,
    gen_library,
    gen_targets,
    load_cloud,
    load_vae,
    resample,
    save_cloud,
    train_vae,
)

__all__ = [
    "Vae",
    "assemble",
    "canonicalize",
    "chamfer",
    "detect_symmetry_plane",
    "gen_library",
    "gen_targets",
    "load_cloud",
    "load_vae",
    "resample",
    "save_cloud",
    "train_vae",
]
