"""Synthetic BraTS-like cases: four modalities plus a segmentation mask.

Each case is a noisy ellipsoidal "brain" containing a tumor made of
nested ellipsoids: edema (label 2) outermost, enhancing tumor (label 4)
in between and a necrotic core (label 1) at the centre. Every tissue has
its own intensity in each modality, so the classes are separable from
the T2/T1CE/FLAIR channels alone.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import nifti_io

DEFAULT_SIZE = (240, 240, 155)
MODALITIES = ("t1", "t2", "t1ce", "flair")

# rows: outside, brain, edema, enhancing, necrotic. Each tumor class is bright
# in exactly one of T2/T1CE/FLAIR, so the three channels separate them cleanly.
_TISSUE_INTENSITY = {
    "t1": (0.0, 500.0, 450.0, 480.0, 300.0),
    "t2": (0.0, 300.0, 400.0, 300.0, 1500.0),
    "t1ce": (0.0, 300.0, 300.0, 1500.0, 300.0),
    "flair": (0.0, 300.0, 1500.0, 300.0, 300.0),
}
_NOISE_STD = 10.0
_EDEMA_RADIUS = 0.42  # fraction of the smallest axis
_ENHANCING_RADIUS = 0.7  # fractions of the edema radius
_NECROTIC_RADIUS = 0.45


def _ellipsoid(grid: tuple[np.ndarray, ...], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def synth_arrays(size: tuple[int, int, int] = DEFAULT_SIZE, seed: int = 0, with_tumor: bool = True) -> dict[str, np.ndarray]:
    """Return int16 modalities keyed by name and a uint8 ``seg`` over {0,1,2,4}."""
    rng = np.random.default_rng(seed)
    shape = np.array(size, dtype=np.float64)
    grid = np.ogrid[tuple(slice(0, n) for n in size)]
    center = (shape - 1) / 2.0

    tissue = np.zeros(size, dtype=np.uint8)
    tissue[_ellipsoid(grid, center, 0.42 * shape)] = 1
    seg = np.zeros(size, dtype=np.uint8)
    if with_tumor:
        tumor_center = center + rng.uniform(-0.05, 0.05, 3) * shape
        base = _EDEMA_RADIUS * shape.min() * rng.uniform(0.9, 1.1)
        radii = base * rng.uniform(0.85, 1.15, 3)
        for label, idx, scale in ((2, 2, 1.0), (4, 3, _ENHANCING_RADIUS), (1, 4, _NECROTIC_RADIUS)):
            region = _ellipsoid(grid, tumor_center, radii * scale)
            seg[region] = label
            tissue[region] = idx

    out: dict[str, np.ndarray] = {}
    for name in MODALITIES:
        levels = np.array(_TISSUE_INTENSITY[name], dtype=np.float32)
        offset = np.float32(rng.uniform(-30.0, 30.0))
        vol = levels[tissue] + offset * (tissue > 0)
        vol += rng.normal(0.0, _NOISE_STD, size).astype(np.float32)
        out[name] = np.clip(np.rint(vol), 0, np.iinfo(np.int16).max).astype(np.int16)
    out["seg"] = seg
    return out


def write_case(out_dir: str | os.PathLike, case_id: str, arrays: dict[str, np.ndarray], gzip_output: bool = True) -> Path:
    case_dir = Path(out_dir) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if gzip_output else ".nii"
    for name, arr in arrays.items():
        nifti_io.write_volume(None, nifti_io.VoxelVolume(arr), case_dir / f"{case_id}_{name}{ext}", gzip_output)
    return case_dir


def synth_tree(
    out_dir: str | os.PathLike,
    n_cases: int,
    size: tuple[int, int, int] = DEFAULT_SIZE,
    seed: int = 0,
    gzip_output: bool = True,
) -> list[Path]:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_cases)
    dirs = []
    for i, ss in enumerate(seeds):
        arrays = synth_arrays(size, int(ss.generate_state(1)[0]))
        dirs.append(write_case(out_dir, f"Synth_{i:03d}", arrays, gzip_output))
    return dirs
