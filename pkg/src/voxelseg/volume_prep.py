"""Turn raw multi-modal cases into cropped, normalized, filtered training samples."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from . import nifti_io
from .archive import read_archive, write_archive
from .errors import (
    CorruptArchive,
    EmptyDataset,
    MalformedManifest,
    NiftiError,
    NonFiniteInput,
    ShapeMismatch,
    UnexpectedLabel,
    WindowOutOfBounds,
)

log = logging.getLogger(__name__)

Window = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

DEFAULT_WINDOW: Window = ((56, 184), (56, 184), (13, 141))
DEFAULT_THRESHOLD = 0.01
DEFAULT_SPLIT = 0.75
CHANNELS = ("t2", "t1ce", "flair")
RAW_LABELS = (0, 1, 2, 4)


@dataclasses.dataclass
class CaseBundle:
    case_id: str
    t2_path: Path
    t1ce_path: Path
    flair_path: Path
    seg_path: Path | None = None

    @classmethod
    def from_dir(cls, case_dir: str | os.PathLike) -> CaseBundle:
        """Locate ``<id>_{t2,t1ce,flair,seg}.nii[.gz]`` inside ``case_dir`` (BraTS naming)."""
        case_dir = Path(case_dir)
        case_id = case_dir.name

        def find(suffix: str, required: bool = True) -> Path | None:
            for ext in (".nii.gz", ".nii"):
                p = case_dir / f"{case_id}_{suffix}{ext}"
                if p.exists():
                    return p
            if required:
                raise FileNotFoundError(f"{case_dir}: missing {case_id}_{suffix}.nii[.gz]")
            return None

        return cls(case_id, find("t2"), find("t1ce"), find("flair"), find("seg", required=False))


@dataclasses.dataclass
class Sample:
    image: np.ndarray  # (D, H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (D, H, W) uint8 over {0, 1, 2, 3}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.image.dtype == other.image.dtype
            and self.mask.dtype == other.mask.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclasses.dataclass
class Dropped:
    case_id: str
    fraction: float


@dataclasses.dataclass
class DatasetManifest:
    train_files: list[str]
    val_files: list[str]
    seed: int
    split_ratio: float
    crop_window: Window
    annotation_threshold: float
    kept_count: int
    dropped_count: int
    normalize_on: str = "full_volume"
    filter_on: str = "cropped_mask"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        try:
            d = json.loads(Path(path).read_text())
            d["crop_window"] = tuple(tuple(p) for p in d["crop_window"])
            return cls(**d)
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedManifest(f"{path}: {exc}") from exc

    def resolve(self, names: list[str], base: str | os.PathLike) -> list[Path]:
        return [Path(base) / n for n in names]


def remap_labels(mask: np.ndarray) -> np.ndarray:
    """Map raw labels {0,1,2,4} to contiguous {0,1,2,3} as uint8."""
    values = np.unique(mask)
    bad = np.setdiff1d(values, RAW_LABELS)
    if bad.size:
        raise UnexpectedLabel(f"mask contains labels {bad.tolist()} outside {RAW_LABELS}")
    out = mask.astype(np.uint8)
    out[out == 4] = 3
    return out


def minmax_normalize(channel: np.ndarray) -> np.ndarray:
    x = np.asarray(channel, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("channel contains NaN or Inf")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    # float rounding can leave values a hair outside [0, 1]
    return np.clip(out, 0.0, 1.0, out=out)


def crop_volume(vol: np.ndarray, window: Window) -> np.ndarray:
    """Crop the three leading spatial axes; any trailing channel axis passes through."""
    if len(window) != 3 or vol.ndim < 3:
        raise WindowOutOfBounds(f"need a 3-axis window for a volume of rank {vol.ndim}")
    slices = []
    for axis, (start, end) in enumerate(window):
        if not 0 <= start < end <= vol.shape[axis]:
            raise WindowOutOfBounds(f"window {window} does not fit volume shape {vol.shape}")
        slices.append(slice(start, end))
    return vol[tuple(slices)]


def useful_fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def full_window(shape: tuple[int, ...]) -> Window:
    return tuple((0, int(n)) for n in shape[:3])  # type: ignore[return-value]


def preprocess_arrays(
    t2: np.ndarray,
    t1ce: np.ndarray,
    flair: np.ndarray,
    seg: np.ndarray | None,
    window: Window = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
    case_id: str = "",
) -> Sample | Dropped:
    if not (t2.shape == t1ce.shape == flair.shape and (seg is None or seg.shape == t2.shape)):
        raise ShapeMismatch(
            f"{case_id}: modality shapes differ: t2 {t2.shape}, t1ce {t1ce.shape}, flair {flair.shape}"
            + ("" if seg is None else f", seg {seg.shape}")
        )
    image = np.stack([minmax_normalize(c) for c in (t2, t1ce, flair)], axis=-1)
    image = np.ascontiguousarray(crop_volume(image, window))
    if seg is None:
        mask = np.zeros(image.shape[:3], dtype=np.uint8)
    else:
        mask = remap_labels(np.ascontiguousarray(crop_volume(seg, window)))
    frac = useful_fraction(mask)
    if frac <= threshold:
        return Dropped(case_id, frac)
    return Sample(image, mask)


def preprocess_case(bundle: CaseBundle, window: Window = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD) -> Sample | Dropped:
    """Normalize per channel on the full volume, crop, remap labels, filter.

    The T1 modality is never opened.
    """
    t2 = nifti_io.read_volume(bundle.t2_path)[1].data
    t1ce = nifti_io.read_volume(bundle.t1ce_path)[1].data
    flair = nifti_io.read_volume(bundle.flair_path)[1].data
    seg = None
    if bundle.seg_path is not None:
        seg = nifti_io.read_volume_raw(bundle.seg_path)[1].data
    return preprocess_arrays(t2, t1ce, flair, seg, window, threshold, bundle.case_id)


def split_dataset(samples: list, ratio: float = DEFAULT_SPLIT, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle (numpy PCG64), then the first ceil(ratio*N) go to train."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if not samples:
        raise EmptyDataset("nothing to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = math.ceil(ratio * len(samples))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    if not val:
        log.warning("split of %d case(s) at ratio %.3f leaves the validation set empty", len(samples), ratio)
    return train, val


def save_sample(sample: Sample, path: str | os.PathLike) -> None:
    write_archive(path, {"image": sample.image.astype("<f4", copy=False), "mask": sample.mask.astype(np.uint8, copy=False)})


def load_sample(path: str | os.PathLike) -> Sample:
    arrays, _ = read_archive(path)
    if set(arrays) != {"image", "mask"}:
        raise CorruptArchive(f"{path}: expected members image.npy and mask.npy, found {sorted(arrays)}")
    image, mask = arrays["image"], arrays["mask"]
    if image.dtype != np.float32 or image.ndim != 4 or image.shape[-1] != 3:
        raise CorruptArchive(f"{path}: image must be float32 (D,H,W,3), got {image.dtype} {image.shape}")
    if mask.dtype != np.uint8 or mask.shape != image.shape[:3]:
        raise CorruptArchive(f"{path}: mask must be uint8 {image.shape[:3]}, got {mask.dtype} {mask.shape}")
    return Sample(image, mask)


def list_cases(in_dir: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(in_dir).iterdir() if p.is_dir())


def preprocess_tree(
    in_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    window: Window = DEFAULT_WINDOW,
    threshold: float = DEFAULT_THRESHOLD,
    ratio: float = DEFAULT_SPLIT,
    seed: int = 0,
) -> tuple[DatasetManifest, dict[str, str]]:
    """Preprocess every case directory under ``in_dir`` into ``out_dir``.

    Returns the manifest and a map of case id to error message for cases
    that failed to load.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kept: list[str] = []
    dropped = 0
    failures: dict[str, str] = {}
    for case_dir in list_cases(in_dir):
        try:
            result = preprocess_case(CaseBundle.from_dir(case_dir), window, threshold)
        except (OSError, NiftiError, UnexpectedLabel, ShapeMismatch, WindowOutOfBounds, NonFiniteInput) as exc:
            log.error("case %s failed: %s", case_dir.name, exc)
            failures[case_dir.name] = str(exc)
            continue
        if isinstance(result, Dropped):
            log.info("case %s dropped (annotated fraction %.5f)", case_dir.name, result.fraction)
            dropped += 1
            continue
        name = f"{case_dir.name}.npz"
        save_sample(result, out_dir / name)
        kept.append(name)
    if kept:
        train, val = split_dataset(kept, ratio, seed)
    else:
        train, val = [], []
    manifest = DatasetManifest(
        train_files=train,
        val_files=val,
        seed=seed,
        split_ratio=ratio,
        crop_window=window,
        annotation_threshold=threshold,
        kept_count=len(kept),
        dropped_count=dropped,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest, failures
