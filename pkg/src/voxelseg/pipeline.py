"""Batch generation, training loop, evaluation, prediction and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import losses_metrics as lm
from . import nifti_io
from . import tensor_core as tc
from . import unet3d
from .archive import read_archive, write_archive
from .errors import BadConfig, CorruptArchive, EmptyDataset, NonFiniteLoss, VersionMismatch
from .volume_prep import CaseBundle, DatasetManifest, Sample, load_sample, preprocess_case

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "voxelseg-checkpoint/1"
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "train_iou", "val_loss", "val_acc", "val_iou")


@dataclasses.dataclass
class TrainConfig:
    data_dir: str
    out_dir: str = "run"
    epochs: int = 100
    batch_size: int = 2
    lr: float = 1e-4
    gamma: float = 2.0
    focal_weight: float = 1.0
    base_filters: int = 32
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise BadConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise BadConfig(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise BadConfig(f"learning rate must be > 0, got {self.lr}")
        if self.gamma < 0:
            raise BadConfig(f"gamma must be >= 0, got {self.gamma}")
        if self.base_filters < 1:
            raise BadConfig(f"base filters must be >= 1, got {self.base_filters}")
        if self.checkpoint_every < 1:
            raise BadConfig(f"checkpoint interval must be >= 1, got {self.checkpoint_every}")


@dataclasses.dataclass
class Checkpoint:
    train_config: dict
    model_config: unet3d.UNetConfig
    params: dict[str, np.ndarray]
    adam: tc.AdamState
    epoch: int
    rng_state: dict
    history: list[dict] = dataclasses.field(default_factory=list)
    crop_window: list | None = None


# ------------------------------------------------------------------ batches


def steps_per_epoch(n_files: int, batch_size: int) -> int:
    return math.ceil(n_files / batch_size)


def epoch_order(n_files: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of the file list for one epoch, derived from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n_files)


def epoch_batches(files: list, batch_size: int, seed: int, epoch: int) -> list[list]:
    order = epoch_order(len(files), seed, epoch)
    return [[files[i] for i in order[s : s + batch_size]] for s in range(0, len(files), batch_size)]


def load_batch(paths: list, num_classes: int = lm.NUM_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    samples = [load_sample(p) for p in paths]
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


def batch_generator(
    files: list, batch_size: int, seed: int, start_epoch: int = 0
) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
    """Endless stream of ``(epoch, step, images, one_hot_masks)``.

    Every epoch visits each file exactly once in a fresh seeded order;
    the last batch of an epoch may be short.
    """
    if not files:
        raise EmptyDataset("no training files")
    epoch = start_epoch
    while True:
        for step, paths in enumerate(epoch_batches(files, batch_size, seed, epoch)):
            images, masks = load_batch(paths)
            yield epoch, step, images, lm.one_hot(masks)
        epoch += 1


# --------------------------------------------------------------- checkpoint


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    arrays = {}
    for name, p in ckpt.params.items():
        arrays[f"params/{name}"] = p
        arrays[f"adam_m/{name}"] = ckpt.adam.m[name]
        arrays[f"adam_v/{name}"] = ckpt.adam.v[name]
    meta = {
        "version": CHECKPOINT_VERSION,
        "train_config": ckpt.train_config,
        "model_config": ckpt.model_config.to_dict(),
        "param_names": list(ckpt.params),
        "epoch": ckpt.epoch,
        "adam": {k: getattr(ckpt.adam, k) for k in ("t", "lr", "beta1", "beta2", "epsilon")},
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "crop_window": ckpt.crop_window,
    }
    write_archive(path, arrays, meta)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    arrays, meta = read_archive(path)
    if meta is None:
        raise CorruptArchive(f"{path}: checkpoint has no manifest.json")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION!r}")
    model_config = unet3d.UNetConfig.from_dict(meta["model_config"])
    names = meta["param_names"]
    expected = list(unet3d.param_shapes(model_config))
    if names != expected:
        raise CorruptArchive(f"{path}: parameter names do not match the model configuration")
    try:
        params = {n: arrays[f"params/{n}"] for n in names}
        m = {n: arrays[f"adam_m/{n}"] for n in names}
        v = {n: arrays[f"adam_v/{n}"] for n in names}
    except KeyError as exc:
        raise CorruptArchive(f"{path}: missing member {exc}") from exc
    shapes = unet3d.param_shapes(model_config)
    for n in names:
        if params[n].shape != shapes[n] or m[n].shape != shapes[n] or v[n].shape != shapes[n]:
            raise CorruptArchive(f"{path}: tensor {n} has the wrong shape")
    adam = tc.AdamState(m=m, v=v, **meta["adam"])
    return Checkpoint(
        train_config=meta["train_config"],
        model_config=model_config,
        params=params,
        adam=adam,
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        history=meta["history"],
        crop_window=meta.get("crop_window"),
    )


# ----------------------------------------------------------------- history


def write_history(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


# ---------------------------------------------------------------- training


def _batch_metrics(
    onehot: np.ndarray, probs: np.ndarray, loss: float, threshold: float = lm.IOU_THRESHOLD, include_background: bool = True
) -> tuple[float, float, float]:
    iou = lm.iou_score(onehot, probs, threshold=threshold, include_background=include_background)
    return loss, lm.voxel_accuracy(onehot.argmax(axis=-1), probs), iou


def evaluate_params(
    params: dict[str, np.ndarray],
    model_config: unet3d.UNetConfig,
    files: list,
    batch_size: int = 2,
    gamma: float = 2.0,
    focal_weight: float = 1.0,
    iou_threshold: float = lm.IOU_THRESHOLD,
    include_background: bool = True,
) -> dict[str, float]:
    """Infer-mode metrics over ``files``, batch means weighted by batch size."""
    if not files:
        raise EmptyDataset("nothing to evaluate")
    fp = lm.FocalParams(gamma)
    totals = np.zeros(3)
    count = 0
    for s in range(0, len(files), batch_size):
        images, masks = load_batch(files[s : s + batch_size])
        onehot = lm.one_hot(masks)
        probs, _ = unet3d.forward(params, images, model_config, train=False)
        loss = lm.total_loss(onehot, probs, focal_weight, fp).scalar
        totals += len(images) * np.array(_batch_metrics(onehot, probs, loss, iou_threshold, include_background))
        count += len(images)
    loss, acc, iou = totals / count
    return {"loss": float(loss), "accuracy": float(acc), "iou": float(iou)}


def _resolve(data_dir: str, manifest: DatasetManifest) -> tuple[list[Path], list[Path]]:
    base = Path(data_dir)
    return [base / f for f in manifest.train_files], [base / f for f in manifest.val_files]


def train(
    config: TrainConfig,
    resume: str | os.PathLike | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run the training loop; returns the final checkpoint and the history rows.

    ``max_steps`` stops early after that many optimizer steps in total (the
    partial epoch is still closed out with metrics and a history row).
    ``on_epoch`` is called with each new history row.
    """
    manifest = DatasetManifest.load(Path(config.data_dir) / "manifest.json")
    train_files, val_files = _resolve(config.data_dir, manifest)
    if not train_files:
        raise EmptyDataset(f"{config.data_dir}: manifest lists no training files")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = lm.FocalParams(config.gamma)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model_config, params, adam = ckpt.model_config, ckpt.params, ckpt.adam
        history = list(ckpt.history)
        start_epoch = ckpt.epoch
        rng = tc.make_rng(0)
        rng.bit_generator.state = ckpt.rng_state
    else:
        spatial = load_sample(train_files[0]).image.shape[:3]
        model_config = unet3d.UNetConfig(input_spatial=spatial, base_filters=config.base_filters, seed=config.seed)
        params = unet3d.build(model_config)
        adam = tc.AdamState.zeros_like(params, lr=config.lr)
        history = []
        start_epoch = 0
        rng = tc.make_rng(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    if not val_files:
        log.warning("manifest has no validation files; validation columns will be NaN")

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            train_config=dataclasses.asdict(config),
            model_config=model_config,
            params=params,
            adam=adam,
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            history=list(history),
            crop_window=[list(p) for p in manifest.crop_window],
        )

    steps_done = start_epoch * steps_per_epoch(len(train_files), config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        sums = np.zeros(3)
        n_batches = 0
        for step, paths in enumerate(epoch_batches(train_files, config.batch_size, config.seed, epoch)):
            images, masks = load_batch(paths)
            onehot = lm.one_hot(masks)
            probs, cache = unet3d.forward(params, images, model_config, train=True, rng=rng)
            loss = lm.total_loss(onehot, probs, config.focal_weight, fp)
            if not np.isfinite(loss.scalar):
                bad = [Path(p).name for p in paths]
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch + 1} step {step} on batch {bad}")
            grads = unet3d.backward(params, cache, loss.grad)
            tc.adam_step(params, grads, adam)
            sums += _batch_metrics(onehot, probs, loss.scalar)
            n_batches += 1
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                break
        train_loss, train_acc, train_iou = sums / n_batches
        if val_files:
            v = evaluate_params(params, model_config, val_files, config.batch_size, config.gamma, config.focal_weight)
        else:
            v = {"loss": math.nan, "accuracy": math.nan, "iou": math.nan}
        row = {
            "epoch": epoch + 1,
            "train_loss": float(train_loss),
            "train_acc": float(train_acc),
            "train_iou": float(train_iou),
            "val_loss": v["loss"],
            "val_acc": v["accuracy"],
            "val_iou": v["iou"],
        }
        history.append(row)
        write_history(history, out_dir / "history.csv")
        if on_epoch is not None:
            on_epoch(row)
        log.debug(
            "epoch %d/%d loss=%.4f acc=%.4f iou=%.4f val_loss=%.4f val_acc=%.4f val_iou=%.4f",
            epoch + 1, config.epochs, *(row[c] for c in HISTORY_COLUMNS[1:]),
        )
        done = epoch + 1 == config.epochs or (max_steps is not None and steps_done >= max_steps)
        if (epoch + 1) % config.checkpoint_every == 0 or done:
            save_checkpoint(snapshot(epoch + 1), out_dir / f"checkpoint_{epoch + 1:04d}.zip")
        if done:
            break
    final = snapshot(history[-1]["epoch"] if history else start_epoch)
    save_checkpoint(final, out_dir / "checkpoint_final.zip")
    return final, history


def evaluate(
    ckpt: Checkpoint, files: list, iou_threshold: float = lm.IOU_THRESHOLD, include_background: bool = True
) -> dict[str, float]:
    tcfg = ckpt.train_config
    return evaluate_params(
        ckpt.params,
        ckpt.model_config,
        files,
        tcfg.get("batch_size", 2),
        tcfg.get("gamma", 2.0),
        tcfg.get("focal_weight", 1.0),
        iou_threshold,
        include_background,
    )


def predict_case(ckpt: Checkpoint, source: Sample | CaseBundle | str | os.PathLike) -> np.ndarray:
    """Label volume (uint8 over {0,1,2,3}) for a sample, a sample archive or a raw case.

    Raw cases go through the same normalize/crop steps as training, with the
    checkpoint's crop window and no annotation filter.
    """
    if isinstance(source, (str, os.PathLike)):
        p = Path(source)
        source = CaseBundle.from_dir(p) if p.is_dir() else load_sample(p)
    if isinstance(source, CaseBundle):
        window = tuple(tuple(w) for w in ckpt.crop_window) if ckpt.crop_window else None
        bundle = dataclasses.replace(source, seg_path=None)
        if window is None:
            shape = nifti_io.read_header(bundle.t2_path)[0].shape
            window = tuple((0, n) for n in shape[:3])
        source = preprocess_case(bundle, window, threshold=-1.0)
    return unet3d.predict_labels(ckpt.params, source.image[None], ckpt.model_config)[0]


def write_mask(labels: np.ndarray, path: str | os.PathLike, gzip_output: bool | None = None) -> None:
    if gzip_output is None:
        gzip_output = str(path).endswith(".gz")
    nifti_io.write_volume(None, nifti_io.VoxelVolume(labels.astype(np.uint8)), path, gzip_output)
