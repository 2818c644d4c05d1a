"""Adam training loop, evaluation, cross-validation and curve export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .dataset import (
    BatchStream,
    DatasetManifest,
    RecordLoader,
    apply_augmentation,
    holdout_split,
    make_batches,
    stratified_kfold,
)
from .errors import IoFailure, KeyMismatch, NonFiniteLoss
from .metrics import DEFAULT_THRESHOLD, evaluate_scores
from .model import ArchitectureSpec, ModelState, backward, build_model, forward, predict
from .volume_ops import AugmentationPolicy

log = logging.getLogger(__name__)

BASELINE_EPOCHS = 50
AUGMENTED_EPOCHS = 80


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(params) != set(grads):
        raise KeyMismatch(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, theta in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(theta.dtype, copy=False)
    state.step = t
    return params, state


@dataclass
class TrainConfig:
    epochs: int = BASELINE_EPOCHS
    batch_size: int = 2
    augmentation: AugmentationPolicy | None = None
    noise_sigma: float = 0.0
    lr: float = 1e-4
    seed: int = 0
    validation: str = "none"  # "none" | "holdout[:fraction]" | "kfold:k"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization needs batch statistics)")
        self.validation_mode()

    def validation_mode(self):
        kind, _, arg = self.validation.partition(":")
        if kind == "none":
            return "none", None
        if kind == "holdout":
            return "holdout", float(arg) if arg else 0.2
        if kind == "kfold":
            return "kfold", int(arg) if arg else 5
        raise ValueError(f"unknown validation mode {self.validation!r}")


def baseline_config(**kw):
    return TrainConfig(epochs=BASELINE_EPOCHS, augmentation=None, **kw)


def augmented_config(count=7, flip_axis=1, noise_sigma=0.0, **kw):
    seed = kw.get("seed", 0)
    policy = AugmentationPolicy(flip_axis, count, noise_sigma, seed)
    return TrainConfig(epochs=AUGMENTED_EPOCHS, augmentation=policy, **kw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None


def _seed(*parts):
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0]


def _train_batches(records, stream, epoch, loader):
    """Epoch batches, with a trailing single sample folded into the previous batch."""
    batches = list(make_batches(records, None, stream, epoch, loader=loader))
    if len(batches) > 1 and batches[-1][0].shape[0] == 1:
        x1, y1 = batches.pop()
        x0, y0 = batches.pop()
        batches.append((np.concatenate([x0, x1]), np.concatenate([y0, y1])))
    return batches


def predict_records(model: ModelState, records, loader=None, batch_size=8):
    if loader is None:
        loader = RecordLoader(model.spec.input_shape[:3])
    scores = []
    for start in range(0, len(records), batch_size):
        x = np.stack([loader(r) for r in records[start:start + batch_size]])
        scores.append(predict(model, x, batch_size))
    return np.concatenate(scores) if scores else np.zeros(0)


def _loss_and_accuracy(scores, labels):
    loss, _ = L.bce_loss(scores.reshape(-1, 1), labels)
    acc = float(np.mean((scores >= DEFAULT_THRESHOLD) == (labels == 1)))
    return loss, acc


def train(model: ModelState, manifest: DatasetManifest, cfg: TrainConfig, val_records=None, progress=None):
    """Train ``model`` in place; returns ``(model, [EpochRecord, ...])``.

    Augmentation (``cfg.augmentation``) is applied here, after any holdout
    split, so held-out sources never leak in through flipped copies.
    """
    records = manifest.split("train")
    if not records:
        raise ValueError("manifest has no train records")
    mode, arg = cfg.validation_mode()
    if val_records is None and mode == "holdout":
        tr_idx, va_idx = holdout_split(DatasetManifest(records), arg, cfg.seed)
        val_records = [records[i] for i in va_idx]
        records = [records[i] for i in tr_idx]
    if cfg.augmentation is not None:
        records = apply_augmentation(DatasetManifest(records), cfg.augmentation).split("train")

    loader = RecordLoader(model.spec.input_shape[:3])
    stream = BatchStream(cfg.batch_size, shuffle_seed=cfg.seed)
    opt = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        total_loss = 0.0
        correct = 0
        seen = 0
        for b, (x, y) in enumerate(_train_batches(records, stream, epoch, loader)):
            if cfg.noise_sigma > 0:
                rng = np.random.default_rng(_seed(cfg.seed, epoch, b, 1))
                x = (x + rng.normal(0.0, cfg.noise_sigma, x.shape)).astype(np.float32)
            p, tape = forward(model, x, "train", seed=_seed(cfg.seed, epoch, b, 2))
            loss, grad = L.bce_loss(p, y)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            grads = backward(model, tape, grad)
            adam_step(model.trainable(), grads, opt)
            model.bump()
            total_loss += loss * len(y)
            correct += int(np.sum((p[:, 0] >= DEFAULT_THRESHOLD) == (y == 1)))
            seen += len(y)
        rec = EpochRecord(epoch + 1, total_loss / seen, correct / seen)
        if val_records:
            scores = predict_records(model, val_records, loader)
            rec.val_loss, rec.val_accuracy = _loss_and_accuracy(scores, np.array([r.label for r in val_records]))
        history.append(rec)
        if progress is not None:
            progress(rec)
    return model, history


def evaluate(model: ModelState, manifest, split="test", threshold=DEFAULT_THRESHOLD, loader=None):
    records = manifest.split(split) if isinstance(manifest, DatasetManifest) else list(manifest)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    scores = predict_records(model, records, loader)
    labels = np.array([r.label for r in records])
    return evaluate_scores(scores, labels, threshold)


def summarize(reports):
    """Mean and (population) std of each scalar metric across reports."""
    out = {}
    for key in ("accuracy", "precision", "recall", "f1", "auc"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                        "min": float(np.min(vals)), "max": float(np.max(vals))}
    return out


def cross_validate(manifest: DatasetManifest, cfg: TrainConfig, k: int, arch: ArchitectureSpec, progress=None):
    """k stratified folds over the original train records, each trained from scratch."""
    originals = DatasetManifest([r for r in manifest.split("train") if r.augmented_from is None])
    records = originals.split("train")
    results = []
    fold_cfg = replace(cfg, validation="none")
    for f, (tr, va) in enumerate(stratified_kfold(originals, k, cfg.seed)):
        model = build_model(arch, seed=_seed(cfg.seed, f, 3))
        fold_manifest = DatasetManifest([records[i] for i in tr])
        train(model, fold_manifest, fold_cfg, progress=progress)
        results.append((f, evaluate(model, [records[i] for i in va])))
    return results


def export_curves(records, path):
    if not records:
        raise ValueError("no epoch records to export")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "loss", "accuracy"])
            for r in records:
                w.writerow([r.epoch, "train", f"{r.train_loss:.6g}", f"{r.train_accuracy:.6g}"])
                if r.val_loss is not None:
                    w.writerow([r.epoch, "val", f"{r.val_loss:.6g}", f"{r.val_accuracy:.6g}"])
    except OSError as exc:
        raise IoFailure(f"cannot write curves to {path}: {exc}") from exc


def read_curves(path):
    by_epoch = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            e = int(row["epoch"])
            rec = by_epoch.setdefault(e, EpochRecord(e, math.nan, math.nan))
            if row["split"] == "train":
                rec.train_loss, rec.train_accuracy = float(row["loss"]), float(row["accuracy"])
            else:
                rec.val_loss, rec.val_accuracy = float(row["loss"]), float(row["accuracy"])
    return [by_epoch[e] for e in sorted(by_epoch)]
