"""Dataset manifests, synthetic phantoms, augmentation and batching.

A manifest is a flat list of records.  Augmented samples are records that
point back at their source and carry a transform tag (``"flip:1"`` or
``"flip:1;noise:0.05:<seed>"``); the transform is applied when the record is
loaded, never written to disk.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyClass, LayoutError, RadiiTooLarge, ShapeMismatch, TooFewSamples
from .nifti_io import Volume, read_volume
from .tensor_core import tensor_from_volume
from .volume_ops import (
    AugmentationPolicy,
    ResizeSpec,
    add_gaussian_noise,
    flip_lr,
    normalize_intensity,
    resize_trilinear,
)

CLASS_DIRS = {"health": 0, "patient": 1}
LABEL_DIRS = {v: k for k, v in CLASS_DIRS.items()}
SPLITS = ("train", "test")
NIFTI_SUFFIXES = (".nii", ".nii.gz")

# phantom geometry
VENTRICLE_BASE = 0.5        # ventricle radii as a fraction of the brain radii at scale 1
VENTRICLE_INTENSITY = 0.2
JITTER = 0.10
EDGE_WIDTH = 0.5            # voxels, logistic edge of both ellipsoids
DEFAULT_SCALES = (1.0, 1.6)  # ventricle_scale for label 0 / label 1


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple = (32, 32, 16)
    brain_radii: tuple = (12.0, 12.0, 6.0)
    ventricle_scale: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0
    label: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))
        object.__setattr__(self, "brain_radii", tuple(float(r) for r in self.brain_radii))
        if not self.ventricle_scale > 0:
            raise RadiiTooLarge("ventricle_scale must be positive")
        if self.label not in (0, 1):
            raise ValueError(f"phantom label must be 0 or 1, got {self.label}")
        # jittered radius plus jittered centre offset must stay inside the grid
        for r, g in zip(self.brain_radii, self.grid_shape):
            if r <= 0 or r * (1.0 + 2 * JITTER) > g / 2.0:
                raise RadiiTooLarge(f"brain radii {self.brain_radii} do not fit grid {self.grid_shape}")
        if VENTRICLE_BASE * self.ventricle_scale * (1.0 + JITTER) >= 1.0:
            raise RadiiTooLarge(f"ventricle_scale {self.ventricle_scale} pushes the cavity outside the brain")

    @property
    def source_id(self):
        return f"phantom:{self.label}:{self.seed}"


@dataclass(frozen=True)
class Record:
    source: object  # str path or PhantomSpec
    label: int
    split: str
    augmented_from: str | None = None
    transform: str | None = None

    @property
    def source_id(self):
        return self.source.source_id if isinstance(self.source, PhantomSpec) else str(self.source)

    @property
    def record_id(self):
        return self.source_id if not self.transform else f"{self.source_id}#{self.transform}"


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def counts(self, split):
        recs = self.split(split)
        return sum(r.label == 0 for r in recs), sum(r.label == 1 for r in recs)

    def subset(self, records):
        return DatasetManifest(list(records))

    # -- line-delimited export --------------------------------------------
    def dumps(self):
        lines = []
        for r in self.records:
            src = {"phantom": asdict(r.source)} if isinstance(r.source, PhantomSpec) else r.source
            lines.append(json.dumps({"source": src, "label": r.label, "split": r.split,
                                     "transform": r.transform, "augmented_from": r.augmented_from},
                                    sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text):
        records = []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            src = d["source"]
            if isinstance(src, dict):
                src = PhantomSpec(**src["phantom"])
            records.append(Record(src, int(d["label"]), d["split"], d.get("augmented_from"), d.get("transform")))
        return cls(records)

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# directory scanning
# --------------------------------------------------------------------------

def _is_nifti(name):
    return name.endswith(NIFTI_SUFFIXES)


def scan_directory(root) -> DatasetManifest:
    """Records for ``root/{train,test}/{health,patient}/*.nii[.gz]``; health=0, patient=1."""
    root = Path(root)
    records = []
    for split in SPLITS:
        for cls_dir, label in CLASS_DIRS.items():
            d = root / split / cls_dir
            if not d.is_dir():
                raise LayoutError(f"missing folder {d}")
            files = sorted(f for f in os.listdir(d) if _is_nifti(f) and (d / f).is_file())
            if not files:
                raise EmptyClass(f"no NIfTI files in {d}")
            records.extend(Record(str(d / f), label, split) for f in files)
    records.sort(key=lambda r: os.path.relpath(r.source, root))
    return DatasetManifest(records)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def apply_augmentation(manifest: DatasetManifest, policy: AugmentationPolicy) -> DatasetManifest:
    """Append ``policy.num_augmented_per_class`` flipped train records per class.

    Sources are drawn without replacement; a fresh permutation is started
    only once every source of the class has been used.
    """
    if policy.num_augmented_per_class == 0:
        return DatasetManifest(list(manifest.records))
    rng = np.random.default_rng(policy.seed)
    originals = [r for r in manifest.records if r.split == "train" and r.augmented_from is None]
    if not originals:
        raise TooFewSamples("augmentation needs a non-empty train split")
    added = []
    for label in (0, 1):
        pool = [r for r in originals if r.label == label]
        if not pool:
            raise EmptyClass(f"no train records with label {label} to augment")
        if policy.num_augmented_per_class > 8 * len(pool):
            raise ValueError(f"{policy.num_augmented_per_class} augmented samples from only "
                             f"{len(pool)} sources exceeds the 8x bound")
        order = []
        while len(order) < policy.num_augmented_per_class:
            order.extend(rng.permutation(len(pool)).tolist())
        for i in order[:policy.num_augmented_per_class]:
            src = pool[i]
            tag = f"flip:{policy.flip_axis}"
            if policy.noise_sigma > 0:
                tag += f";noise:{policy.noise_sigma!r}:{int(rng.integers(2**63))}"
            added.append(Record(src.source, src.label, "train", augmented_from=src.source_id, transform=tag))
    return DatasetManifest(list(manifest.records) + added)


def apply_transform(v: Volume, tag: str | None) -> Volume:
    if not tag:
        return v
    for part in tag.split(";"):
        name, *args = part.split(":")
        if name == "flip":
            v = flip_lr(v, int(args[0]))
        elif name == "noise":
            v = add_gaussian_noise(v, float(args[0]), int(args[1]))
        else:
            raise ValueError(f"unknown transform {part!r}")
    return v


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

def _soft_ellipsoid(grid, center, radii):
    axes = [(np.arange(n) - c) / r for n, c, r in zip(grid, center, radii)]
    rr = np.sqrt(axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2)
    # signed distance to the surface, approximately in voxels
    dist = (rr - 1.0) * min(radii)
    return 0.5 * (1.0 - np.tanh(dist / (2.0 * EDGE_WIDTH)))


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Ellipsoidal "brain" (intensity 1) with a central "ventricle" cavity (0.2).

    The centre moves by up to 10% of the brain radii and the ventricle radii
    vary by up to 10% per axis.  Jitter is symmetric, so mirroring along any
    axis yields a sample from the same distribution.
    """
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid_shape
    radii = np.asarray(spec.brain_radii)
    center = (np.asarray(grid) - 1) / 2.0 + rng.uniform(-JITTER, JITTER, 3) * radii
    vent_radii = radii * VENTRICLE_BASE * spec.ventricle_scale * rng.uniform(1 - JITTER, 1 + JITTER, 3)
    brain = _soft_ellipsoid(grid, center, radii)
    cavity = _soft_ellipsoid(grid, center, vent_radii)
    data = brain * (1.0 - (1.0 - VENTRICLE_INTENSITY) * cavity)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, grid)
    return Volume(data, (1.0, 1.0, 1.0), spec.source_id)


def phantom_manifest(train_per_class=(9, 9), test_per_class=(20, 20), grid_shape=(32, 32, 16),
                     brain_radii=None, noise_sigma=0.05, seed=0, scales=DEFAULT_SCALES) -> DatasetManifest:
    """Balanced phantom dataset; per-record seeds come from one seeded stream."""
    if brain_radii is None:
        brain_radii = tuple(0.36 * g for g in grid_shape)
    rng = np.random.default_rng(seed)
    records = []
    for split, counts in (("train", train_per_class), ("test", test_per_class)):
        for label in (0, 1):
            for _ in range(counts[label]):
                ps = PhantomSpec(grid_shape, brain_radii, scales[label], noise_sigma,
                                 int(rng.integers(2**63)), label)
                records.append(Record(ps, label, split))
    return DatasetManifest(records)


def write_phantom_tree(manifest: DatasetManifest, root, compress=True) -> list:
    """Materialize phantom records as ``root/{split}/{health,patient}/*.nii[.gz]``."""
    from .nifti_io import write_volume

    root = Path(root)
    written = []
    counters = {}
    for r in manifest.records:
        if not isinstance(r.source, PhantomSpec):
            continue
        d = root / r.split / LABEL_DIRS[r.label]
        d.mkdir(parents=True, exist_ok=True)
        key = (r.split, r.label)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        path = d / f"phantom_{idx:03d}.nii{'.gz' if compress else ''}"
        write_volume(path, apply_transform(generate_phantom(r.source), r.transform))
        written.append(path)
    for split in SPLITS:
        for cls_dir in CLASS_DIRS:
            (root / split / cls_dir).mkdir(parents=True, exist_ok=True)
    return written


# --------------------------------------------------------------------------
# loading and batching
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchStream:
    batch_size: int = 2
    shuffle_seed: int = 0
    shuffle: bool = True
    normalization: str = "minmax"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class RecordLoader:
    """Loads records as (X, Y, Z, 1) float32 tensors, caching by record id.

    Pipeline: read/generate -> resize to ``target_shape`` if needed ->
    normalize -> augmentation transform -> channel axis.
    """

    def __init__(self, target_shape, normalization="minmax", cache=True):
        self.target_shape = tuple(int(t) for t in target_shape)
        self.normalization = normalization
        self._cache = {} if cache else None

    def load_volume(self, record: Record) -> Volume:
        if isinstance(record.source, PhantomSpec):
            v = generate_phantom(record.source)
        else:
            # read_volume errors already name the offending path
            v = read_volume(record.source)
        if v.shape != self.target_shape:
            v = resize_trilinear(v, ResizeSpec(self.target_shape))
        v = normalize_intensity(v, self.normalization)
        return apply_transform(v, record.transform)

    def __call__(self, record: Record) -> np.ndarray:
        key = record.record_id
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        t = tensor_from_volume(self.load_volume(record))
        if t.shape[:3] != self.target_shape:
            raise ShapeMismatch(f"{record.source_id}: shape {t.shape[:3]} != {self.target_shape}")
        if self._cache is not None:
            self._cache[key] = t
        return t


def epoch_order(n, stream: BatchStream, epoch: int):
    if not stream.shuffle:
        return np.arange(n)
    rng = np.random.default_rng([stream.shuffle_seed, epoch])
    return rng.permutation(n)


def make_batches(manifest, split, stream: BatchStream, epoch: int, target_shape=None, loader=None):
    """Yield ``(x, y)`` batches for one epoch; ``x`` is (B, X, Y, Z, 1) float32."""
    records = manifest.split(split) if isinstance(manifest, DatasetManifest) else list(manifest)
    if loader is None:
        if target_shape is None:
            raise ValueError("make_batches needs target_shape or a loader")
        loader = RecordLoader(target_shape, stream.normalization)
    order = epoch_order(len(records), stream, epoch)
    for start in range(0, len(order), stream.batch_size):
        idx = order[start:start + stream.batch_size]
        x = np.stack([loader(records[i]) for i in idx])
        y = np.array([records[i].label for i in idx], dtype=np.int64)
        yield x, y


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int = 0):
    """Folds over the train records (indices into ``manifest.split("train")``)."""
    records = manifest.split("train")
    if k < 2:
        raise TooFewSamples("k must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(records), dtype=np.int64)
    offset = 0
    for label in (0, 1):
        idx = np.array([i for i, r in enumerate(records) if r.label == label], dtype=np.int64)
        if len(idx) < k:
            raise TooFewSamples(f"class {label} has {len(idx)} train records, fewer than k={k}")
        idx = idx[rng.permutation(len(idx))]
        # continue the round-robin across classes so remainders spread out
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx) % k
    folds = []
    all_idx = np.arange(len(records))
    for f in range(k):
        val = all_idx[fold_of == f]
        train = all_idx[fold_of != f]
        folds.append((train.tolist(), val.tolist()))
    return folds


def holdout_split(manifest: DatasetManifest, fraction=0.2, seed=0):
    """Stratified (train, validation) index lists over the train records."""
    records = manifest.split("train")
    rng = np.random.default_rng(seed)
    val = []
    for label in (0, 1):
        idx = [i for i, r in enumerate(records) if r.label == label and r.augmented_from is None]
        n_val = max(1, int(round(fraction * len(idx)))) if idx else 0
        perm = rng.permutation(len(idx))
        val.extend(idx[j] for j in perm[:n_val])
    val_sources = {records[i].source_id for i in val}
    # augmented copies of a held-out source would leak it into training
    held = set(val)
    train = [i for i, r in enumerate(records)
             if i not in held and (r.augmented_from or r.source_id) not in val_sources]
    return sorted(train), sorted(val)


def with_split(records, split):
    return [replace(r, split=split) for r in records]
