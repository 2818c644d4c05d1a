import numpy as np
import pytest

from volt3d.dataset import (
    BatchStream,
    DatasetManifest,
    PhantomSpec,
    RecordLoader,
    apply_augmentation,
    generate_phantom,
    holdout_split,
    make_batches,
    phantom_manifest,
    scan_directory,
    stratified_kfold,
    write_phantom_tree,
)
from volt3d.errors import EmptyClass, LayoutError, RadiiTooLarge, TooFewSamples
from volt3d.nifti_io import Volume, write_volume
from volt3d.volume_ops import AugmentationPolicy

GRID = (8, 8, 6)


def _tree(root, counts):
    for (split, cls), n in counts.items():
        d = root / split / cls
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            write_volume(d / f"s{i:02d}.nii", Volume(np.full(GRID, float(i + 1))))
    return root


STUDY_COUNTS = {("train", "health"): 9, ("train", "patient"): 9, ("test", "health"): 5, ("test", "patient"): 5}


def _small_manifest(train=(9, 9), test=(5, 5), seed=0):
    return phantom_manifest(train, test, grid_shape=GRID, noise_sigma=0.0, seed=seed)


def test_scan_study_layout(tmp_path):
    m = scan_directory(_tree(tmp_path, STUDY_COUNTS))
    assert len(m) == 28
    assert m.counts("train") == (9, 9) and m.counts("test") == (5, 5)
    assert all(r.label == (1 if "patient" in r.source else 0) for r in m)
    assert scan_directory(tmp_path).dumps() == m.dumps()


def test_scan_empty_class(tmp_path):
    counts = dict(STUDY_COUNTS)
    counts[("train", "patient")] = 0
    _tree(tmp_path, counts)
    with pytest.raises(EmptyClass):
        scan_directory(tmp_path)


def test_scan_missing_folder(tmp_path):
    with pytest.raises(LayoutError):
        scan_directory(tmp_path)


def test_augmentation_counts_and_determinism():
    m = _small_manifest()
    aug = apply_augmentation(m, AugmentationPolicy(num_augmented_per_class=7, seed=3))
    assert aug.counts("train") == (16, 16)
    assert len(aug.split("train")) == 32 and aug.counts("test") == (5, 5)
    again = apply_augmentation(m, AugmentationPolicy(num_augmented_per_class=7, seed=3))
    assert aug.dumps() == again.dumps()
    added = [r for r in aug if r.augmented_from]
    # no source reused before the class pool is exhausted
    for label in (0, 1):
        ids = [r.augmented_from for r in added if r.label == label]
        assert len(set(ids)) == len(ids)
    assert all(r.transform == "flip:1" for r in added)


def test_augmentation_zero_is_identity():
    m = _small_manifest()
    assert apply_augmentation(m, AugmentationPolicy(num_augmented_per_class=0)).dumps() == m.dumps()


def test_augmented_record_is_mirrored():
    m = _small_manifest((1, 1), (1, 1))
    aug = apply_augmentation(m, AugmentationPolicy(num_augmented_per_class=1))
    loader = RecordLoader(GRID, cache=False)
    orig = loader(aug.records[0])
    flipped = loader(aug.records[-2])
    np.testing.assert_array_equal(flipped, orig[:, ::-1])


def test_manifest_text_round_trip(tmp_path):
    aug = apply_augmentation(_small_manifest(), AugmentationPolicy(num_augmented_per_class=2, noise_sigma=0.1))
    path = tmp_path / "m.jsonl"
    aug.save(path)
    back = DatasetManifest.load(path)
    assert back.records == aug.records


def test_sixteen_batches_each_record_once():
    aug = apply_augmentation(_small_manifest(), AugmentationPolicy(num_augmented_per_class=7))
    stream = BatchStream(batch_size=2, shuffle_seed=1)
    loader = RecordLoader(GRID)
    batches = list(make_batches(aug, "train", stream, 0, loader=loader))
    assert len(batches) == 16
    assert all(x.shape == (2, *GRID, 1) and x.dtype == np.float32 for x, _ in batches)
    assert sum(int(y.sum()) for _, y in batches) == 16


def test_epoch_permutations():
    m = _small_manifest()
    stream = BatchStream(batch_size=2, shuffle_seed=1)
    loader = RecordLoader(GRID)
    e0 = [x for x, _ in make_batches(m, "train", stream, 0, loader=loader)]
    e0b = [x for x, _ in make_batches(m, "train", stream, 0, loader=loader)]
    e1 = [x for x, _ in make_batches(m, "train", stream, 1, loader=loader)]
    assert all(np.array_equal(a, b) for a, b in zip(e0, e0b))
    assert not all(np.array_equal(a, b) for a, b in zip(e0, e1))


def test_short_final_batch():
    m = _small_manifest()
    sizes = [len(y) for _, y in make_batches(m, "test", BatchStream(batch_size=4), 0, target_shape=GRID)]
    assert sizes == [4, 4, 2]


def test_batches_resize_and_normalize(tmp_path):
    m = scan_directory(_tree(tmp_path, {k: 2 for k in STUDY_COUNTS}))
    x, _ = next(make_batches(m, "train", BatchStream(batch_size=4, shuffle=False), 0, target_shape=(4, 4, 3)))
    assert x.shape == (4, 4, 4, 3, 1)
    assert np.all(x == 0)  # constant volumes normalize to zero


def test_phantom_determinism_and_class_means():
    spec = PhantomSpec(GRID, (2.5, 2.5, 1.8), 1.0, 0.0, 11, 0)
    assert generate_phantom(spec).data.tobytes() == generate_phantom(spec).data.tobytes()
    for seed in range(20):
        a = generate_phantom(PhantomSpec((32, 32, 16), (11.5, 11.5, 5.8), 1.0, 0.0, seed, 0))
        b = generate_phantom(PhantomSpec((32, 32, 16), (11.5, 11.5, 5.8), 1.6, 0.0, seed, 1))
        assert b.data.mean() < a.data.mean()


def test_phantom_radii_checked():
    with pytest.raises(RadiiTooLarge):
        PhantomSpec((8, 8, 8), (5.0, 5.0, 5.0))
    with pytest.raises(RadiiTooLarge):
        PhantomSpec((32, 32, 16), (10.0, 10.0, 5.0), ventricle_scale=1.9)


def test_phantom_tree_scans_back(tmp_path):
    m = _small_manifest()
    files = write_phantom_tree(m, tmp_path, compress=True)
    assert len(files) == 28
    scanned = scan_directory(tmp_path)
    assert scanned.counts("train") == (9, 9) and scanned.counts("test") == (5, 5)


def test_kfold_exact_division():
    aug = apply_augmentation(_small_manifest(), AugmentationPolicy(num_augmented_per_class=7))
    recs = aug.split("train")
    folds = stratified_kfold(aug, 4, seed=0)
    assert len(folds) == 4
    seen = []
    for train, val in folds:
        labels = [recs[i].label for i in val]
        assert labels.count(0) == 4 and labels.count(1) == 4
        assert not set(train) & set(val)
        seen.extend(val)
    assert sorted(seen) == list(range(32))


def test_kfold_balanced_remainder():
    aug = apply_augmentation(_small_manifest(), AugmentationPolicy(num_augmented_per_class=7))
    recs = aug.split("train")
    folds = stratified_kfold(aug, 3, seed=2)
    for label in (0, 1):
        sizes = sorted(sum(recs[i].label == label for i in val) for _, val in folds)
        assert sizes == [5, 5, 6]
    assert folds == stratified_kfold(aug, 3, seed=2)


def test_kfold_too_few():
    with pytest.raises(TooFewSamples):
        stratified_kfold(_small_manifest((2, 2)), 3)


def test_holdout_excludes_augmented_copies():
    aug = apply_augmentation(_small_manifest(), AugmentationPolicy(num_augmented_per_class=7))
    recs = aug.split("train")
    train, val = holdout_split(aug, 0.2, seed=0)
    held = {recs[i].source_id for i in val}
    assert not set(train) & set(val)
    assert all((recs[i].augmented_from or recs[i].source_id) not in held for i in train)
