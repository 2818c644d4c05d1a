"""End-to-end acceptance checks A1-A8.

Each test prints a single ``A<n> PASS|FAIL ...`` line, visible under plain
``pytest -v`` as well as ``-s``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from oracles import auc_pairwise, conv3d_direct, parameter_hand_sum
from volt3d import layers as L
from volt3d.cli import main, run_ab
from volt3d.config import RunConfig
from volt3d.dataset import BatchStream, RecordLoader, apply_augmentation, make_batches, phantom_manifest
from volt3d.gradsuite import run_gradient_suite
from volt3d.metrics import roc_auc
from volt3d.model import ArchitectureSpec, build_model, count_parameters, forward, load_checkpoint, save_checkpoint, shape_trace
from volt3d.nifti_io import Volume, read_volume, write_volume
from volt3d.trainer import TrainConfig, train
from volt3d.volume_ops import AugmentationPolicy

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(tag, passed, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if passed else 'FAIL'}  {detail}")
        assert passed, f"{tag}: {detail}"
    return emit


def test_a1_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = run_gradient_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = {r.op_name: r.max_rel_error for r in reports}
    failed = [r.line() for r in reports if not r.passed]
    detail = f"{len(reports)} checks in {elapsed:.1f}s (< 60s); " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    if failed:
        detail += "; failing: " + " | ".join(failed)
    verdict("A1", not failed and elapsed < 60, detail)


def test_a2_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    conv_err = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 4))
        n, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
        xyz = tuple(int(v) for v in rng.integers(k, k + 3, size=3))
        x = rng.normal(size=(n, *xyz, cin))
        w = rng.normal(size=(k, k, k, cin, cout))
        b = rng.normal(size=cout)
        out, _ = L.conv3d_forward(x, L.Conv3DParams(w, b))
        conv_err = max(conv_err, float(np.max(np.abs(out - conv3d_direct(x, w, b)))))
    auc_err = 0.0
    for _ in range(100):
        size = int(rng.integers(2, 30))
        # coarse grid so ties are common
        scores = rng.integers(0, 6, size=size) / 5.0
        labels = rng.integers(0, 2, size=size)
        labels[0], labels[1] = 0, 1
        auc_err = max(auc_err, abs(roc_auc(scores, labels)[0] - auc_pairwise(scores, labels)))
    verdict("A2", conv_err <= 1e-10 and auc_err <= 1e-12,
            f"conv max abs diff {conv_err:.1e} (<= 1e-10, 50 cases); AUC max diff {auc_err:.1e} (<= 1e-12, 100 sets)")


def test_a3_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(3)
    payloads = {
        2: rng.integers(0, 256, size=(5, 4, 3)),
        4: rng.integers(-32768, 32768, size=(5, 4, 3)),
        8: rng.integers(-2**24, 2**24, size=(5, 4, 3)),
        16: rng.normal(size=(5, 4, 3)) * 1e3,
        64: rng.normal(size=(5, 4, 3)),
    }
    bad = []
    for code, raw in payloads.items():
        v = Volume(raw.astype(np.float32), (0.9, 1.1, 2.5))
        for name in ("v.nii", "v.nii.gz"):
            path = tmp_path / f"{code}_{name}"
            write_volume(path, v, datatype_code=code)
            back = read_volume(path)
            if not (back.shape == v.shape and back.data.tobytes() == v.data.tobytes() and back.spacing == v.spacing):
                bad.append(f"{code}/{name}")
    spec = ArchitectureSpec(input_shape=(16, 16, 10, 1), block_filters=(4, 8), dense_units=16)
    m = build_model(spec, seed=5)
    x = rng.normal(size=(3, 16, 16, 10, 1)).astype(np.float32)
    forward(m, x, "train")  # move running stats off their initial values
    save_checkpoint(m, tmp_path / "m.ckpt")
    m2 = load_checkpoint(tmp_path / "m.ckpt")
    same = forward(m, x, "infer")[0].tobytes() == forward(m2, x, "infer")[0].tobytes()
    verdict("A3", not bad and same,
            f"NIfTI codes 2/4/8/16/64 plain+gz bit-exact: {'all' if not bad else 'failed ' + ','.join(bad)}; "
            f"checkpoint infer outputs bit-identical: {same}")


def test_a4_architecture_trace(verdict):
    spec = ArchitectureSpec()
    trace = shape_trace(spec)
    expected_tail = [(1, 6, 6, 2, 256), (1, 256), (1, 512), (1, 1)]
    counts = count_parameters(spec)
    hand = parameter_hand_sum(1, [64, 64, 128, 256], 512)
    m = build_model(ArchitectureSpec(input_shape=(32, 32, 16, 1), block_filters=(8, 16), dense_units=32))
    built = sum(m.params[k].size for k in m.trainable_names())
    ok = trace[-4:] == expected_tail and counts == hand and built == count_parameters(m.spec)[0]
    verdict("A4", ok, f"trace tail {trace[-4:]}; trainable/total {counts} vs hand sum {hand}")


def test_a5_overfit_capacity(verdict):
    # (16,16,8) cannot pass two valid-conv + floor-pool blocks; 10 is the smallest z that can
    spec = ArchitectureSpec(input_shape=(16, 16, 10, 1), block_filters=(4, 8))
    manifest = phantom_manifest((4, 4), (1, 1), grid_shape=(16, 16, 10), noise_sigma=0.05, seed=0)
    t0 = time.perf_counter()
    _, history = train(build_model(spec, seed=0), manifest, TrainConfig(epochs=200, batch_size=2, lr=1e-4, seed=0))
    elapsed = time.perf_counter() - t0
    hit = next((r.epoch for r in history if r.train_accuracy == 1.0), None)
    verdict("A5", hit is not None and elapsed < 300,
            f"train accuracy 1.0 first at epoch {hit} (<= 200), 8 phantoms 16x16x10, filters [4,8]; {elapsed:.1f}s")


@pytest.mark.slow
def test_a6_augmentation_effect(verdict, tmp_path):
    cfg = RunConfig.load(CONFIGS / "ab_phantom.cfg", [f"out.dir={tmp_path}"])
    t0 = time.perf_counter()
    rows, summary, _ = run_ab(cfg)
    elapsed = time.perf_counter() - t0
    base = summary["baseline_accuracy"]
    aug = summary["augmented_accuracy"]
    per_seed = ", ".join(f"{r['seed']}:{r['delta_accuracy']:+.3f}" for r in rows)
    verdict("A6", len(rows) == 5 and aug >= base - 0.02 and elapsed < 1800,
            f"mean acc baseline {base:.3f} augmented {aug:.3f} delta {summary['delta_accuracy']:+.3f} "
            f"(floor -0.020); mean AUC delta {summary['delta_auc']:+.3f}; per-seed [{per_seed}]; {elapsed:.0f}s")


def test_a7_pipeline_arithmetic(verdict):
    grid = (8, 8, 6)
    manifest = phantom_manifest((9, 9), (5, 5), grid_shape=grid, noise_sigma=0.0, seed=0)
    aug = apply_augmentation(manifest, AugmentationPolicy(num_augmented_per_class=7))
    train_records = aug.split("train")
    loader = RecordLoader(grid)
    batches = list(make_batches(aug, "train", BatchStream(batch_size=2, shuffle_seed=0), 0, loader=loader))
    # the multiset of batched tensors equals the multiset of record tensors
    seen = sorted(loader(r).tobytes() for r in train_records)
    got = sorted(x[i].tobytes() for x, _ in batches for i in range(x.shape[0]))
    labels = sum(int(y.sum()) for _, y in batches)
    ok = len(train_records) == 32 and len(batches) == 16 and seen == got and labels == 16
    verdict("A7", ok, f"{len(train_records)} train records, {len(batches)} batches of 2, each record once: {seen == got}")


def test_a8_determinism(verdict, tmp_path):
    args = ["train", "data.phantom.grid=16,16,10", "model.input_shape=16,16,10", "model.filters=4,8",
            "data.phantom.train_counts=4,4", "data.phantom.test_counts=2,2", "train.epochs=3",
            "augment.enabled=true", "augment.count=2"]
    assert main(args + [f"out.dir={tmp_path / 'a'}"]) == 0
    assert main(args + [f"out.dir={tmp_path / 'b'}"]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("curves.csv", "model.ckpt")}
    verdict("A8", all(same.values()), f"byte-identical across two runs: {same}")
