"""Finite-difference checks for every layer and for a tiny end-to-end model.

Each layer is reduced to a scalar by a fixed random projection,
``f(x) = sum(R * layer(x))``, so its analytic gradient is ``layer.backward(R)``.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from .model import ArchitectureSpec, backward, build_model, forward
from .tensor_core import GradCheckReport, finite_diff_check

EPSILON = 1e-5
LAYER_THRESHOLD = 1e-4
SMOOTH_THRESHOLD = 1e-6
MODEL_THRESHOLD = 1e-3

# smallest 2-block input that survives valid conv + floor pooling twice
TINY_SPEC = ArchitectureSpec(input_shape=(16, 16, 10, 1), block_filters=(2, 2))

LAYER_NAMES = ("conv3d", "maxpool3d", "batchnorm", "global_avg_pool", "dense",
               "relu", "sigmoid", "dropout", "bce", "model")


def _merge(name, reports, threshold):
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(name, worst.max_rel_error,
                           (f"{worst.op_name}",) + tuple(worst.worst_index),
                           all(r.passed for r in reports), threshold)


def _projection(rng, shape):
    # magnitudes bounded away from 0 keep every true gradient entry well above roundoff
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def _spatial(rng, n_max=2, ext=(1, 6), c_max=3):
    n = int(rng.integers(1, n_max + 1))
    xyz = tuple(int(v) for v in rng.integers(ext[0], ext[1] + 1, size=3))
    c = int(rng.integers(1, c_max + 1))
    return (n, *xyz, c)


def check_conv3d(rng, corrupt=False):
    k = int(rng.integers(1, 4))
    shape = _spatial(rng, ext=(k, 6))
    cout = int(rng.integers(1, 4))
    x = rng.normal(size=shape)
    w = rng.normal(size=(k, k, k, shape[-1], cout))
    b = rng.normal(size=cout)
    out_shape = L.conv3d_forward(x, L.Conv3DParams(w, b))[0].shape
    R = _projection(rng, out_shape)

    def grads(xx, ww, bb):
        out, cache = L.conv3d_forward(xx, L.Conv3DParams(ww, bb))
        gx, gw, gb = L.conv3d_backward(cache, R)
        if corrupt:
            gw = gw * 1.01
        return float(np.sum(R * out)), (gx, gw, gb)

    return [
        finite_diff_check(lambda v: (grads(v, w, b)[0], grads(v, w, b)[1][0]), x, EPSILON, LAYER_THRESHOLD, "conv3d.x"),
        finite_diff_check(lambda v: (grads(x, v, b)[0], grads(x, v, b)[1][1]), w, EPSILON, LAYER_THRESHOLD, "conv3d.w"),
        finite_diff_check(lambda v: (grads(x, w, v)[0], grads(x, w, v)[1][2]), b, EPSILON, LAYER_THRESHOLD, "conv3d.b"),
    ]


def check_maxpool3d(rng):
    shape = _spatial(rng, ext=(2, 6))
    # distinct, well separated values so a 1e-5 nudge never changes a winner
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.uniform(0, 1e-3, shape)
    out, _ = L.maxpool3d_forward(x)
    R = _projection(rng, out.shape)

    def f(v):
        o, rec = L.maxpool3d_forward(v)
        return float(np.sum(R * o)), L.maxpool3d_backward(rec, R)

    return [finite_diff_check(f, x, EPSILON, LAYER_THRESHOLD, "maxpool3d.x")]


def check_batchnorm(rng):
    # with only 2 values per channel x_hat is pinned near +-1 and the x-gradient
    # is pure roundoff, so demand a few more
    shape = _spatial(rng, ext=(2, 4))
    c = shape[-1]
    x = rng.normal(size=shape) * 2.0 + 0.5
    gamma = rng.normal(size=c)
    beta = rng.normal(size=c)
    R = _projection(rng, shape)

    def run(xx, gg, bb):
        s = L.BatchNormState(gg, bb, np.zeros(c), np.ones(c))
        out, cache = L.batchnorm_forward(xx, s, "train")
        return float(np.sum(R * out)), L.batchnorm_backward(cache, R)

    return [
        finite_diff_check(lambda v: (run(v, gamma, beta)[0], run(v, gamma, beta)[1][0]), x, EPSILON, LAYER_THRESHOLD, "batchnorm.x"),
        finite_diff_check(lambda v: (run(x, v, beta)[0], run(x, v, beta)[1][1]), gamma, EPSILON, LAYER_THRESHOLD, "batchnorm.gamma"),
        finite_diff_check(lambda v: (run(x, gamma, v)[0], run(x, gamma, v)[1][2]), beta, EPSILON, LAYER_THRESHOLD, "batchnorm.beta"),
    ]


def check_gap(rng):
    shape = _spatial(rng)
    x = rng.normal(size=shape)
    R = _projection(rng, (shape[0], shape[-1]))

    def f(v):
        out, cache = L.global_avg_pool_forward(v)
        return float(np.sum(R * out)), L.global_avg_pool_backward(cache, R)

    return [finite_diff_check(f, x, EPSILON, SMOOTH_THRESHOLD, "global_avg_pool.x")]


def check_dense(rng):
    n, fin, fout = (int(v) for v in rng.integers(1, 7, size=3))
    x = rng.normal(size=(n, fin))
    w = rng.normal(size=(fin, fout))
    b = rng.normal(size=fout)
    R = _projection(rng, (n, fout))

    def run(xx, ww, bb):
        out, cache = L.dense_forward(xx, L.DenseParams(ww, bb))
        return float(np.sum(R * out)), L.dense_backward(cache, R)

    return [
        finite_diff_check(lambda v: (run(v, w, b)[0], run(v, w, b)[1][0]), x, EPSILON, LAYER_THRESHOLD, "dense.x"),
        finite_diff_check(lambda v: (run(x, v, b)[0], run(x, v, b)[1][1]), w, EPSILON, LAYER_THRESHOLD, "dense.w"),
        finite_diff_check(lambda v: (run(x, w, v)[0], run(x, w, v)[1][2]), b, EPSILON, LAYER_THRESHOLD, "dense.b"),
    ]


def check_relu(rng):
    shape = _spatial(rng)
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 1e-2, x + np.sign(x + 1e-12) * 1e-2, x)  # stay off the kink
    R = _projection(rng, shape)

    def f(v):
        out, cache = L.relu_forward(v)
        return float(np.sum(R * out)), L.relu_backward(cache, R)

    return [finite_diff_check(f, x, EPSILON, SMOOTH_THRESHOLD, "relu.x")]


def check_sigmoid(rng):
    shape = _spatial(rng)
    x = rng.uniform(-4.0, 4.0, size=shape)
    R = _projection(rng, shape)

    def f(v):
        out, cache = L.sigmoid_forward(v)
        return float(np.sum(R * out)), L.sigmoid_backward(cache, R)

    return [finite_diff_check(f, x, EPSILON, SMOOTH_THRESHOLD, "sigmoid.x")]


def check_dropout(rng):
    shape = _spatial(rng)
    x = rng.normal(size=shape)
    R = _projection(rng, shape)
    mask = L.dropout_mask(shape, 0.3, int(rng.integers(2**31)), np.float64)

    def f(v):
        out, m = L.dropout_forward(v, 0.3, "train", mask=mask)
        return float(np.sum(R * out)), L.dropout_backward(m, R)

    return [finite_diff_check(f, x, EPSILON, SMOOTH_THRESHOLD, "dropout.x")]


def check_bce(rng):
    n = int(rng.integers(1, 7))
    p = rng.uniform(0.05, 0.95, size=(n, 1))
    y = rng.integers(0, 2, size=n)
    return [finite_diff_check(lambda v: L.bce_loss(v, y), p, EPSILON, SMOOTH_THRESHOLD, "bce.p")]


def check_model(seed=0, spec=TINY_SPEC, max_checks=40):
    """End-to-end check of every trainable tensor on the tiny spec (sampled coordinates)."""
    rng = np.random.default_rng(seed)
    m = build_model(spec, seed=seed, dtype=np.float64)
    x = rng.normal(size=(2,) + spec.input_shape)
    y = np.array([0, 1])
    mask = L.dropout_mask((2, spec.dense_units), spec.dropout_rate, seed, np.float64)
    reports = []
    for name in m.trainable_names():
        def f(v, name=name):
            m.params[name] = v
            m.bump()
            p, tape = forward(m, x, "train", dropout_mask=mask)
            loss, g = L.bce_loss(p, y)
            return loss, backward(m, tape, g)[name]
        original = m.params[name].copy()
        reports.append(finite_diff_check(f, original, EPSILON, MODEL_THRESHOLD, f"model.{name}",
                                         max_checks=max_checks, seed=seed))
        m.params[name] = original
        m.bump()
    return reports


def run_gradient_suite(seed=0, trials=3, corrupt=()):
    """One merged report per layer (worst case over ``trials`` random shapes) plus the model."""
    rng = np.random.default_rng(seed)
    checks = {
        "conv3d": (lambda: check_conv3d(rng, corrupt="conv3d" in corrupt), LAYER_THRESHOLD),
        "maxpool3d": (lambda: check_maxpool3d(rng), LAYER_THRESHOLD),
        "batchnorm": (lambda: check_batchnorm(rng), LAYER_THRESHOLD),
        "global_avg_pool": (lambda: check_gap(rng), SMOOTH_THRESHOLD),
        "dense": (lambda: check_dense(rng), LAYER_THRESHOLD),
        "relu": (lambda: check_relu(rng), SMOOTH_THRESHOLD),
        "sigmoid": (lambda: check_sigmoid(rng), SMOOTH_THRESHOLD),
        "dropout": (lambda: check_dropout(rng), SMOOTH_THRESHOLD),
        "bce": (lambda: check_bce(rng), SMOOTH_THRESHOLD),
    }
    reports = []
    for name, (fn, threshold) in checks.items():
        parts = [r for _ in range(trials) for r in fn()]
        reports.append(_merge(name, parts, threshold))
    reports.append(_merge("model", check_model(seed), MODEL_THRESHOLD))
    return reports
