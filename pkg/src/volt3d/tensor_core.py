"""Tensor helpers and the central-difference gradient checker.

Tensors are plain C-ordered numpy arrays (last axis fastest).  Training uses
float32; gradient checks run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch
from .nifti_io import Volume

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
MAX_RANK = 5


def as_tensor(x, dtype=TRAIN_DTYPE):
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim > MAX_RANK or arr.size < 1:
        raise ShapeMismatch(f"tensor must have rank <= {MAX_RANK} and >= 1 element, got {arr.shape}")
    return arr


def tensor_from_volume(v: Volume) -> np.ndarray:
    """(X, Y, Z) volume -> (X, Y, Z, 1) float32 tensor."""
    return np.ascontiguousarray(v.data, dtype=np.float32)[..., np.newaxis]


def volume_from_tensor(t: np.ndarray, spacing=(1.0, 1.0, 1.0), source_id="") -> Volume:
    if t.ndim != 4 or t.shape[-1] != 1:
        raise ShapeMismatch(f"expected (X, Y, Z, 1) tensor, got {t.shape}")
    return Volume(t[..., 0], spacing, source_id)


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    worst_index: tuple
    passed: bool
    threshold: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.op_name:<28s} max_rel_err={self.max_rel_error:.3e} "
                f"(threshold {self.threshold:.0e}) worst={list(self.worst_index)}")


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f, x, epsilon=1e-5, indices=None):
    """Central differences of scalar ``f`` w.r.t. ``x`` (modified in place, then restored).

    ``f`` returns either a scalar or ``(scalar, ...)``.
    """
    def value(arg):
        out = f(arg)
        return float(out[0] if isinstance(out, tuple) else out)

    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = value(x)
        flat[i] = orig - epsilon
        fm = value(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return grad


def finite_diff_check(f, x, epsilon=1e-5, threshold=1e-4, op_name="f", max_checks=None, seed=0):
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    When ``max_checks`` is given, only that many randomly chosen coordinates
    are perturbed.
    """
    x = np.array(x, dtype=CHECK_DTYPE)
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeMismatch(f"{op_name}: gradient shape {analytic.shape} != input shape {x.shape}")
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteGradient(f"{op_name}: analytic gradient has NaN/Inf entries")
    indices = None
    if max_checks is not None and max_checks < x.size:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(x.size, size=max_checks, replace=False))
    numeric = numeric_gradient(f, x, epsilon, indices)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteGradient(f"{op_name}: numeric gradient has NaN/Inf entries")
    if indices is None:
        err = relative_error(analytic, numeric).reshape(-1)
    else:
        err = np.zeros(x.size)
        err[indices] = relative_error(analytic.reshape(-1)[indices], numeric.reshape(-1)[indices])
    worst = int(np.argmax(err))
    max_err = float(err[worst])
    return GradCheckReport(
        op_name=op_name,
        max_rel_error=max_err,
        worst_index=tuple(int(i) for i in np.unravel_index(worst, x.shape)),
        passed=max_err < threshold,
        threshold=threshold,
    )
