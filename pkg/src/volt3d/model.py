"""The volumetric CNN: architecture spec, parameters, forward/backward, checkpoints.

Default stack (input 128x128x64x1)::

    4 x [Conv3D k=3 valid -> ReLU -> MaxPool 2^3 -> BatchNorm]   filters 64, 64, 128, 256
    GlobalAveragePooling3D -> Dense(512) + ReLU -> Dropout(0.3) -> Dense(1) + sigmoid

``block_order="conv_bn_relu_pool"`` switches each block to Conv -> BN -> ReLU -> Pool.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field
from itertools import count

import numpy as np

from . import layers as L
from .errors import (
    BadMagic,
    CorruptRecord,
    DegenerateBatch,
    InfeasibleSpec,
    IoFailure,
    ShapeMismatch,
    StaleTape,
    VersionMismatch,
)

BLOCK_ORDERS = ("conv_relu_pool_bn", "conv_bn_relu_pool")
KERNEL = 3

CHECKPOINT_MAGIC = b"V3DC"
CHECKPOINT_VERSION = 1

_state_versions = count(1)


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple = (128, 128, 64, 1)
    block_filters: tuple = (64, 64, 128, 256)
    dense_units: int = 512
    dropout_rate: float = 0.3
    block_order: str = "conv_relu_pool_bn"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "block_filters", tuple(int(v) for v in self.block_filters))
        if len(self.input_shape) != 4 or any(v < 1 for v in self.input_shape):
            raise InfeasibleSpec(f"input_shape must be (X, Y, Z, C) with positive extents, got {self.input_shape}")
        if any(f < 1 for f in self.block_filters):
            raise InfeasibleSpec(f"every filter count must be >= 1, got {self.block_filters}")
        if self.dense_units < 1:
            raise InfeasibleSpec("dense_units must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InfeasibleSpec(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.block_order not in BLOCK_ORDERS:
            raise InfeasibleSpec(f"unknown block order {self.block_order!r}")

    def to_text(self):
        """Canonical one-line-per-field text used inside checkpoints."""
        d = asdict(self)
        lines = []
        for key in sorted(d):
            v = d[key]
            if isinstance(v, (tuple, list)):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        d = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            d[key] = value
        try:
            return cls(
                input_shape=tuple(int(v) for v in d["input_shape"].split(",")),
                block_filters=tuple(int(v) for v in d["block_filters"].split(",") if v),
                dense_units=int(d["dense_units"]),
                dropout_rate=float(d["dropout_rate"]),
                block_order=d["block_order"],
            )
        except (KeyError, ValueError) as exc:
            raise CorruptRecord(f"bad architecture record: {exc}") from exc


def shape_trace(spec: ArchitectureSpec, batch=1):
    """Output shape after each conv, pool, GAP and dense stage.

    Raises InfeasibleSpec when an extent drops below the kernel or pool size.
    """
    x, y, z, c = spec.input_shape
    trace = []
    for b, filters in enumerate(spec.block_filters):
        if min(x, y, z) < KERNEL:
            raise InfeasibleSpec(f"block {b}: extents {(x, y, z)} smaller than the {KERNEL}^3 kernel")
        x, y, z, c = x - KERNEL + 1, y - KERNEL + 1, z - KERNEL + 1, filters
        trace.append((batch, x, y, z, c))
        if min(x, y, z) < 2:
            raise InfeasibleSpec(f"block {b}: extents {(x, y, z)} too small for 2^3 pooling")
        x, y, z = x // 2, y // 2, z // 2
        trace.append((batch, x, y, z, c))
    trace.append((batch, c))
    trace.append((batch, spec.dense_units))
    trace.append((batch, 1))
    return trace


@dataclass
class ModelState:
    spec: ArchitectureSpec
    params: dict  # ordered name -> ndarray
    rng_seed: int = 0
    version: int = field(default_factory=lambda: next(_state_versions))

    def trainable_names(self):
        return [k for k in self.params if not k.endswith((".running_mean", ".running_var"))]

    def trainable(self):
        return {k: self.params[k] for k in self.trainable_names()}

    def bump(self):
        self.version = next(_state_versions)

    def astype(self, dtype):
        return ModelState(self.spec, {k: v.astype(dtype) for k, v in self.params.items()}, self.rng_seed)

    def copy(self):
        return ModelState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.rng_seed)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(spec: ArchitectureSpec = ArchitectureSpec(), seed=0, dtype=np.float32) -> ModelState:
    shape_trace(spec)
    rng = np.random.default_rng(seed)
    params = {}
    cin = spec.input_shape[3]
    k3 = KERNEL ** 3
    for b, cout in enumerate(spec.block_filters):
        params[f"block{b}.conv.w"] = _glorot(rng, (KERNEL,) * 3 + (cin, cout), k3 * cin, k3 * cout, dtype)
        params[f"block{b}.conv.b"] = np.zeros(cout, dtype)
        params[f"block{b}.bn.gamma"] = np.ones(cout, dtype)
        params[f"block{b}.bn.beta"] = np.zeros(cout, dtype)
        params[f"block{b}.bn.running_mean"] = np.zeros(cout, dtype)
        params[f"block{b}.bn.running_var"] = np.ones(cout, dtype)
        cin = cout
    params["dense.w"] = _glorot(rng, (cin, spec.dense_units), cin, spec.dense_units, dtype)
    params["dense.b"] = np.zeros(spec.dense_units, dtype)
    params["head.w"] = _glorot(rng, (spec.dense_units, 1), spec.dense_units, 1, dtype)
    params["head.b"] = np.zeros(1, dtype)
    return ModelState(spec, params, seed)


def count_parameters(m_or_spec):
    """(trainable, total) from per-layer closed forms."""
    spec = m_or_spec.spec if isinstance(m_or_spec, ModelState) else m_or_spec
    trainable = 0
    frozen = 0
    cin = spec.input_shape[3]
    for cout in spec.block_filters:
        trainable += cout * (KERNEL ** 3 * cin + 1)
        trainable += 2 * cout
        frozen += 2 * cout
        cin = cout
    trainable += cin * spec.dense_units + spec.dense_units
    trainable += spec.dense_units * 1 + 1
    return trainable, trainable + frozen


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass
class Tape:
    mode: str
    version: int
    steps: list  # (kind, name-prefix, cache) in forward order


def _bn_state(m, prefix, mode):
    p = m.params
    return L.BatchNormState(p[prefix + ".gamma"], p[prefix + ".beta"],
                            p[prefix + ".running_mean"], p[prefix + ".running_var"], mode=mode)


def forward(m: ModelState, x, mode="infer", seed=0, dropout_mask=None):
    """Run the network on ``x`` of shape (N, X, Y, Z, C); returns ``(p, tape)``.

    Train mode uses batch statistics (updating the running ones) and a
    dropout mask drawn from ``seed``; infer mode is deterministic.
    """
    spec = m.spec
    if x.ndim != 5 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"input {x.shape} does not match (N, {spec.input_shape})")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise DegenerateBatch("train mode needs a batch of at least 2")
    p = m.params
    steps = []
    h = x
    for b in range(len(spec.block_filters)):
        conv = L.Conv3DParams(p[f"block{b}.conv.w"], p[f"block{b}.conv.b"])
        h, cache = L.conv3d_forward(h, conv)
        steps.append(("conv", f"block{b}.conv", cache))
        if spec.block_order == "conv_relu_pool_bn":
            order = ("relu", "pool", "bn")
        else:
            order = ("bn", "relu", "pool")
        for kind in order:
            name = ""
            if kind == "relu":
                h, cache = L.relu_forward(h)
            elif kind == "pool":
                h, cache = L.maxpool3d_forward(h)
            else:
                name = f"block{b}.bn"
                h, cache = L.batchnorm_forward(h, _bn_state(m, name, mode))
            steps.append((kind, name, cache))
    h, cache = L.global_avg_pool_forward(h)
    steps.append(("gap", "", cache))
    h, cache = L.dense_forward(h, L.DenseParams(p["dense.w"], p["dense.b"]))
    steps.append(("dense", "dense", cache))
    h, cache = L.relu_forward(h)
    steps.append(("relu", "", cache))
    h, cache = L.dropout_forward(h, spec.dropout_rate, mode, seed, mask=dropout_mask)
    steps.append(("dropout", "", cache))
    h, cache = L.dense_forward(h, L.DenseParams(p["head.w"], p["head.b"]))
    steps.append(("dense", "head", cache))
    h, cache = L.sigmoid_forward(h)
    steps.append(("sigmoid", "", cache))
    return h, Tape(mode, m.version, steps)


def backward(m: ModelState, tape: Tape, grad_loss):
    """Gradients of the loss w.r.t. every trainable parameter, keyed like ``m.params``."""
    if tape.mode != "train":
        raise StaleTape("backward needs a tape recorded in train mode")
    if tape.version != m.version:
        raise StaleTape("parameters changed since this tape was recorded")
    grads = {}
    g = grad_loss
    for kind, name, cache in reversed(tape.steps):
        if kind == "sigmoid":
            g = L.sigmoid_backward(cache, g)
        elif kind == "dense":
            g, gw, gb = L.dense_backward(cache, g)
            grads[name + ".w"], grads[name + ".b"] = gw, gb
        elif kind == "relu":
            g = L.relu_backward(cache, g)
        elif kind == "dropout":
            g = L.dropout_backward(cache, g)
        elif kind == "gap":
            g = L.global_avg_pool_backward(cache, g)
        elif kind == "bn":
            g, gg, gb = L.batchnorm_backward(cache, g)
            grads[name + ".gamma"], grads[name + ".beta"] = gg, gb
        elif kind == "pool":
            g = L.maxpool3d_backward(cache, g)
        elif kind == "conv":
            g, gw, gb = L.conv3d_backward(cache, g)
            grads[name + ".w"], grads[name + ".b"] = gw, gb
    return {k: grads[k] for k in m.trainable_names()}


def predict(m: ModelState, x, batch_size=8):
    """Infer-mode probabilities, shape (N,)."""
    out = [forward(m, x[i:i + batch_size], "infer")[0][:, 0] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# layout (little-endian):
#   "V3DC" | u32 version | u64 rng_seed | u32 len | spec text (utf-8)
#   u32 n_params, then per parameter:
#   u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload (C order)

def dumps_checkpoint(m: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, m.rng_seed & 0xFFFFFFFFFFFFFFFF))
    spec_text = m.spec.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(spec_text)))
    buf.write(spec_text)
    buf.write(struct.pack("<I", len(m.params)))
    for name, arr in m.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CorruptRecord(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_checkpoint(blob: bytes) -> ModelState:
    r = _Reader(blob)
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic("not a V3DC checkpoint")
    r.take(4)
    version, seed = r.unpack("<IQ")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (spec_len,) = r.unpack("<I")
    try:
        spec_text = r.take(spec_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptRecord("spec record is not valid UTF-8") from exc
    spec = ArchitectureSpec.from_text(spec_text)
    (n_params,) = r.unpack("<I")
    params = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", "replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(blob):
        raise CorruptRecord(f"{len(blob) - r.pos} trailing bytes after the last record")
    expected = build_model_shapes(spec)
    if list(expected) != list(params) or any(expected[k] != params[k].shape for k in expected):
        raise CorruptRecord("parameter records do not match the stored architecture")
    return ModelState(spec, params, seed)


def build_model_shapes(spec: ArchitectureSpec):
    shapes = {}
    cin = spec.input_shape[3]
    for b, cout in enumerate(spec.block_filters):
        shapes[f"block{b}.conv.w"] = (KERNEL,) * 3 + (cin, cout)
        for suffix in ("conv.b", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var"):
            shapes[f"block{b}.{suffix}"] = (cout,)
        cin = cout
    shapes["dense.w"] = (cin, spec.dense_units)
    shapes["dense.b"] = (spec.dense_units,)
    shapes["head.w"] = (spec.dense_units, 1)
    shapes["head.b"] = (1,)
    return shapes


def save_checkpoint(m: ModelState, path) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(dumps_checkpoint(m))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(blob)
