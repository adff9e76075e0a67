"""Small numpy CNN engine with hand-written backward passes.

The network is a ResNet-style feature extractor (nine convolutions, global
average pooling, two dense layers) followed by a one-layer classifier. All
tensors live in one ordered parameter store, so a Siamese pair is simply a
batch that contains both branches.

Layout is NCHW. Any float dtype works; training uses float32 and gradient
checks use float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, StateError

DEFAULT_CONV_STAGES = (
    (7, 7, 32, 2),
    (3, 3, 32, 1), (3, 3, 32, 1), (3, 3, 32, 1), (3, 3, 32, 1),
    (3, 3, 64, 2), (3, 3, 64, 1), (3, 3, 64, 1), (3, 3, 64, 1),
)
DEFAULT_SKIPS = ((1, 3), (3, 5), (5, 7), (7, 9))
# 8192-sample packet, 128/64 STFT, +-94 kHz crop at fs = 1 MHz
DEFAULT_INPUT_SHAPE = (25, 127)


@dataclass(frozen=True)
class ArchitectureSpec:
    conv_stages: tuple = DEFAULT_CONV_STAGES
    skip_connections: tuple = DEFAULT_SKIPS
    dense_sizes: tuple = (512, 256)
    num_classes: int = 10
    width_scale: float = 1.0
    input_shape: tuple = DEFAULT_INPUT_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "conv_stages", tuple(tuple(int(v) for v in s) for s in self.conv_stages))
        object.__setattr__(self, "skip_connections", tuple(tuple(int(v) for v in s) for s in self.skip_connections))
        object.__setattr__(self, "dense_sizes", tuple(int(v) for v in self.dense_sizes))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if not self.conv_stages:
            raise ConfigurationError("at least one convolution stage is required")
        for kh, kw, c, s in self.conv_stages:
            if min(kh, kw, c, s) < 1 or kh % 2 == 0 or kw % 2 == 0:
                raise ConfigurationError(f"invalid conv stage {(kh, kw, c, s)}: odd kernels, positive sizes")
        n = len(self.conv_stages)
        targets = set()
        for a, b in self.skip_connections:
            if not 0 <= a < b <= n:
                raise ConfigurationError(f"skip ({a}, {b}) must satisfy 0 <= from < to <= {n}")
            if b in targets:
                raise ConfigurationError(f"layer {b} receives more than one skip connection")
            targets.add(b)
        if len(self.dense_sizes) != 2:
            raise ConfigurationError("dense_sizes must be [d1, d2]")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 < self.width_scale <= 1:
            raise ConfigurationError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (freq_bins, frames), got {self.input_shape}")

    @property
    def embedding_dim(self) -> int:
        return self.dense_sizes[1]

    def channels(self) -> list[int]:
        return [max(1, int(round(c * self.width_scale))) for _, _, c, _ in self.conv_stages]

    def shape_trace(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of the input and of every conv output."""
        h, w = self.input_shape
        trace = [(1, h, w)]
        for (kh, kw, _, s), c in zip(self.conv_stages, self.channels()):
            h = (h + 2 * (kh // 2) - kh) // s + 1
            w = (w + 2 * (kw // 2) - kw) // s + 1
            if h < 1 or w < 1:
                raise ConfigurationError(f"input {self.input_shape} too small for the conv stack")
            trace.append((c, h, w))
        return trace

    def to_dict(self) -> dict:
        return {
            "conv_stages": [list(s) for s in self.conv_stages],
            "skip_connections": [list(s) for s in self.skip_connections],
            "dense_sizes": list(self.dense_sizes),
            "num_classes": self.num_classes,
            "width_scale": self.width_scale,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def _skip_stride(arch: ArchitectureSpec, a: int, b: int) -> int:
    return math.prod(arch.conv_stages[i][3] for i in range(a, b))


def _param_shapes(arch: ArchitectureSpec) -> dict[str, tuple]:
    trace = arch.shape_trace()
    shapes = {}
    for i, (kh, kw, _, _) in enumerate(arch.conv_stages, start=1):
        cin, cout = trace[i - 1][0], trace[i][0]
        shapes[f"conv{i}.w"] = (cout, cin, kh, kw)
        shapes[f"conv{i}.b"] = (cout,)
    for a, b in arch.skip_connections:
        src, dst = trace[a], trace[b]
        stride = _skip_stride(arch, a, b)
        if ((src[1] - 1) // stride + 1, (src[2] - 1) // stride + 1) != dst[1:]:
            raise ConfigurationError(f"skip ({a}, {b}) joins incompatible spatial shapes {src} -> {dst}")
        if src[0] != dst[0] or stride != 1:
            shapes[f"skip{b}.w"] = (dst[0], src[0], 1, 1)
            shapes[f"skip{b}.b"] = (dst[0],)
    d1, d2 = arch.dense_sizes
    shapes["dense1.w"] = (trace[-1][0], d1)
    shapes["dense1.b"] = (d1,)
    shapes["dense2.w"] = (d1, d2)
    shapes["dense2.b"] = (d2,)
    shapes["cls.w"] = (d2, arch.num_classes)
    shapes["cls.b"] = (arch.num_classes,)
    return shapes


@dataclass
class ModelParams:
    """Every learnable tensor, in declaration order."""

    arch: ArchitectureSpec
    tensors: dict

    def __post_init__(self):
        expected = _param_shapes(self.arch)
        if list(self.tensors) != list(expected):
            raise ConfigurationError("tensor names/order do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    @classmethod
    def initialize(cls, arch: ArchitectureSpec, seed: int, dtype=np.float32) -> "ModelParams":
        """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _param_shapes(arch).items():
            if name.endswith(".b"):
                tensors[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                tensors[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        return cls(arch, tensors)

    @property
    def extractor_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("cls.")]

    @property
    def classifier_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("cls.")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def digest(self, names=None) -> str:
        h = hashlib.sha256()
        for n in names if names is not None else self.tensors:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.tensors[n]).tobytes())
        return h.hexdigest()

    def load_extractor(self, other: "ModelParams") -> None:
        """Copy extractor tensors from ``other`` (e.g. a pretrained checkpoint)."""
        for n in self.extractor_names:
            if n not in other.tensors or other.tensors[n].shape != self.tensors[n].shape:
                raise ConfigurationError(f"pretrained extractor does not provide a compatible {n}")
            self.tensors[n] = other.tensors[n].astype(self.tensors[n].dtype, copy=True)


# ---------------------------------------------------------------- layers


def conv2d_forward(x, w, b, stride, pad):
    """Returns output and the cache needed by :func:`conv2d_backward`."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    y = np.matmul(w.reshape(o, -1), cols) + b[:, None]
    return y.reshape(n, o, ho, wo), (cols, x.shape, xp.shape, stride, pad)


def conv2d_backward(dy, w, cache):
    cols, xshape, xpshape, stride, pad = cache
    n, o, ho, wo = dy.shape
    _, c, kh, kw = w.shape
    dy = dy.reshape(n, o, ho * wo)
    dw = np.matmul(dy, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, dy).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += dcols[:, :, u, v]
    dx = dxp[:, :, pad:pad + xshape[2], pad:pad + xshape[3]] if pad else dxp
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def avgpool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def avgpool_backward(dy, shape):
    n, c, h, w = shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy()


def dense_forward(x, w, b):
    return x @ w + b


def dense_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network


class RffNet:
    """Feature extractor + classifier over a shared :class:`ModelParams`.

    ``forward_extract`` and ``forward_classify`` cache what ``backward``
    needs; parameters are never modified here.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.arch = params.arch
        self._skip_from = {b: a for a, b in self.arch.skip_connections}
        self._ext = None
        self._cls = None

    def forward_extract(self, x: np.ndarray) -> np.ndarray:
        p = self.params.tensors
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None]
        expected = (1, *self.arch.input_shape)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise InputError(f"expected input of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        x = x.astype(p["conv1.w"].dtype, copy=False)
        acts = [x]
        layers = []
        for i, (kh, _, _, s) in enumerate(self.arch.conv_stages, start=1):
            pre, conv_cache = conv2d_forward(acts[-1], p[f"conv{i}.w"], p[f"conv{i}.b"], s, kh // 2)
            skip_cache = None
            if i in self._skip_from:
                a = self._skip_from[i]
                if f"skip{i}.w" in p:
                    stride = _skip_stride(self.arch, a, i)
                    proj, skip_cache = conv2d_forward(acts[a], p[f"skip{i}.w"], p[f"skip{i}.b"], stride, 0)
                    pre = pre + proj
                else:
                    pre = pre + acts[a]
            out, mask = relu_forward(pre)
            acts.append(out)
            layers.append((conv_cache, skip_cache, mask))
        pooled, pool_shape = avgpool_forward(acts[-1])
        h1 = dense_forward(pooled, p["dense1.w"], p["dense1.b"])
        a1, m1 = relu_forward(h1)
        z = dense_forward(a1, p["dense2.w"], p["dense2.b"])
        self._ext = dict(acts=acts, layers=layers, pool_shape=pool_shape, pooled=pooled, a1=a1, m1=m1)
        self._cls = None
        return z

    def forward_logits(self, z: np.ndarray) -> np.ndarray:
        p = self.params.tensors
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.arch.embedding_dim:
            raise InputError(f"embeddings must be (N, {self.arch.embedding_dim}), got {z.shape}")
        self._cls = z
        return dense_forward(z, p["cls.w"], p["cls.b"])

    def forward_classify(self, z: np.ndarray) -> np.ndarray:
        return softmax(self.forward_logits(z))

    def backward(self, dz: np.ndarray | None = None, dlogits: np.ndarray | None = None) -> dict:
        """Gradients for every tensor given upstream gradients at the
        embeddings and/or the logits."""
        if self._ext is None:
            raise StateError("backward called without a preceding forward_extract")
        p = self.params.tensors
        grads = {n: np.zeros_like(v) for n, v in p.items()}
        c = self._ext
        n_batch = c["acts"][0].shape[0]
        dtype = p["conv1.w"].dtype
        dz_total = np.zeros((n_batch, self.arch.embedding_dim), dtype=dtype)
        if dz is not None:
            dz_total += dz
        if dlogits is not None:
            if self._cls is None:
                raise StateError("logit gradient given without a preceding forward_classify")
            dlogits = np.asarray(dlogits, dtype=dtype)
            dzc, grads["cls.w"], grads["cls.b"] = dense_backward(dlogits, self._cls, p["cls.w"])
            dz_total += dzc
        da1, grads["dense2.w"], grads["dense2.b"] = dense_backward(dz_total, c["a1"], p["dense2.w"])
        dh1 = relu_backward(da1, c["m1"])
        dpool, grads["dense1.w"], grads["dense1.b"] = dense_backward(dh1, c["pooled"], p["dense1.w"])
        dacts = [None] * len(c["acts"])
        dacts[-1] = avgpool_backward(dpool, c["pool_shape"])
        for i in range(len(self.arch.conv_stages), 0, -1):
            conv_cache, skip_cache, mask = c["layers"][i - 1]
            dpre = relu_backward(dacts[i], mask)
            if i in self._skip_from:
                a = self._skip_from[i]
                if skip_cache is not None:
                    dsrc, grads[f"skip{i}.w"], grads[f"skip{i}.b"] = conv2d_backward(dpre, p[f"skip{i}.w"], skip_cache)
                else:
                    dsrc = dpre
                dacts[a] = dsrc if dacts[a] is None else dacts[a] + dsrc
            dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(dpre, p[f"conv{i}.w"], conv_cache)
            dacts[i - 1] = dx if dacts[i - 1] is None else dacts[i - 1] + dx
        return grads


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, lr: float, state: AdamState,
              frozen: frozenset | set = frozenset()) -> AdamState:
    """In-place bias-corrected Adam update; tensors named in ``frozen`` are skipped."""
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for name, g in grads.items():
        if name in frozen:
            continue
        w = params.tensors[name]
        if g.shape != w.shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return state


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without a new best
    validation loss; request a stop after ``stop_patience`` such epochs.

    The reduce counter restarts after each reduction, the stop counter only
    restarts on improvement.
    """

    lr: float
    factor: float = 0.5
    patience: int = 10
    stop_patience: int = 30
    best: float = math.inf
    epoch: int = 0
    since_best: int = 0
    since_reduce: int = 0

    def step(self, val_loss: float) -> tuple[float, bool]:
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self.since_reduce = 0
        else:
            self.since_best += 1
            self.since_reduce += 1
            if self.since_reduce >= self.patience:
                self.lr *= self.factor
                self.since_reduce = 0
        return self.lr, self.since_best >= self.stop_patience


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"RFFICKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, metadata: dict | None = None) -> None:
    """Header (magic, version, JSON) then little-endian float32 tensors in
    declaration order."""
    header = {
        "architecture": params.arch.to_dict(),
        "tensors": [[n, list(v.shape)] for n, v in params.tensors.items()],
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack("<II", buf.read(8))
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen))
    arch = ArchitectureSpec.from_dict(header["architecture"])
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        chunk = buf.read(4 * count)
        if len(chunk) != 4 * count:
            raise FormatError(f"{path}: truncated data for tensor {name} at offset {buf.tell()}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return ModelParams(arch, tensors), header["metadata"]
