"""Minimal NumPy neural-network engine.

Layers: 3x3 stride-1 same-padded convolution, 2x2 stride-2 max pooling,
global average pooling, dense, inverted dropout, ReLU and softmax, with
mean cross-entropy loss. Forward runs in eval or train mode; only train
mode records the caches backward needs, and dropout masks are drawn from
an explicit seed so any step can be replayed exactly.

Compute follows the input dtype: float32 in normal use, float64 when a
caller casts inputs and weights up for finite-difference checking.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, StateError

WEIGHTS_MAGIC = b"TSWT"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    in_units: int = 0
    out_units: int = 0
    rate: float = 0.0


def conv3x3(name: str, in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec("conv3x3", name=name, in_channels=in_channels, out_channels=out_channels)


def dense(name: str, in_units: int, out_units: int) -> LayerSpec:
    return LayerSpec("dense", name=name, in_units=in_units, out_units=out_units)


def maxpool2x2() -> LayerSpec:
    return LayerSpec("maxpool2x2")


def gap() -> LayerSpec:
    return LayerSpec("gap")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def param_shapes(spec: LayerSpec) -> dict:
    """Parameter tensors a layer owns, keyed by qualified name."""
    if spec.kind == "conv3x3":
        return {
            f"{spec.name}.w": (3, 3, spec.in_channels, spec.out_channels),
            f"{spec.name}.b": (spec.out_channels,),
        }
    if spec.kind == "dense":
        return {
            f"{spec.name}.w": (spec.in_units, spec.out_units),
            f"{spec.name}.b": (spec.out_units,),
        }
    return {}


class ModelWeights:
    """Ordered named parameter tensors with a per-tensor frozen flag."""

    def __init__(self):
        self.names: list[str] = []
        self.arrays: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, array: np.ndarray, frozen: bool = False) -> None:
        if name in self.arrays:
            raise StateError(f"duplicate parameter name {name!r}")
        self.names.append(name)
        self.arrays[name] = array
        if frozen:
            self.frozen.add(name)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names if n not in self.frozen]

    def copy(self) -> "ModelWeights":
        out = ModelWeights()
        for name in self.names:
            out.add(name, self.arrays[name].copy(), frozen=name in self.frozen)
        return out

    def subset(self, names: list[str]) -> "ModelWeights":
        out = ModelWeights()
        for name in names:
            out.add(name, self.arrays[name], frozen=name in self.frozen)
        return out

    def merge(self, other: "ModelWeights") -> None:
        for name in other.names:
            self.add(name, other.arrays[name], frozen=name in other.frozen)

    def to_bytes(self) -> bytes:
        chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(self.names))]
        for name in self.names:
            arr = self.arrays[name]
            if arr.dtype != np.float32:
                raise FormatError(f"{name}: only float32 tensors serialize (got {arr.dtype})")
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<BB", 1 if name in self.frozen else 0, arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelWeights":
        if data[:4] != WEIGHTS_MAGIC:
            raise FormatError(f"bad weights magic {data[:4]!r}")
        version, count = struct.unpack_from("<II", data, 4)
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weights version {version}")
        out = cls()
        off = 12
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            frozen_flag, rank = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            out.add(name, arr.copy(), frozen=bool(frozen_flag))
        if off != len(data):
            raise FormatError(f"{len(data) - off} trailing bytes in weights blob")
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


def init_weights(layers: list[LayerSpec], seed, frozen: bool = False) -> ModelWeights:
    """He-uniform weights, zero biases, drawn in layer order from one stream.

    ``seed`` is an int or a numpy SeedSequence.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    out = ModelWeights()
    for spec in layers:
        shapes = param_shapes(spec)
        if not shapes:
            continue
        fan_in = 9 * spec.in_channels if spec.kind == "conv3x3" else spec.in_units
        limit = np.sqrt(6.0 / fan_in)
        for pname, shape in shapes.items():
            if pname.endswith(".b"):
                arr = np.zeros(shape, dtype=np.float32)
            else:
                arr = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            out.add(pname, arr, frozen=frozen)
    return out


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    weights.save(path)


def load_weights(path: str | Path) -> ModelWeights:
    return ModelWeights.load(path)


@dataclass
class LayerState:
    output: np.ndarray
    cache: dict | None


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, w, 9 * c)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def forward(
    layers: list[LayerSpec],
    weights: ModelWeights,
    x: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
) -> list[LayerState]:
    """Run all layers, returning each layer's output (plus caches in train mode)."""
    if mode not in ("train", "eval"):
        raise StateError(f"unknown mode {mode!r}")
    train = mode == "train"
    rng = None
    states: list[LayerState] = []
    for spec in layers:
        cache: dict | None = {} if train else None
        if spec.kind == "conv3x3":
            _require(x.ndim == 4 and x.shape[3] == spec.in_channels,
                     f"conv3x3 {spec.name}: input {x.shape} incompatible with {spec.in_channels} channels")
            w = weights.arrays[f"{spec.name}.w"]
            b = weights.arrays[f"{spec.name}.b"]
            n, h, wd, c = x.shape
            col = _im2col(x)
            out = col.reshape(-1, 9 * c) @ w.reshape(9 * c, spec.out_channels)
            out += b
            out = out.reshape(n, h, wd, spec.out_channels)
            if train:
                cache = {"col": col, "in_shape": x.shape}
        elif spec.kind == "maxpool2x2":
            _require(x.ndim == 4 and x.shape[1] % 2 == 0 and x.shape[2] % 2 == 0,
                     f"maxpool2x2: input {x.shape} needs even spatial dims")
            n, h, wd, c = x.shape
            xr = x.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
            xr = xr.reshape(n, h // 2, wd // 2, 4, c)
            idx = xr.argmax(axis=3)
            out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            if train:
                cache = {"idx": idx, "in_shape": x.shape}
        elif spec.kind == "gap":
            _require(x.ndim == 4, f"gap: input {x.shape} must be rank 4")
            out = x.mean(axis=(1, 2))
            if train:
                cache = {"in_shape": x.shape}
        elif spec.kind == "dense":
            _require(x.ndim == 2 and x.shape[1] == spec.in_units,
                     f"dense {spec.name}: input {x.shape} incompatible with {spec.in_units} units")
            w = weights.arrays[f"{spec.name}.w"]
            b = weights.arrays[f"{spec.name}.b"]
            out = x @ w + b
            if train:
                cache = {"in": x}
        elif spec.kind == "relu":
            out = np.maximum(x, 0)
            if train:
                cache = {"mask": x > 0}
        elif spec.kind == "dropout":
            if train and spec.rate > 0:
                if rng is None:
                    rng = np.random.Generator(np.random.PCG64(seed))
                keep = (rng.random(x.shape) >= spec.rate).astype(x.dtype)
                scale = 1.0 / (1.0 - spec.rate)
                out = x * keep * x.dtype.type(scale)
                cache = {"keep": keep, "scale": scale}
            else:
                out = x
                if train:
                    cache = {"keep": None}
        elif spec.kind == "softmax":
            _require(x.ndim == 2, f"softmax: input {x.shape} must be rank 2")
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
        else:
            raise StateError(f"unknown layer kind {spec.kind!r}")
        states.append(LayerState(out, cache))
        x = out
    return states


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes."""
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def _backward_layer(spec, state, grad, weights, grads):
    cache = state.cache
    if cache is None:
        raise StateError(f"layer {spec.kind} {spec.name or ''} has no cache; run forward in train mode")
    if spec.kind == "conv3x3":
        col = cache["col"]
        n, h, wd, c = cache["in_shape"]
        k = spec.out_channels
        g = grad.reshape(-1, k)
        if f"{spec.name}.w" not in weights.frozen:
            grads[f"{spec.name}.w"] = (col.reshape(-1, 9 * c).T @ g).reshape(3, 3, c, k)
        if f"{spec.name}.b" not in weights.frozen:
            grads[f"{spec.name}.b"] = g.sum(axis=0)
        wmat = weights.arrays[f"{spec.name}.w"].reshape(9 * c, k)
        dcol = (g @ wmat.T).reshape(n, h, wd, 3, 3, c)
        dxp = np.zeros((n, h + 2, wd + 2, c), dtype=grad.dtype)
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky : ky + h, kx : kx + wd, :] += dcol[:, :, :, ky, kx, :]
        return dxp[:, 1 : 1 + h, 1 : 1 + wd, :]
    if spec.kind == "maxpool2x2":
        n, h, wd, c = cache["in_shape"]
        idx = cache["idx"]
        dxr = np.zeros((n, h // 2, wd // 2, 4, c), dtype=grad.dtype)
        np.put_along_axis(dxr, idx[:, :, :, None, :], grad[:, :, :, None, :], axis=3)
        dxr = dxr.reshape(n, h // 2, wd // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return dxr.reshape(n, h, wd, c)
    if spec.kind == "gap":
        n, h, wd, c = cache["in_shape"]
        return np.broadcast_to(grad[:, None, None, :], (n, h, wd, c)) / (h * wd)
    if spec.kind == "dense":
        x = cache["in"]
        if f"{spec.name}.w" not in weights.frozen:
            grads[f"{spec.name}.w"] = x.T @ grad
        if f"{spec.name}.b" not in weights.frozen:
            grads[f"{spec.name}.b"] = grad.sum(axis=0)
        return grad @ weights.arrays[f"{spec.name}.w"].T
    if spec.kind == "relu":
        return grad * cache["mask"]
    if spec.kind == "dropout":
        keep = cache["keep"]
        if keep is None:
            return grad
        return grad * keep * grad.dtype.type(cache["scale"])
    raise StateError(f"no backward rule for layer kind {spec.kind!r}")


def backward(
    layers: list[LayerSpec],
    weights: ModelWeights,
    states: list[LayerState],
    labels: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of mean cross-entropy w.r.t. every non-frozen tensor.

    The network must end with a softmax layer; the softmax/cross-entropy pair
    is differentiated jointly as (probs - onehot) / batch.
    """
    if not layers or layers[-1].kind != "softmax":
        raise StateError("backward requires a softmax output layer")
    if len(states) != len(layers):
        raise StateError("activation list does not match layer list")
    probs = states[-1].output
    if states[-1].cache is None:
        raise StateError("forward must be run in train mode before backward")
    n = probs.shape[0]
    grad = probs.astype(probs.dtype, copy=True)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grads: dict[str, np.ndarray] = {}
    for spec, state in zip(reversed(layers[:-1]), reversed(states[:-1])):
        grad = _backward_layer(spec, state, grad, weights, grads)
    return grads


def softmax_logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-batch gradient of mean cross-entropy w.r.t. the logits."""
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


def sgd_step(
    weights: ModelWeights,
    grads: dict[str, np.ndarray],
    learning_rate: float,
    momentum: float = 0.0,
    state: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Classic momentum update, in place: v <- m*v - lr*g; w <- w + v."""
    trainable = set(weights.trainable_names())
    unknown = set(grads) - trainable
    if unknown:
        raise StateError(f"gradients for frozen or unknown tensors: {sorted(unknown)}")
    if state is None:
        state = {}
    for name, g in grads.items():
        w = weights.arrays[name]
        v = state.get(name)
        if v is None:
            v = np.zeros_like(w)
        v *= w.dtype.type(momentum)
        v -= w.dtype.type(learning_rate) * g.astype(w.dtype, copy=False)
        w += v
        state[name] = v
    return state
