"""MONO/DI/TRI model assembly: frozen per-scale branches, trainable head.

Each input scale feeds its own convolutional branch (independent weights,
frozen at initialization). Branch outputs are read out by global average
pooling and concatenated in fixed coarse-to-fine order (25x, 100x, 400x,
skipping absent scales) before the classification head: two dense layers,
each followed by dropout, then a six-way dense + softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES
from .errors import FormatError, InputError, InvalidSpecError, StateError
from .nn import (
    LayerSpec,
    ModelWeights,
    conv3x3,
    dense,
    dropout,
    forward,
    gap,
    init_weights,
    maxpool2x2,
    relu,
    softmax,
)
from .pyramid import MAGNIFICATIONS
from .tiling import TileTriplet

ARCH_SCALES = {
    "MONO": ("400x",),
    "DI": ("100x", "400x"),
    "TRI": ("25x", "100x", "400x"),
}

FC_GRID = (512, 1024, 1536, 2048, 4096)
DROPOUT_GRID = (0.0, 0.3, 0.5)

# Conv channel plan per block; every conv is 3x3 same-padded, every block ends
# with a 2x2 max-pool, and the branch is read out by global average pooling.
BRANCH_BLOCKS = {
    "vgg16_shape": ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
    "small": ((8,), (16,), (32,), (64,), (64,)),
}

BRANCH_FEATURES = {"vgg16_shape": 512, "small": 64}

_SCALE_TAG = {"25x": 25, "100x": 100, "400x": 400}
_HEAD_TAG = 0xEAD

FEATURE_MAGIC = b"TSFC"
FEATURE_VERSION = 1
SCALE_BYTE = {"25x": 0, "100x": 1, "400x": 2}
BYTE_SCALE = {v: k for k, v in SCALE_BYTE.items()}


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    fc_neurons: int
    dropout: float
    branch: str = "vgg16_shape"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCH_SCALES:
            raise InvalidSpecError(f"unknown architecture {self.arch!r}")
        if self.fc_neurons not in FC_GRID:
            raise InvalidSpecError(f"fc_neurons {self.fc_neurons} not in grid {FC_GRID}")
        if self.dropout not in DROPOUT_GRID:
            raise InvalidSpecError(f"dropout {self.dropout} not in grid {DROPOUT_GRID}")
        if self.branch not in BRANCH_BLOCKS:
            raise InvalidSpecError(f"unknown branch kind {self.branch!r}")

    @property
    def scales(self) -> tuple[str, ...]:
        return ARCH_SCALES[self.arch]

    @property
    def head_input_width(self) -> int:
        return BRANCH_FEATURES[self.branch] * len(self.scales)


def branch_layer_specs(branch: str, prefix: str) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    cin = 3
    for bi, block in enumerate(BRANCH_BLOCKS[branch], start=1):
        for ci, ch in enumerate(block, start=1):
            layers.append(conv3x3(f"{prefix}/b{bi}c{ci}", cin, ch))
            layers.append(relu())
            cin = ch
        layers.append(maxpool2x2())
    layers.append(gap())
    return layers


def head_layer_specs(in_width: int, fc_neurons: int, dropout_rate: float) -> list[LayerSpec]:
    return [
        dense("head/fc1", in_width, fc_neurons),
        dropout(dropout_rate),
        dense("head/fc2", fc_neurons, fc_neurons),
        dropout(dropout_rate),
        dense("head/out", fc_neurons, NUM_CLASSES),
        softmax(),
    ]


@dataclass
class ModelBundle:
    config: ModelConfig
    branch_layers: dict  # scale -> list[LayerSpec]
    head_layers: list
    weights: ModelWeights

    def branch_param_names(self) -> list[str]:
        return [n for n in self.weights.names if n.startswith("branch_")]

    def branch_weights(self) -> ModelWeights:
        return self.weights.subset(self.branch_param_names())

    def branch_hash(self) -> bytes:
        return self.branch_weights().content_hash()


def build_model(config: ModelConfig) -> ModelBundle:
    """Instantiate branches (frozen) and head (trainable) for a config.

    Branch weights are seeded per scale from (config.seed, scale) only, so two
    architectures with the same seed share bit-identical per-scale branches.
    """
    weights = ModelWeights()
    branch_layers = {}
    for scale in config.scales:
        layers = branch_layer_specs(config.branch, f"branch_{scale}")
        ss = np.random.SeedSequence([config.seed, _SCALE_TAG[scale]])
        weights.merge(init_weights(layers, ss, frozen=True))
        branch_layers[scale] = layers
    head_layers = head_layer_specs(config.head_input_width, config.fc_neurons, config.dropout)
    weights.merge(init_weights(head_layers, np.random.SeedSequence([config.seed, _HEAD_TAG])))
    return ModelBundle(
        config=config,
        branch_layers=branch_layers,
        head_layers=head_layers,
        weights=weights,
    )


def reinit_head(bundle: ModelBundle, seed) -> None:
    """Re-draw the trainable head in place, leaving branches untouched."""
    fresh = init_weights(
        bundle.head_layers,
        np.random.SeedSequence([int(seed), _HEAD_TAG]),
    )
    for name in fresh.names:
        bundle.weights.arrays[name] = fresh.arrays[name]


def _branch_params(branch: str) -> int:
    total = 0
    cin = 3
    for block in BRANCH_BLOCKS[branch]:
        for ch in block:
            total += 9 * cin * ch + ch
            cin = ch
    return total


def _head_params(in_width: int, fc_neurons: int) -> int:
    return (
        in_width * fc_neurons + fc_neurons
        + fc_neurons * fc_neurons + fc_neurons
        + fc_neurons * NUM_CLASSES + NUM_CLASSES
    )


def count_params(config: ModelConfig) -> tuple[int, int]:
    """Exact (trainable, total) parameter counts from layer arithmetic."""
    trainable = _head_params(config.head_input_width, config.fc_neurons)
    total = trainable + len(config.scales) * _branch_params(config.branch)
    return trainable, total


def count_params_from_weights(bundle: ModelBundle) -> tuple[int, int]:
    """Independent count from the instantiated arrays."""
    trainable = sum(bundle.weights.arrays[n].size for n in bundle.weights.trainable_names())
    total = sum(arr.size for arr in bundle.weights.arrays.values())
    return trainable, total


def _format_millions(n: int) -> str:
    m = n / 1e6
    return f"{m:.0f}M" if m >= 9.95 else f"{m:.1f}M"


def format_param_counts(trainable: int, total: int) -> str:
    """Two-significant-figure rendering, e.g. 5259270/19973958 -> '5.3M/20M'."""
    return f"{_format_millions(trainable)}/{_format_millions(total)}"


def tiles_to_input(tiles_u8: np.ndarray) -> np.ndarray:
    """uint8 tiles (N, 128, 128, 3) -> float32 network input in [0, 1]."""
    x = tiles_u8.astype(np.float32)
    x /= np.float32(255.0)
    return x


def branch_features(bundle: ModelBundle, scale: str, tiles_u8: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-branch feature vectors for a stack of tiles at one scale."""
    if scale not in bundle.branch_layers:
        raise InputError(f"{bundle.config.arch} model has no {scale} branch")
    layers = bundle.branch_layers[scale]
    chunks = []
    for i in range(0, len(tiles_u8), batch_size):
        x = tiles_to_input(tiles_u8[i : i + batch_size])
        states = forward(layers, bundle.weights, x, mode="eval")
        chunks.append(states[-1].output)
    return np.concatenate(chunks, axis=0)


def concat_features(bundle: ModelBundle, feats_by_scale: dict) -> np.ndarray:
    """Fixed-order concatenation: 25x, 100x, 400x, skipping absent scales."""
    parts = [feats_by_scale[m] for m in MAGNIFICATIONS if m in bundle.config.scales]
    return np.concatenate(parts, axis=1)


def head_probs(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    states = forward(bundle.head_layers, bundle.weights, features, mode="eval")
    return states[-1].output


def predict(bundle: ModelBundle, triplet: TileTriplet, cache=None, key=None) -> np.ndarray:
    """Six-class probability vector for one triplet.

    With a cache, branch features are looked up by (key, scale) and the result
    is bit-identical to the uncached path (the cache was filled by the same
    single-tile forward).
    """
    feats = {}
    for scale in bundle.config.scales:
        if scale not in triplet.tiles:
            raise InputError(f"{bundle.config.arch} model requires a {scale} tile")
        vec = None
        if cache is not None:
            if cache.weights_hash != bundle.branch_hash():
                raise StateError("feature cache was built from different branch weights")
            if key is not None:
                vec = cache.get(key, scale)
        if vec is None:
            vec = branch_features(bundle, scale, triplet.tiles[scale][None], batch_size=1)[0]
        feats[scale] = vec[None]
    probs = head_probs(bundle, concat_features(bundle, feats))
    return probs[0]


class FeatureCache:
    """Feature vectors keyed by (tile key, scale), bound to branch weights."""

    def __init__(self, weights_hash: bytes):
        if len(weights_hash) != 32:
            raise FormatError("weights hash must be 32 bytes")
        self.weights_hash = weights_hash
        self.entries: dict[tuple[bytes, int, str], np.ndarray] = {}

    def put(self, key: tuple[bytes, int], scale: str, vector: np.ndarray) -> None:
        self.entries[(key[0], key[1], scale)] = np.asarray(vector, dtype=np.float32)

    def get(self, key: tuple[bytes, int], scale: str) -> np.ndarray | None:
        return self.entries.get((key[0], key[1], scale))

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<I", FEATURE_VERSION))
            fh.write(self.weights_hash)
            fh.write(struct.pack("<I", len(self.entries)))
            for (tile_hash, index, scale), vec in self.entries.items():
                fh.write(tile_hash)
                fh.write(struct.pack("<IBI", index, SCALE_BYTE[scale], vec.size))
                fh.write(vec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureCache":
        data = Path(path).read_bytes()
        if data[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {data[:4]!r}")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        out = cls(data[8:40])
        (count,) = struct.unpack_from("<I", data, 40)
        off = 44
        for _ in range(count):
            tile_hash = data[off : off + 32]
            index, scale_b, width = struct.unpack_from("<IBI", data, off + 32)
            off += 41
            vec = np.frombuffer(data, dtype="<f4", count=width, offset=off).copy()
            off += 4 * width
            out.entries[(tile_hash, index, BYTE_SCALE[scale_b])] = vec
        if off != len(data):
            raise FormatError(f"{path}: trailing bytes")
        return out


def precompute_features(bundle: ModelBundle, keyed_triplets: list) -> FeatureCache:
    """One feature vector per (tile, scale the model consumes).

    ``keyed_triplets`` is a list of ((tile_hash, index), TileTriplet) pairs.
    Tiles run through the branch one at a time so cached vectors match the
    uncached ``predict`` path bit for bit.
    """
    cache = FeatureCache(bundle.branch_hash())
    for key, triplet in keyed_triplets:
        for scale in bundle.config.scales:
            if scale not in triplet.tiles:
                raise InputError(f"triplet at {key} lacks the {scale} tile")
            vec = branch_features(bundle, scale, triplet.tiles[scale][None], batch_size=1)[0]
            cache.put(key, scale, vec)
    return cache
