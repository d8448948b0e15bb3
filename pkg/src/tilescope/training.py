"""Training loop with early stopping and best-epoch restore, plus grid search.

Only the head trains; branches stay frozen, so branch features are computed
once per run (or shared across runs) and the epoch loop touches dense layers
only. All per-epoch randomness derives functionally from (run seed, epoch),
which makes checkpoint resume bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES
from .errors import FormatError, InsufficientDataError, StateError
from .evaluation import MetricsReport, aggregate_runs, confusion, report_from_confusion
from .model import (
    DROPOUT_GRID,
    FC_GRID,
    ModelBundle,
    ModelConfig,
    branch_features,
    build_model,
    concat_features,
    head_probs,
    reinit_head,
)
from .nn import ModelWeights, backward, cross_entropy, forward, sgd_step

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1

_SHUFFLE_TAG = 0x5F
_DROPOUT_TAG = 0xD0
_RUN_TAG = 0x12


@dataclass
class SplitTiles:
    """One dataset partition, materialized: stacked tiles per scale + labels."""

    tiles: dict  # scale -> (N, 128, 128, 3) uint8
    labels: np.ndarray  # (N,) int64
    patients: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class TrainData:
    train: SplitTiles
    val: SplitTiles
    test: SplitTiles


@dataclass
class TrainHyper:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    patience: int = 30
    max_epochs: int = 200
    feature_batch: int = 64
    checkpoint_path: str | None = None
    checkpoint_every: int = 0
    log_path: str | None = None


class EarlyStopper:
    """Stop after `patience` epochs without strict best-loss improvement."""

    def __init__(self, patience: int, best: float = np.inf, best_epoch: int = 0, counter: int = 0):
        self.patience = patience
        self.best = best
        self.best_epoch = best_epoch
        self.counter = counter

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


@dataclass
class TrainState:
    """Resumable snapshot of a run after some completed epoch."""

    config: ModelConfig
    run_seed: int
    epoch: int
    best_val_loss: float
    best_epoch: int
    patience_counter: int
    stopped: bool
    weights: ModelWeights
    best_head: dict
    velocity: dict


@dataclass
class RunRecord:
    config: ModelConfig
    run_seed: int
    train_losses: list
    val_losses: list
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int
    stopped_early: bool
    restored_val_loss: float
    val_confusion: np.ndarray
    val_report: MetricsReport
    test_confusion: np.ndarray | None
    test_report: MetricsReport | None
    final_head: dict
    seconds: float


def derive_run_seed(base_seed: int, *tags: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), _RUN_TAG, *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _epoch_perm(run_seed: int, epoch: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence([run_seed, _SHUFFLE_TAG, epoch])
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def _batch_seed(run_seed: int, epoch: int, batch_index: int) -> int:
    ss = np.random.SeedSequence([run_seed, _DROPOUT_TAG, epoch, batch_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_features(bundle: ModelBundle, split: SplitTiles, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated frozen-branch features for one partition."""
    feats = {
        scale: branch_features(bundle, scale, split.tiles[scale], batch_size=batch_size)
        for scale in bundle.config.scales
    }
    return concat_features(bundle, feats), split.labels


def prepare_features(bundle: ModelBundle, data: TrainData, batch_size: int = 64) -> dict:
    return {
        "train": split_features(bundle, data.train, batch_size),
        "val": split_features(bundle, data.val, batch_size),
        "test": split_features(bundle, data.test, batch_size),
    }


def _dataset_loss(bundle: ModelBundle, feats: np.ndarray, labels: np.ndarray, batch: int = 512) -> float:
    total = 0.0
    for i in range(0, len(labels), batch):
        f, y = feats[i : i + batch], labels[i : i + batch]
        probs = head_probs(bundle, f)
        total += cross_entropy(probs, y) * len(y)
    return total / len(labels)


def _head_snapshot(bundle: ModelBundle) -> dict:
    return {n: bundle.weights.arrays[n].copy() for n in bundle.weights.trainable_names()}


def _restore_head(bundle: ModelBundle, snapshot: dict) -> None:
    for name, arr in snapshot.items():
        bundle.weights.arrays[name] = arr.copy()


def train(
    config: ModelConfig,
    data: TrainData | None,
    hyper: TrainHyper,
    run_seed: int = 0,
    features: dict | None = None,
    resume_from: TrainState | None = None,
    eval_test: bool = True,
) -> RunRecord:
    """Train the head with early stopping; restore best epoch; test once.

    ``features`` may carry precomputed (features, labels) per partition to
    share frozen-branch work across runs; otherwise they are computed here
    from ``data``. Model selection metrics come from the validation set; the
    test set is evaluated exactly once, after the best-epoch restore.
    """
    t0 = time.perf_counter()
    bundle = build_model(config)
    if resume_from is not None:
        if resume_from.config != config:
            raise StateError("checkpoint config does not match requested config")
        for name in bundle.weights.names:
            bundle.weights.arrays[name] = resume_from.weights.arrays[name].copy()
    else:
        reinit_head(bundle, derive_run_seed(run_seed))

    if features is None:
        if data is None:
            raise InsufficientDataError("train() needs tile data or precomputed features")
        features = prepare_features(bundle, data, hyper.feature_batch)
    f_train, y_train = features["train"]
    f_val, y_val = features["val"]
    if len(y_train) == 0 or len(y_val) == 0:
        raise InsufficientDataError("empty train or validation partition")

    if resume_from is not None:
        stopper = EarlyStopper(
            hyper.patience,
            best=resume_from.best_val_loss,
            best_epoch=resume_from.best_epoch,
            counter=resume_from.patience_counter,
        )
        velocity = {k: v.copy() for k, v in resume_from.velocity.items()}
        best_head = {k: v.copy() for k, v in resume_from.best_head.items()}
        start_epoch = resume_from.epoch
        stopped = resume_from.stopped
    else:
        stopper = EarlyStopper(hyper.patience)
        velocity = {}
        best_head = _head_snapshot(bundle)
        start_epoch = 0
        stopped = False

    train_losses: list[float] = []
    val_losses: list[float] = []
    log_rows: list[str] = []
    epoch = start_epoch
    while not stopped and epoch < hyper.max_epochs:
        epoch += 1
        te = time.perf_counter()
        perm = _epoch_perm(run_seed, epoch, len(y_train))
        fs, ys = f_train[perm], y_train[perm]
        loss_sum = 0.0
        n_batches = (len(ys) + hyper.batch_size - 1) // hyper.batch_size
        for b in range(n_batches):
            sl = slice(b * hyper.batch_size, (b + 1) * hyper.batch_size)
            fb, yb = fs[sl], ys[sl]
            states = forward(bundle.head_layers, bundle.weights, fb, mode="train",
                             seed=_batch_seed(run_seed, epoch, b))
            loss_sum += cross_entropy(states[-1].output, yb) * len(yb)
            grads = backward(bundle.head_layers, bundle.weights, states, yb)
            velocity = sgd_step(bundle.weights, grads, hyper.learning_rate, hyper.momentum, velocity)
        train_loss = loss_sum / len(ys)
        val_loss = _dataset_loss(bundle, f_val, y_val)
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        improved = val_loss < stopper.best
        stopped = stopper.update(epoch, val_loss)
        if improved:
            best_head = _head_snapshot(bundle)
        log_rows.append(f"{epoch},{train_loss:.6f},{val_loss:.6f},{time.perf_counter() - te:.3f}")
        if hyper.checkpoint_path and hyper.checkpoint_every and (
            epoch % hyper.checkpoint_every == 0 or stopped
        ):
            save_checkpoint(
                _make_state(config, run_seed, epoch, stopper, stopped, bundle, best_head, velocity),
                hyper.checkpoint_path,
            )

    _restore_head(bundle, best_head)
    restored_val = _dataset_loss(bundle, f_val, y_val) if len(y_val) else np.inf

    val_probs = _predict_all(bundle, f_val)
    val_conf = confusion(y_val, val_probs.argmax(axis=1))
    val_report = report_from_confusion(val_conf)

    test_conf = None
    test_report = None
    if eval_test:
        f_test, y_test = features["test"]
        if len(y_test):
            test_probs = _predict_all(bundle, f_test)
            test_conf = confusion(y_test, test_probs.argmax(axis=1))
            test_report = report_from_confusion(test_conf)

    if hyper.log_path:
        Path(hyper.log_path).write_text(
            "epoch,train_loss,val_loss,seconds\n" + "\n".join(log_rows) + ("\n" if log_rows else "")
        )

    return RunRecord(
        config=config,
        run_seed=run_seed,
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=stopper.best_epoch,
        best_val_loss=float(stopper.best),
        stopped_epoch=epoch,
        stopped_early=stopped,
        restored_val_loss=float(restored_val),
        val_confusion=val_conf,
        val_report=val_report,
        test_confusion=test_conf,
        test_report=test_report,
        final_head={k: v.copy() for k, v in best_head.items()},
        seconds=time.perf_counter() - t0,
    )


def _predict_all(bundle: ModelBundle, feats: np.ndarray, batch: int = 512) -> np.ndarray:
    chunks = [head_probs(bundle, feats[i : i + batch]) for i in range(0, len(feats), batch)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, NUM_CLASSES), dtype=np.float32)


def _make_state(config, run_seed, epoch, stopper: EarlyStopper, stopped, bundle, best_head, velocity) -> TrainState:
    return TrainState(
        config=config,
        run_seed=run_seed,
        epoch=epoch,
        best_val_loss=float(stopper.best),
        best_epoch=stopper.best_epoch,
        patience_counter=stopper.counter,
        stopped=stopped,
        weights=bundle.weights.copy(),
        best_head={k: v.copy() for k, v in best_head.items()},
        velocity={k: v.copy() for k, v in velocity.items()},
    )


# ---------------------------------------------------------------------------
# Checkpoint serialization.
# ---------------------------------------------------------------------------

def _weights_from_dict(d: dict) -> ModelWeights:
    w = ModelWeights()
    for name in sorted(d):
        w.add(name, d[name])
    return w


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    cfg = {
        "arch": state.config.arch,
        "fc_neurons": state.config.fc_neurons,
        "dropout": state.config.dropout,
        "branch": state.config.branch,
        "seed": state.config.seed,
    }
    cfg_raw = json.dumps(cfg, sort_keys=True).encode("utf-8")
    blobs = [
        state.weights.to_bytes(),
        _weights_from_dict(state.best_head).to_bytes(),
        _weights_from_dict(state.velocity).to_bytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_raw)))
        fh.write(cfg_raw)
        fh.write(struct.pack("<QIIIBd", state.run_seed, state.epoch, state.best_epoch,
                             state.patience_counter, 1 if state.stopped else 0,
                             state.best_val_loss))
        for blob in blobs:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def resume(checkpoint_path: str | Path) -> TrainState:
    """Load a checkpoint; training continues bit-identically from it."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise FormatError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    try:
        cfg = json.loads(data[off : off + cfg_len].decode("utf-8"))
        off += cfg_len
        run_seed, epoch, best_epoch, patience_counter, stopped, best_val_loss = struct.unpack_from(
            "<QIIIBd", data, off
        )
        off += struct.calcsize("<QIIIBd")
        blobs = []
        for _ in range(3):
            (blen,) = struct.unpack_from("<I", data, off)
            off += 4
            blobs.append(ModelWeights.from_bytes(data[off : off + blen]))
            off += blen
        config = ModelConfig(
            arch=cfg["arch"],
            fc_neurons=cfg["fc_neurons"],
            dropout=cfg["dropout"],
            branch=cfg["branch"],
            seed=cfg["seed"],
        )
    except (KeyError, ValueError, struct.error) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return TrainState(
        config=config,
        run_seed=run_seed,
        epoch=epoch,
        best_val_loss=best_val_loss,
        best_epoch=best_epoch,
        patience_counter=patience_counter,
        stopped=bool(stopped),
        weights=blobs[0],
        best_head=dict(blobs[1].arrays),
        velocity=dict(blobs[2].arrays),
    )


# ---------------------------------------------------------------------------
# Hyperparameter grid.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    architectures: tuple = ("MONO", "DI", "TRI")
    fc_grid: tuple = FC_GRID
    dropout_grid: tuple = DROPOUT_GRID
    runs_per_config: int = 3
    base_seed: int = 0
    branch: str = "small"


@dataclass
class ConfigSummary:
    config: ModelConfig
    val_macro_mean: float
    val_macro_std: float
    test_f1_mean: float
    test_f1_std: float
    runs: int


@dataclass
class GridResult:
    records: list
    summaries: list
    best_per_arch: dict


def grid_configs(grid: GridSpec) -> list[ModelConfig]:
    """Deterministic enumeration: architectures x fc sizes x dropout rates."""
    configs = []
    for arch in grid.architectures:
        for fc in grid.fc_grid:
            for rate in grid.dropout_grid:
                configs.append(ModelConfig(arch=arch, fc_neurons=fc, dropout=rate,
                                           branch=grid.branch, seed=grid.base_seed))
    return configs


def _config_key(config: ModelConfig) -> tuple:
    return (config.arch, config.fc_neurons, config.dropout)


def run_grid(
    grid: GridSpec,
    data: TrainData | None,
    hyper: TrainHyper,
    train_fn=train,
    features_by_arch: dict | None = None,
) -> GridResult:
    """Run every config `runs_per_config` times with derived seeds.

    Selection is by validation macro F1 only; test metrics are carried along
    for reporting and never influence the choice.
    """
    records = []
    for config in grid_configs(grid):
        arch_idx = grid.architectures.index(config.arch)
        features = None if features_by_arch is None else features_by_arch[config.arch]
        for run_idx in range(grid.runs_per_config):
            run_seed = derive_run_seed(
                grid.base_seed, arch_idx, config.fc_neurons, int(round(config.dropout * 10)), run_idx
            )
            records.append(train_fn(config, data, hyper, run_seed=run_seed, features=features))
    summaries = summarize_records(records)
    return GridResult(records=records, summaries=summaries, best_per_arch=select_best(summaries))


def summarize_records(records: list) -> list[ConfigSummary]:
    """Per-config aggregates, reduced in sorted config order."""
    groups: dict[tuple, list] = {}
    for rec in records:
        groups.setdefault(_config_key(rec.config), []).append(rec)
    summaries = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        runs = groups[key]
        val_macros = np.array([r.val_report.macro_f1_mean for r in runs])
        test_pool = aggregate_runs([r.test_confusion for r in runs if r.test_confusion is not None]) \
            if any(r.test_confusion is not None for r in runs) else None
        summaries.append(ConfigSummary(
            config=runs[0].config,
            val_macro_mean=float(val_macros.mean()),
            val_macro_std=float(val_macros.std(ddof=0)),
            test_f1_mean=float(test_pool.macro_f1_mean) if test_pool else float("nan"),
            test_f1_std=float(test_pool.f1_std) if test_pool else float("nan"),
            runs=len(runs),
        ))
    return summaries


def select_best(summaries: list) -> dict:
    """Best config per architecture by validation macro F1 alone."""
    best: dict[str, ConfigSummary] = {}
    for s in summaries:
        cur = best.get(s.config.arch)
        if cur is None or s.val_macro_mean > cur.val_macro_mean:
            best[s.config.arch] = s
    return best
