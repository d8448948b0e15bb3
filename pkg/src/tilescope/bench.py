"""Desk-scale benchmark comparing single-scale and multiscale models.

The synthetic cohort contains class pairs that share color and noise and
differ only in long-period stripe layout, so 400x tiles alone cannot separate
them while the wider 100x field of view can. The benchmark trains MONO and DI
heads on frozen seeded-random branches over a patient-disjoint split and
reports test macro F1 averaged over seeded runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import build_dataset
from .model import ARCH_SCALES, ModelConfig, branch_features, build_model
from .pipeline import CohortSpec, generate_cohort_tiles, materialize_dataset
from .training import TrainData, TrainHyper, derive_run_seed, train

BENCH_SCALES = ("100x", "400x")


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 20260809
    n_patients: int = 10
    slides_per_patient: int = 2
    test_patients: int = 2
    base_width: int = 2304
    base_height: int = 1728
    regions_per_class: int = 2
    region_cell: int = 576
    stride: int = 128
    architectures: tuple = ("MONO", "DI")
    branch: str = "small"
    fc_neurons: int = 512
    dropout: float = 0.0
    runs: int = 3
    hyper: TrainHyper = field(default_factory=lambda: TrainHyper(
        learning_rate=0.05, momentum=0.9, batch_size=32, patience=10, max_epochs=100,
    ))


@dataclass
class BenchmarkResult:
    f1_by_arch: dict  # arch -> list of per-run test macro F1
    records: dict  # arch -> list of RunRecord
    data_sizes: dict

    def mean_f1(self, arch: str) -> float:
        return float(np.mean(self.f1_by_arch[arch]))


def build_benchmark_data(spec: BenchmarkSpec) -> TrainData:
    """Cohort -> patient-disjoint split -> balanced train -> stacked arrays."""
    cohort = CohortSpec(
        seed=spec.seed,
        n_patients=spec.n_patients,
        slides_per_patient=spec.slides_per_patient,
        base_width=spec.base_width,
        base_height=spec.base_height,
        regions_per_class=spec.regions_per_class,
        region_cell=spec.region_cell,
        stride=spec.stride,
        scales=BENCH_SCALES,
    )
    tiles = generate_cohort_tiles(cohort)
    held_out = set(cohort.patient_ids()[: spec.test_patients])
    split = build_dataset(tiles, held_out, seed=spec.seed)
    return materialize_dataset(split, BENCH_SCALES)


def benchmark_features(spec: BenchmarkSpec, data: TrainData) -> dict:
    """Per-arch (features, labels) per partition, branch work shared by scale.

    Branch weights depend only on (seed, scale), so the DI bundle's per-scale
    features serve the MONO model too.
    """
    di = build_model(ModelConfig("DI", spec.fc_neurons, spec.dropout, spec.branch, spec.seed))
    per_scale = {}
    for part_name in ("train", "val", "test"):
        part = getattr(data, part_name)
        feats = {scale: branch_features(di, scale, part.tiles[scale]) for scale in BENCH_SCALES}
        per_scale[part_name] = (feats, part.labels)
    features_by_arch = {}
    for arch in spec.architectures:
        features_by_arch[arch] = {
            part: (
                np.concatenate([per_scale[part][0][s] for s in ARCH_SCALES[arch]], axis=1),
                per_scale[part][1],
            )
            for part in ("train", "val", "test")
        }
    return features_by_arch


def run_benchmark(spec: BenchmarkSpec, data: TrainData | None = None) -> BenchmarkResult:
    if data is None:
        data = build_benchmark_data(spec)
    features_by_arch = benchmark_features(spec, data)
    f1_by_arch = {}
    records = {}
    for arch_idx, arch in enumerate(spec.architectures):
        config = ModelConfig(arch, spec.fc_neurons, spec.dropout, spec.branch, spec.seed)
        arch_records = []
        for run_idx in range(spec.runs):
            run_seed = derive_run_seed(spec.seed, arch_idx, run_idx)
            arch_records.append(train(config, None, spec.hyper, run_seed=run_seed,
                                      features=features_by_arch[arch]))
        records[arch] = arch_records
        f1_by_arch[arch] = [r.test_report.macro_f1_mean for r in arch_records]
    return BenchmarkResult(
        f1_by_arch=f1_by_arch,
        records=records,
        data_sizes={p: len(getattr(data, p)) for p in ("train", "val", "test")},
    )
