"""End-to-end glue: synthetic cohorts, split materialization, slide maps.

These helpers connect the pyramid/tiling/dataset layers to the training and
model layers without going through disk, and provide the slide-level class
map used for ROI extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classes import CLASS_COLORS, CLASS_NAMES, class_index
from .dataset import IDENTITY, DatasetSplit, apply_dihedral
from .errors import InputError
from .model import ModelBundle, branch_features, concat_features, head_probs
from .pyramid import PyramidImage, SyntheticSpec, generate_synthetic
from .tiling import ExtractionPlan, TileArchive, TileTriplet, extract_triplet, plan_centers
from .training import SplitTiles, TrainData


@dataclass(frozen=True)
class CohortSpec:
    """A synthetic multi-patient cohort of slides."""

    seed: int
    n_patients: int = 10
    slides_per_patient: int = 2
    base_width: int = 2304
    base_height: int = 1728
    regions_per_class: int = 2
    region_cell: int = 576
    stride: int = 128
    scales: tuple = ("25x", "100x", "400x")
    pad_value: int = 255

    def patient_ids(self) -> list[str]:
        return [f"P{i:02d}" for i in range(self.n_patients)]


@dataclass
class MemTile:
    """In-memory split item: a triplet plus the attributes splitting needs."""

    label: str
    patient_id: str
    slide_id: str
    triplet: TileTriplet


def _slide_seed(seed: int, patient_idx: int, slide_idx: int) -> int:
    ss = np.random.SeedSequence([int(seed), 0x571DE, patient_idx, slide_idx])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def cohort_slide_specs(spec: CohortSpec) -> list[SyntheticSpec]:
    out = []
    for p in range(spec.n_patients):
        for s in range(spec.slides_per_patient):
            out.append(SyntheticSpec(
                seed=_slide_seed(spec.seed, p, s),
                base_width=spec.base_width,
                base_height=spec.base_height,
                regions_per_class=spec.regions_per_class,
                region_cell=spec.region_cell,
                slide_id=f"S{p:02d}_{s}",
                patient_id=f"P{p:02d}",
            ))
    return out


def tiles_from_slide(pyramid: PyramidImage, annotations, plan: ExtractionPlan) -> list[MemTile]:
    tiles = []
    for region in annotations:
        for center in plan_centers(region, plan):
            triplet = extract_triplet(pyramid, center, region.label, plan.scales, plan.pad_value)
            tiles.append(MemTile(
                label=region.label,
                patient_id=region.patient_id,
                slide_id=region.slide_id,
                triplet=triplet,
            ))
    return tiles


def generate_cohort_tiles(spec: CohortSpec) -> list[MemTile]:
    """Generate every slide and extract all region tiles, slide by slide."""
    plan = ExtractionPlan(stride=spec.stride, scales=spec.scales, pad_value=spec.pad_value)
    tiles = []
    for slide_spec in cohort_slide_specs(spec):
        pyramid, annotations = generate_synthetic(slide_spec)
        tiles.extend(tiles_from_slide(pyramid, annotations, plan))
    return tiles


def _fetch_triplet(item, archives: dict) -> TileTriplet:
    if hasattr(item, "triplet"):
        return item.triplet
    if item.archive not in archives:
        archives[item.archive] = TileArchive(item.archive)
    return archives[item.archive].read(item.index)


def materialize_split(items, tags, scales: tuple) -> SplitTiles:
    """Stack tile arrays for one partition, applying its augment tags."""
    if tags is None:
        tags = [IDENTITY] * len(items)
    archives: dict[str, TileArchive] = {}
    per_scale = {scale: [] for scale in scales}
    labels = []
    patients = []
    for item, tag in zip(items, tags):
        triplet = _fetch_triplet(item, archives)
        for scale in scales:
            if scale not in triplet.tiles:
                raise InputError(f"tile from {triplet.slide_id} lacks the {scale} scale")
            tile = triplet.tiles[scale]
            per_scale[scale].append(tile if tag == IDENTITY else apply_dihedral(tile, tag))
        labels.append(class_index(item.label))
        patients.append(item.patient_id)
    stacked = {
        scale: np.stack(arrs) if arrs else np.zeros((0, 128, 128, 3), dtype=np.uint8)
        for scale, arrs in per_scale.items()
    }
    return SplitTiles(tiles=stacked, labels=np.asarray(labels, dtype=np.int64), patients=patients)


def materialize_dataset(split: DatasetSplit, scales: tuple) -> TrainData:
    return TrainData(
        train=materialize_split(split.train, split.augmentation_log, scales),
        val=materialize_split(split.val, None, scales),
        test=materialize_split(split.test, None, scales),
    )


# ---------------------------------------------------------------------------
# Slide-level ROI class maps.
# ---------------------------------------------------------------------------

@dataclass
class ClassMap:
    """Per-tile argmax labels and probabilities over a slide grid."""

    labels: np.ndarray  # (grid_h, grid_w) int64
    probs: np.ndarray  # (grid_h, grid_w, 6) float32
    stride: int
    slide_id: str
    legend: dict = field(default_factory=lambda: dict(CLASS_COLORS))


def classify_slide(bundle: ModelBundle, pyramid: PyramidImage, stride: int = 128,
                   pad_value: int = 255, batch_size: int = 64) -> ClassMap:
    """Tile the whole slide at the given stride and predict every cell.

    Grid dimensions are ceil(extent / stride) per axis; cell centers are
    clamped to the slide so border cells are padded rather than skipped.
    """
    w, h = pyramid.base_width, pyramid.base_height
    grid_w = -(-w // stride)
    grid_h = -(-h // stride)
    scales = bundle.config.scales
    per_scale = {scale: [] for scale in scales}
    for i in range(grid_h):
        for j in range(grid_w):
            cx = min(j * stride + stride // 2, w - 1)
            cy = min(i * stride + stride // 2, h - 1)
            triplet = extract_triplet(pyramid, (cx, cy), "background", scales, pad_value)
            for scale in scales:
                per_scale[scale].append(triplet.tiles[scale])
    feats = {
        scale: branch_features(bundle, scale, np.stack(per_scale[scale]), batch_size=batch_size)
        for scale in scales
    }
    probs = head_probs(bundle, concat_features(bundle, feats))
    probs = probs.reshape(grid_h, grid_w, -1)
    return ClassMap(
        labels=probs.argmax(axis=2).astype(np.int64),
        probs=probs.astype(np.float32),
        stride=stride,
        slide_id=pyramid.slide_id,
    )


def render_class_map(cmap: ClassMap, cell_px: int = 1) -> np.ndarray:
    """RGB raster with one colored cell per tile."""
    palette = np.array([cmap.legend[name] for name in CLASS_NAMES], dtype=np.uint8)
    img = palette[cmap.labels]
    if cell_px > 1:
        img = np.repeat(np.repeat(img, cell_px, axis=0), cell_px, axis=1)
    return img


def class_map_text(cmap: ClassMap) -> str:
    """One text row per grid row, space-separated class names."""
    rows = []
    for i in range(cmap.labels.shape[0]):
        rows.append(" ".join(CLASS_NAMES[k] for k in cmap.labels[i]))
    return "\n".join(rows) + "\n"
