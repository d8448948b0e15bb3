"""Patient-level splits, augmentation-based balancing, and dataset manifests.

Split items are duck-typed: anything with ``label`` and ``patient_id``
attributes participates. Archive-backed pipelines use :class:`TileRef`;
in-memory pipelines may pass their own records.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES
from .errors import FormatError, InsufficientDataError, InvalidSpecError, UnbalanceableError
from .tiling import TileArchive, TileTriplet

IDENTITY = "identity"

# The 8 dihedral symmetries of a square, as array maps on (H, W, C) tiles.
TRANSFORMS = {
    "identity": lambda a: a.copy(),
    "rot90": lambda a: np.rot90(a, 1).copy(),
    "rot180": lambda a: np.rot90(a, 2).copy(),
    "rot270": lambda a: np.rot90(a, 3).copy(),
    "flip_h": lambda a: a[:, ::-1].copy(),
    "flip_v": lambda a: a[::-1, :].copy(),
    "transpose": lambda a: a.transpose(1, 0, 2).copy(),
    "anti_transpose": lambda a: a[::-1, ::-1].transpose(1, 0, 2).copy(),
}

INVERSE = {
    "identity": "identity",
    "rot90": "rot270",
    "rot180": "rot180",
    "rot270": "rot90",
    "flip_h": "flip_h",
    "flip_v": "flip_v",
    "transpose": "transpose",
    "anti_transpose": "anti_transpose",
}

NON_IDENTITY = tuple(n for n in TRANSFORMS if n != IDENTITY)

TRAIN_PERCENT = 85


@dataclass(frozen=True)
class TileRef:
    """Reference to one tile inside an archive."""

    archive: str
    index: int
    label: str
    patient_id: str


@dataclass
class DatasetSplit:
    """Train/val/test partitions plus the per-tile augmentation log.

    ``augmentation_log`` is aligned with ``train``; val and test tiles are
    never augmented.
    """

    train: list
    val: list
    test: list
    seed: int
    augmentation_log: list = field(default_factory=list)

    def class_counts(self, part: str = "train") -> Counter:
        return Counter(item.label for item in getattr(self, part))


def apply_dihedral(tile: np.ndarray, transform: str) -> np.ndarray:
    """Apply one of the 8 exact pixel permutations to an (H, W, C) tile."""
    if transform not in TRANSFORMS:
        raise InvalidSpecError(f"unknown transform {transform!r}")
    return TRANSFORMS[transform](tile)


def apply_dihedral_triplet(triplet: TileTriplet, transform: str) -> TileTriplet:
    """Apply the same transform to every scale of a triplet."""
    return TileTriplet(
        slide_id=triplet.slide_id,
        patient_id=triplet.patient_id,
        label=triplet.label,
        center_base=triplet.center_base,
        tiles={mag: apply_dihedral(t, transform) for mag, t in triplet.tiles.items()},
    )


def split_by_patient(tiles: list, test_patients: set, seed: int) -> DatasetSplit:
    """Route all tiles of held-out patients to test, then split 85/15.

    The non-test remainder is shuffled with a generator seeded from ``seed``,
    then cut at floor(0.85 * n): the first part is train, the rest validation.
    """
    observed = {t.patient_id for t in tiles}
    unknown = set(test_patients) - observed
    if unknown:
        raise InvalidSpecError(f"test patients not in cohort: {sorted(unknown)}")
    test = [t for t in tiles if t.patient_id in test_patients]
    rest = [t for t in tiles if t.patient_id not in test_patients]
    if not rest:
        raise InsufficientDataError("no tiles left for train/val after removing test patients")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x517])))
    order = rng.permutation(len(rest))
    shuffled = [rest[i] for i in order]
    n_train = (TRAIN_PERCENT * len(shuffled)) // 100
    train, val = shuffled[:n_train], shuffled[n_train:]
    return DatasetSplit(
        train=train,
        val=val,
        test=test,
        seed=seed,
        augmentation_log=[IDENTITY] * len(train),
    )


def balance_by_augmentation(train: list, seed: int) -> tuple[list, list]:
    """Top up every minority class to the majority count with dihedral copies.

    Tiles of a class are cycled in a seeded order; each tile carries its own
    seeded deck of the 7 non-identity transforms, so no (tile, transform) pair
    repeats until all of a tile's transforms are spent. Returns the augmented
    item list and the aligned transform-tag log.
    """
    by_class = {c: [t for t in train if t.label == c] for c in CLASS_NAMES}
    empty = [c for c, items in by_class.items() if not items]
    if empty:
        raise UnbalanceableError(f"classes with zero tiles cannot be balanced: {empty}")
    target = max(len(items) for items in by_class.values())
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBA1])))

    out = list(train)
    log = [IDENTITY] * len(train)
    for label in CLASS_NAMES:
        items = by_class[label]
        need = target - len(items)
        if need == 0:
            continue
        order = rng.permutation(len(items))
        decks = [tuple(NON_IDENTITY[j] for j in rng.permutation(len(NON_IDENTITY))) for _ in items]
        for k in range(need):
            pick = int(order[k % len(items)])
            transform = decks[pick][(k // len(items)) % len(NON_IDENTITY)]
            out.append(items[pick])
            log.append(transform)
    return out, log


def build_dataset(tiles: list, test_patients: set, seed: int) -> DatasetSplit:
    """split_by_patient followed by train balancing; val/test untouched."""
    split = split_by_patient(tiles, test_patients, seed)
    split.train, split.augmentation_log = balance_by_augmentation(split.train, seed)
    return split


# ---------------------------------------------------------------------------
# Manifest: one tab-separated record per tile.
# ---------------------------------------------------------------------------

def save_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write archive-backed splits as `archive  index  split  augment  seed` rows."""
    lines = []
    for item, tag in zip(split.train, split.augmentation_log):
        lines.append(f"{item.archive}\t{item.index}\ttrain\t{tag}\t{split.seed}")
    for part in ("val", "test"):
        for item in getattr(split, part):
            lines.append(f"{item.archive}\t{item.index}\t{part}\t{IDENTITY}\t{split.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetSplit:
    """Load a manifest, resolving labels and patients from the archives."""
    archives: dict[str, TileArchive] = {}
    parts = {"train": [], "val": [], "test": []}
    log = []
    seeds = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields")
        archive_path, index_s, part, tag, seed_s = fields
        if part not in parts:
            raise FormatError(f"{path}:{lineno}: unknown split tag {part!r}")
        if tag not in TRANSFORMS:
            raise FormatError(f"{path}:{lineno}: unknown augment tag {tag!r}")
        if archive_path not in archives:
            archives[archive_path] = TileArchive(archive_path)
        arc = archives[archive_path]
        index = int(index_s)
        ref = TileRef(
            archive=archive_path,
            index=index,
            label=arc.label(index),
            patient_id=arc.patient_id(index),
        )
        parts[part].append(ref)
        if part == "train":
            log.append(tag)
        seeds.add(int(seed_s))
    if len(seeds) > 1:
        raise FormatError(f"{path}: inconsistent seeds {sorted(seeds)}")
    seed = seeds.pop() if seeds else 0
    return DatasetSplit(
        train=parts["train"],
        val=parts["val"],
        test=parts["test"],
        seed=seed,
        augmentation_log=log,
    )
