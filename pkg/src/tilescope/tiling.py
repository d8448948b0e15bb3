"""Co-centered multiscale tile extraction and the tile archive format.

Tiles are 128x128x3 crops of one pyramid level. A triplet's crops share one
base-level center point: the crop window at each level is [c-64, c+64) around
the floor-mapped center, so pixel (64, 64) is the center at every scale.

Centers on the 16-pixel base lattice keep the three crop windows block-aligned
across levels, which is what makes the exact box-filter relation between
scales hold tile-locally; ``plan_centers`` therefore snaps its grid to that
lattice.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES, class_index, class_name
from .errors import FormatError, InvalidSpecError, OutOfBoundsError
from .pyramid import MAGNIFICATIONS, SCALE_FACTORS, PyramidImage, RegionAnnotation, point_in_region

TILE_SIZE = 128
HALF_TILE = TILE_SIZE // 2

# Base-level lattice granularity that keeps 400x/100x/25x crops block-aligned.
CENTER_ALIGN = 16

ARCHIVE_MAGIC = b"TSTL"
ARCHIVE_VERSION = 1
ID_BYTES = 32

SCALE_BITS = {"25x": 1, "100x": 2, "400x": 4}


@dataclass(frozen=True)
class ExtractionPlan:
    """Sampling density and boundary handling for tile extraction."""

    stride: int = 128
    scales: tuple[str, ...] = MAGNIFICATIONS
    pad_value: int = 255

    def __post_init__(self):
        if self.stride < 1:
            raise InvalidSpecError("stride must be >= 1")
        for s in self.scales:
            if s not in MAGNIFICATIONS:
                raise InvalidSpecError(f"unknown scale {s!r}")
        if not 0 <= self.pad_value <= 255:
            raise InvalidSpecError("pad_value must fit in 8 bits")


@dataclass(frozen=True)
class TileTriplet:
    """Up to three co-centered tiles plus label and provenance."""

    slide_id: str
    patient_id: str
    label: str
    center_base: tuple[int, int]
    tiles: dict = field(default_factory=dict)  # magnification -> (128, 128, 3) uint8

    @property
    def scales_present(self) -> tuple[str, ...]:
        return tuple(m for m in MAGNIFICATIONS if m in self.tiles)

    def __post_init__(self):
        for mag, tile in self.tiles.items():
            if tile.shape != (TILE_SIZE, TILE_SIZE, 3):
                raise FormatError(f"{mag} tile has shape {tile.shape}, expected 128x128x3")


def map_center(center_base: tuple[int, int], target: str) -> tuple[int, int]:
    """Map a 400x center to a coarser level by floor division."""
    r = SCALE_FACTORS[target]
    return center_base[0] // r, center_base[1] // r


def _crop_padded(pixels: np.ndarray, cx: int, cy: int, pad_value: int) -> np.ndarray:
    """Crop the [c-64, c+64) window, filling out-of-bounds area with pad_value."""
    h, w = pixels.shape[:2]
    out = np.full((TILE_SIZE, TILE_SIZE, 3), pad_value, dtype=np.uint8)
    x0, x1 = cx - HALF_TILE, cx + HALF_TILE
    y0, y1 = cy - HALF_TILE, cy + HALF_TILE
    sx0, sx1 = max(0, x0), min(w, x1)
    sy0, sy1 = max(0, y0), min(h, y1)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = pixels[sy0:sy1, sx0:sx1]
    return out


def extract_triplet(
    pyramid: PyramidImage,
    center_base: tuple[int, int],
    label: str,
    scales: tuple[str, ...] = MAGNIFICATIONS,
    pad_value: int = 255,
) -> TileTriplet:
    """Extract co-centered tiles at the requested scales.

    The center must lie inside the slide at the base level; window portions
    outside a level's bounds are filled with ``pad_value``.
    """
    cx, cy = center_base
    if not (0 <= cx < pyramid.base_width and 0 <= cy < pyramid.base_height):
        raise OutOfBoundsError(
            f"center {center_base} outside {pyramid.base_width}x{pyramid.base_height} slide"
        )
    tiles = {}
    for mag in MAGNIFICATIONS:
        if mag not in scales:
            continue
        level = pyramid.level(mag)
        mx, my = map_center(center_base, mag)
        tiles[mag] = _crop_padded(level.pixels, mx, my, pad_value)
    return TileTriplet(
        slide_id=pyramid.slide_id,
        patient_id=pyramid.patient_id,
        label=label,
        center_base=(cx, cy),
        tiles=tiles,
    )


def plan_centers(region: RegionAnnotation, plan: ExtractionPlan) -> list[tuple[int, int]]:
    """Deterministic row-major grid of tile centers inside a region.

    Grid points sit at cell centers (bounding-box min + stride/2 + k*stride),
    snapped to the 16-pixel alignment lattice, then filtered by polygon
    membership. Duplicate centers after snapping are dropped.
    """
    minx, miny, maxx, maxy = region.bounding_box()
    half = plan.stride // 2
    centers: list[tuple[int, int]] = []
    seen = set()
    y = miny + half
    while y <= maxy:
        x = minx + half
        while x <= maxx:
            sx = round(x / CENTER_ALIGN) * CENTER_ALIGN
            sy = round(y / CENTER_ALIGN) * CENTER_ALIGN
            if (sx, sy) not in seen and point_in_region(region, sx, sy):
                seen.add((sx, sy))
                centers.append((sx, sy))
            x += plan.stride
        y += plan.stride
    return centers


# ---------------------------------------------------------------------------
# Tile archive: fixed header per tile followed by present tiles coarse-to-fine.
# ---------------------------------------------------------------------------

def _pack_id(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > ID_BYTES:
        raise FormatError(f"identifier longer than {ID_BYTES} bytes: {value!r}")
    return raw.ljust(ID_BYTES, b"\0")


def _unpack_id(raw: bytes) -> str:
    return raw.rstrip(b"\0").decode("utf-8")


def save_archive(triplets: list[TileTriplet], path: str | Path) -> None:
    """Write triplets to a TSTL archive, preserving order."""
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<II", ARCHIVE_VERSION, len(triplets)))
        for t in triplets:
            mask = sum(SCALE_BITS[m] for m in t.scales_present)
            fh.write(struct.pack("<BBII", class_index(t.label), mask, t.center_base[0], t.center_base[1]))
            fh.write(_pack_id(t.slide_id))
            fh.write(_pack_id(t.patient_id))
            for mag in MAGNIFICATIONS:
                if mag in t.tiles:
                    fh.write(t.tiles[mag].tobytes())


class TileArchive:
    """Random-access reader for a TSTL archive.

    Tile headers are scanned once at open; pixel payloads are read on demand.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        data = self.path.read_bytes()
        if data[:4] != ARCHIVE_MAGIC:
            raise FormatError(f"{path}: bad magic {data[:4]!r}")
        version, count = struct.unpack_from("<II", data, 4)
        if version != ARCHIVE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        self._data = data
        self._offsets = []
        self._headers = []
        off = 12
        tile_bytes = TILE_SIZE * TILE_SIZE * 3
        for _ in range(count):
            if off + 10 + 2 * ID_BYTES > len(data):
                raise FormatError(f"{path}: truncated archive")
            label_idx, mask, cx, cy = struct.unpack_from("<BBII", data, off)
            slide_id = _unpack_id(data[off + 10 : off + 10 + ID_BYTES])
            patient_id = _unpack_id(data[off + 10 + ID_BYTES : off + 10 + 2 * ID_BYTES])
            self._offsets.append(off)
            self._headers.append((label_idx, mask, cx, cy, slide_id, patient_id))
            n_scales = bin(mask).count("1")
            off += 10 + 2 * ID_BYTES + n_scales * tile_bytes
        if off != len(data):
            raise FormatError(f"{path}: {len(data) - off} trailing bytes")
        self.content_hash = hashlib.sha256(data).digest()

    def __len__(self) -> int:
        return len(self._headers)

    def label(self, index: int) -> str:
        return class_name(self._headers[index][0])

    def patient_id(self, index: int) -> str:
        return self._headers[index][5]

    def slide_id(self, index: int) -> str:
        return self._headers[index][4]

    def read(self, index: int) -> TileTriplet:
        label_idx, mask, cx, cy, slide_id, patient_id = self._headers[index]
        off = self._offsets[index] + 10 + 2 * ID_BYTES
        tile_bytes = TILE_SIZE * TILE_SIZE * 3
        tiles = {}
        for mag in MAGNIFICATIONS:
            if mask & SCALE_BITS[mag]:
                buf = self._data[off : off + tile_bytes]
                tiles[mag] = np.frombuffer(buf, dtype=np.uint8).reshape(TILE_SIZE, TILE_SIZE, 3).copy()
                off += tile_bytes
        return TileTriplet(
            slide_id=slide_id,
            patient_id=patient_id,
            label=class_name(label_idx),
            center_base=(cx, cy),
            tiles=tiles,
        )
