"""Multi-level slide pyramids: data model, synthetic generator, and disk I/O.

A pyramid holds exactly three RGB levels tagged 25x, 100x and 400x, coarse to
fine, with a fixed linear scale factor of 4 between adjacent levels. Coarser
levels are exact box-filter means of the 400x base, quantized round-half-up to
8 bits, which makes cross-scale properties exactly testable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classes import CLASS_NAMES
from .errors import (
    DimensionMismatchError,
    FormatError,
    InvalidSpecError,
    MissingLevelError,
)

MAGNIFICATIONS = ("25x", "100x", "400x")

# Linear downsample factor from the 400x base level.
SCALE_FACTORS = {"25x": 16, "100x": 4, "400x": 1}

RASTER_MAGIC = b"TSPX"
RASTER_VERSION = 1

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "regions.txt"


@dataclass(frozen=True)
class Level:
    """One pyramid level: row-major 8-bit RGB pixels."""

    magnification: str
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        if self.magnification not in MAGNIFICATIONS:
            raise InvalidSpecError(f"unknown magnification {self.magnification!r}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise DimensionMismatchError(
                f"level {self.magnification}: pixel buffer {self.pixels.shape} "
                f"does not match {self.height}x{self.width}x3"
            )
        if self.pixels.dtype != np.uint8:
            raise FormatError("level pixels must be uint8")


@dataclass(frozen=True)
class PyramidImage:
    """A three-level slide pyramid with slide and patient identity."""

    slide_id: str
    patient_id: str
    levels: tuple[Level, ...]

    def __post_init__(self):
        mags = tuple(lv.magnification for lv in self.levels)
        if mags != MAGNIFICATIONS:
            raise InvalidSpecError(f"levels must be ordered {MAGNIFICATIONS}, got {mags}")
        base = self.level("400x")
        for lv in self.levels:
            r = SCALE_FACTORS[lv.magnification]
            if lv.width * r != base.width or lv.height * r != base.height:
                raise DimensionMismatchError(
                    f"level {lv.magnification} is {lv.width}x{lv.height}, "
                    f"expected exact 1/{r} of {base.width}x{base.height}"
                )

    def level(self, magnification: str) -> Level:
        for lv in self.levels:
            if lv.magnification == magnification:
                return lv
        raise MissingLevelError(f"pyramid has no {magnification} level")

    @property
    def base_width(self) -> int:
        return self.level("400x").width

    @property
    def base_height(self) -> int:
        return self.level("400x").height


@dataclass(frozen=True)
class RegionAnnotation:
    """A labeled polygon on the 400x level."""

    slide_id: str
    patient_id: str
    label: str
    polygon: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise InvalidSpecError(f"unknown class label {self.label!r}")
        if len(self.polygon) < 3:
            raise InvalidSpecError("polygon needs at least 3 vertices")

    def bounding_box(self) -> tuple[int, int, int, int]:
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass(frozen=True)
class ClassTexture:
    """Per-class texture: flat color, pixel noise, optional long-period stripes.

    Stripes are a square wave along one axis ("x" gives vertical bands, "y"
    horizontal ones) with period longer than a tile, so a single 128-pixel
    base-level tile usually sits inside one band, where both members of a
    color-matched pair look identical. The pair members differ only in the
    stripe period, i.e. in how often band edges occur; that density is
    invisible from one base-level tile but plain in the wider field of view
    of a coarser level.
    """

    color: tuple[int, int, int]
    noise: int = 18
    stripe_period: int = 0
    stripe_amp: int = 0
    stripe_axis: str | None = None


DEFAULT_TEXTURES = {
    "urothelium": ClassTexture(color=(118, 86, 160)),
    "stroma": ClassTexture(color=(208, 162, 176), stripe_period=512, stripe_amp=34, stripe_axis="x"),
    "damaged": ClassTexture(color=(208, 162, 176), stripe_period=896, stripe_amp=34, stripe_axis="x"),
    "muscle": ClassTexture(color=(152, 44, 56), stripe_period=512, stripe_amp=34, stripe_axis="y"),
    "blood": ClassTexture(color=(152, 44, 56), stripe_period=896, stripe_amp=34, stripe_axis="y"),
    "background": ClassTexture(color=(243, 243, 246), noise=6),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the synthetic slide generator."""

    seed: int
    base_width: int
    base_height: int
    regions_per_class: int = 2
    textures: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    region_cell: int = 576
    slide_id: str | None = None
    patient_id: str | None = None

    def __post_init__(self):
        if self.base_width % 16 or self.base_height % 16:
            raise InvalidSpecError(
                f"base dimensions {self.base_width}x{self.base_height} must be divisible by 16"
            )
        if self.regions_per_class < 1:
            raise InvalidSpecError("regions_per_class must be >= 1")
        missing = [c for c in CLASS_NAMES if c not in self.textures]
        if missing:
            raise InvalidSpecError(f"textures missing for classes: {missing}")


def round_half_up_u8(values: np.ndarray) -> np.ndarray:
    """Quantize non-negative floats to uint8 with ties rounding up."""
    return np.floor(values + 0.5).astype(np.uint8)


def box_downsample(base: np.ndarray, factor: int) -> np.ndarray:
    """Exact factor x factor box-filter mean of an (H, W, 3) uint8 raster."""
    h, w = base.shape[:2]
    if h % factor or w % factor:
        raise DimensionMismatchError(f"{h}x{w} raster not divisible by {factor}")
    blocks = base.reshape(h // factor, factor, w // factor, factor, 3)
    means = blocks.astype(np.float64).mean(axis=(1, 3))
    return round_half_up_u8(means)


def _paint_texture(canvas: np.ndarray, x0, y0, x1, y1, tex: ClassTexture, rng) -> None:
    """Fill canvas[y0:y1, x0:x1] with the class texture, in place.

    Stripes are phased in absolute slide coordinates with a per-region random
    offset, so tile content never encodes absolute position.
    """
    h, w = y1 - y0, x1 - x0
    block = np.empty((h, w, 3), dtype=np.float64)
    block[:] = np.asarray(tex.color, dtype=np.float64)
    if tex.stripe_period > 0 and tex.stripe_amp > 0:
        phase = int(rng.integers(0, tex.stripe_period))
        if tex.stripe_axis == "x":
            coords = np.arange(x0, x1) + phase
        else:
            coords = np.arange(y0, y1) + phase
        # 50% duty square wave: +amp on the first half-period, -amp on the second.
        wave = np.where((coords % tex.stripe_period) * 2 < tex.stripe_period,
                        float(tex.stripe_amp), -float(tex.stripe_amp))
        if tex.stripe_axis == "x":
            block += wave[None, :, None]
        else:
            block += wave[:, None, None]
    if tex.noise > 0:
        block += rng.integers(-tex.noise, tex.noise + 1, size=(h, w, 3))
    np.clip(block, 0.0, 255.0, out=block)
    canvas[y0:y1, x0:x1] = round_half_up_u8(block)


def generate_synthetic(spec: SyntheticSpec) -> tuple[PyramidImage, list[RegionAnnotation]]:
    """Generate a deterministic synthetic slide pyramid plus annotations.

    The slide is partitioned into a grid of cells; each class receives
    ``regions_per_class`` rectangular regions placed in shuffled cells. The
    canvas outside foreground regions carries the background texture, and the
    background class is annotated on untouched cells like any other class.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0xD1CE])))
    w, h = spec.base_width, spec.base_height
    cell = spec.region_cell
    nx, ny = w // cell, h // cell
    needed = spec.regions_per_class * len(CLASS_NAMES)
    if nx * ny < needed:
        raise InvalidSpecError(
            f"slide {w}x{h} with cell {cell} has {nx * ny} region cells, needs {needed}"
        )

    slide_id = spec.slide_id or f"S{spec.seed & 0xFFFFFFFF:08x}"
    patient_id = spec.patient_id or f"P{spec.seed & 0xFFFFFFFF:08x}"

    canvas = np.empty((h, w, 3), dtype=np.uint8)
    _paint_texture(canvas, 0, 0, w, h, spec.textures["background"], rng)

    cells = [(cx, cy) for cy in range(ny) for cx in range(nx)]
    order = rng.permutation(len(cells))

    annotations: list[RegionAnnotation] = []
    slot = 0
    for label in CLASS_NAMES:
        tex = spec.textures[label]
        for _ in range(spec.regions_per_class):
            cx, cy = cells[order[slot]]
            slot += 1
            rw = int(rng.integers(int(0.70 * cell), int(0.95 * cell)))
            rh = int(rng.integers(int(0.70 * cell), int(0.95 * cell)))
            x0 = cx * cell + int(rng.integers(0, cell - rw + 1))
            y0 = cy * cell + int(rng.integers(0, cell - rh + 1))
            x1, y1 = x0 + rw, y0 + rh
            if label != "background":
                _paint_texture(canvas, x0, y0, x1, y1, tex, rng)
            polygon = ((x0, y0), (x1 - 1, y0), (x1 - 1, y1 - 1), (x0, y1 - 1))
            annotations.append(
                RegionAnnotation(slide_id=slide_id, patient_id=patient_id, label=label, polygon=polygon)
            )

    levels = (
        Level("25x", w // 16, h // 16, box_downsample(canvas, 16)),
        Level("100x", w // 4, h // 4, box_downsample(canvas, 4)),
        Level("400x", w, h, canvas),
    )
    pyramid = PyramidImage(slide_id=slide_id, patient_id=patient_id, levels=levels)
    return pyramid, annotations


def point_in_region(region: RegionAnnotation, x: int, y: int) -> bool:
    """Even-odd polygon membership; points on the boundary count as inside."""
    pts = region.polygon
    n = len(pts)
    # Boundary check first: exact for integer vertices.
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        if cross == 0 and min(x0, x1) <= x <= max(x0, x1) and min(y0, y1) <= y <= max(y0, y1):
            return True
    inside = False
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xi:
                inside = not inside
    return inside


# ---------------------------------------------------------------------------
# Disk formats: TSPX rasters + JSON manifest + one regions.txt per slide.
# ---------------------------------------------------------------------------

def _raster_path(directory: Path, magnification: str) -> Path:
    return directory / f"level_{magnification}.tspx"


def _write_raster(path: Path, level: Level) -> None:
    header = RASTER_MAGIC + struct.pack("<III", RASTER_VERSION, level.width, level.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(level.pixels.tobytes())


def _read_raster(path: Path, magnification: str) -> Level:
    if not path.exists():
        raise MissingLevelError(f"missing raster for level {magnification}: {path}")
    data = path.read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, width, height = struct.unpack_from("<III", data, 4)
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + width * height * 3
    if len(data) != expected:
        raise DimensionMismatchError(
            f"{path}: raster holds {len(data) - 16} bytes, header says {width}x{height}x3"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(height, width, 3)
    return Level(magnification, width, height, pixels.copy())


def save_pyramid(pyramid: PyramidImage, directory: str | Path) -> None:
    """Write manifest plus one raster file per level."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "slide_id": pyramid.slide_id,
        "patient_id": pyramid.patient_id,
        "levels": [
            {
                "magnification": lv.magnification,
                "width": lv.width,
                "height": lv.height,
                "filename": _raster_path(directory, lv.magnification).name,
            }
            for lv in pyramid.levels
        ],
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    for lv in pyramid.levels:
        _write_raster(_raster_path(directory, lv.magnification), lv)


def load_pyramid(directory: str | Path) -> PyramidImage:
    """Load a pyramid directory, validating dimensions and level ratios."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    by_mag = {entry["magnification"]: entry for entry in manifest["levels"]}
    levels = []
    for mag in MAGNIFICATIONS:
        if mag not in by_mag:
            raise MissingLevelError(f"manifest lists no {mag} level")
        entry = by_mag[mag]
        level = _read_raster(directory / entry["filename"], mag)
        if (level.width, level.height) != (entry["width"], entry["height"]):
            raise DimensionMismatchError(
                f"level {mag}: manifest says {entry['width']}x{entry['height']}, "
                f"raster is {level.width}x{level.height}"
            )
        levels.append(level)
    # PyramidImage.__post_init__ enforces the exact 4x chain.
    return PyramidImage(
        slide_id=manifest["slide_id"],
        patient_id=manifest["patient_id"],
        levels=tuple(levels),
    )


def save_annotations(annotations: list[RegionAnnotation], path: str | Path) -> None:
    """One region per line: label patient_id x0,y0 x1,y1 ..."""
    lines = []
    for ann in annotations:
        coords = " ".join(f"{x},{y}" for x, y in ann.polygon)
        lines.append(f"{ann.label} {ann.patient_id} {coords}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotations(path: str | Path, slide_id: str) -> list[RegionAnnotation]:
    annotations = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 5:
            raise FormatError(f"{path}:{lineno}: annotation line needs label, patient and >=3 vertices")
        label, patient_id = parts[0], parts[1]
        polygon = []
        for token in parts[2:]:
            xs, ys = token.split(",")
            polygon.append((int(xs), int(ys)))
        annotations.append(
            RegionAnnotation(slide_id=slide_id, patient_id=patient_id, label=label, polygon=tuple(polygon))
        )
    return annotations
