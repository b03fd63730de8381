"""Patch coordinate planning and the PGRD coordinate file.

Only coordinates are stored; pixels are read on demand by :func:`load_patch`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadIndexError,
    BadMagicError,
    IoFailure,
    MagnificationUnavailableError,
    NoPatchesError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .slide_io import MagInfo, SlidePyramid, area_resize, read_region
from .tissue_seg import TissueMask, tissue_fraction_grid

PGRD_MAGIC = b"PGRD"
PGRD_VERSION = 1
# absorbs float noise in coverage sums so exact-threshold cells are kept
FRACTION_EPS = 1e-9


@dataclass(frozen=True)
class PatchParams:
    patch_size: int = 256
    target_magnification: float = 20
    overlap: int = 0
    min_tissue_frac: float = 0.25

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ValidationError("patch_size must be positive")
        if not 0 <= self.overlap < self.patch_size:
            raise ValidationError("overlap must satisfy 0 <= overlap < patch_size")
        if not 0 <= self.min_tissue_frac <= 1:
            raise ValidationError("min_tissue_frac must lie in [0, 1]")
        if not self.target_magnification > 0:
            raise ValidationError("target_magnification must be positive")


@dataclass
class PatchGrid:
    slide_id: str
    params: PatchParams
    level0_patch_extent: int
    step: int
    read_level: int
    resize_factor: float
    coords: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, PatchGrid):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.params == other.params
            and self.level0_patch_extent == other.level0_patch_extent
            and self.step == other.step
            and self.read_level == other.read_level
            and self.resize_factor == other.resize_factor
            and np.array_equal(self.coords, other.coords)
        )

    def header(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "params": asdict(self.params),
            "level0_patch_extent": self.level0_patch_extent,
            "step": self.step,
            "read_level": self.read_level,
            "resize_factor": self.resize_factor,
            "count": len(self.coords),
        }


def lattice(level0_size: tuple[int, int], extent: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Lattice origins anchored at (0, 0) whose patches fit inside the slide."""
    w, h = level0_size
    return np.arange(0, w - extent + 1, step), np.arange(0, h - extent + 1, step)


def plan_grid(slide: SlidePyramid, mask: TissueMask, mag: MagInfo, params: PatchParams = PatchParams()) -> PatchGrid:
    ratio = mag.base_magnification / params.target_magnification
    if ratio < 1:
        raise MagnificationUnavailableError(
            f"target {params.target_magnification}x exceeds base {mag.base_magnification}x"
        )
    extent = int(round(params.patch_size * ratio))
    step = int(round((params.patch_size - params.overlap) * ratio))

    read_level = 0
    for lv in slide.levels:
        if lv.downsample <= ratio * (1 + 1e-9):
            read_level = lv.level
    resize_factor = ratio / slide.levels[read_level].downsample

    xs, ys = lattice(slide.dimensions, extent, step)
    coords = np.zeros((0, 2), dtype=np.int64)
    if len(xs) and len(ys):
        frac = tissue_fraction_grid(mask, xs, ys, extent)
        iy, ix = np.nonzero(frac >= params.min_tissue_frac - FRACTION_EPS)
        coords = np.stack([xs[ix], ys[iy]], axis=1).astype(np.int64)
    if not len(coords):
        raise NoPatchesError(f"{slide.slide_id}: no patch reaches {params.min_tissue_frac:.0%} tissue")
    return PatchGrid(slide.slide_id, params, extent, step, read_level, resize_factor, coords)


def load_patch(slide: SlidePyramid, grid: PatchGrid, index: int) -> np.ndarray:
    """Read patch ``index`` and area-resize it to ``patch_size`` squared."""
    if not 0 <= index < len(grid.coords):
        raise BadIndexError(f"patch index {index} out of range [0, {len(grid.coords)})")
    x, y = (int(v) for v in grid.coords[index])
    ds = slide.levels[grid.read_level].downsample
    size = max(1, int(round(grid.level0_patch_extent / ds)))
    region = read_region(slide, grid.read_level, x, y, size, size)
    ps = grid.params.patch_size
    return area_resize(region, ps, ps)


def save_grid(grid: PatchGrid, path: str | os.PathLike) -> None:
    if not len(grid.coords):
        raise NoPatchesError("refusing to save a grid without coordinates")
    coords = np.asarray(grid.coords, dtype="<i8")
    keys = [tuple(c) for c in coords.tolist()]
    if keys != sorted(set((x, y) for x, y in keys), key=lambda c: (c[1], c[0])):
        raise ValidationError("grid coordinates must be unique and row-major sorted")
    header = json.dumps(grid.header(), sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(PGRD_MAGIC + struct.pack("<II", PGRD_VERSION, len(header)))
            fh.write(header)
            fh.write(coords.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_grid(path: str | os.PathLike) -> PatchGrid:
    data = Path(path).read_bytes()
    if data[:4] != PGRD_MAGIC:
        raise BadMagicError(f"{path}: not a PGRD file")
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != PGRD_VERSION:
        raise VersionMismatchError(f"{path}: PGRD version {version}, expected {PGRD_VERSION}")
    if 12 + header_len > len(data):
        raise TruncatedFileError(f"{path}: header truncated")
    header = json.loads(data[12 : 12 + header_len])
    body = data[12 + header_len :]
    count = int(header["count"])
    if len(body) != 16 * count:
        raise TruncatedFileError(f"{path}: expected {count} records, found {len(body) / 16:g}")
    coords = np.frombuffer(body, dtype="<i8").reshape(count, 2).astype(np.int64)
    return PatchGrid(
        slide_id=header["slide_id"],
        params=PatchParams(**header["params"]),
        level0_patch_extent=int(header["level0_patch_extent"]),
        step=int(header["step"]),
        read_level=int(header["read_level"]),
        resize_factor=float(header["resize_factor"]),
        coords=coords,
    )
