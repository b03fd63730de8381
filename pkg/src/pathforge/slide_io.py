"""Pyramidal slide container (SPYR), flat-PNG fallback, region reads and
magnification inference.

Images are handled as ``uint8`` numpy arrays of shape ``(height, width, 3)``.
"""

from __future__ import annotations

import json
import math
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadLevelError,
    BadMagicError,
    CorruptIndexError,
    InconsistentPyramidError,
    IoFailure,
    MissingFileError,
    UnknownMagnificationError,
    ValidationError,
    ZeroAreaError,
)

SPYR_MAGIC = b"SPYR"
SPYR_VERSION = 1
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
WHITE = 255

# objective power -> microns per pixel at level 0
MAG_TO_MPP = {80: 0.125, 40: 0.25, 20: 0.5, 10: 1.0, 5: 2.0}


@dataclass(frozen=True)
class LevelInfo:
    level: int
    width: int
    height: int
    downsample: float


@dataclass(frozen=True)
class MagInfo:
    mpp: float
    base_magnification: int
    source: str  # "metadata_mpp" | "metadata_objective" | "user_override"


def nearest_magnification(mpp: float) -> int:
    """Snap a microns-per-pixel value to the closest objective power (log-space)."""
    return min(MAG_TO_MPP, key=lambda m: (abs(math.log(mpp / MAG_TO_MPP[m])), m))


def _check_tile_size(tile_size: int) -> None:
    if tile_size < 64 or tile_size & (tile_size - 1):
        raise ValidationError(f"tile_size must be a power of two >= 64, got {tile_size}")


# --------------------------------------------------------------------------
# resampling kernels


def reduce2x(img: np.ndarray) -> np.ndarray:
    """2x2 block mean per channel, round-half-up; odd trailing row/column dropped."""
    h, w = img.shape[0] // 2, img.shape[1] // 2
    blocks = img[: 2 * h, : 2 * w].astype(np.uint32)
    s = blocks[0::2, 0::2] + blocks[0::2, 1::2] + blocks[1::2, 0::2] + blocks[1::2, 1::2]
    return ((s + 2) // 4).astype(np.uint8)


def _axis_weights(n_src: int, n_out: int) -> np.ndarray:
    """Row i holds the fraction of source pixel j covered by output pixel i."""
    f = n_src / n_out
    edges = np.arange(n_out + 1) * f
    lo, hi = edges[:-1, None], edges[1:, None]
    j = np.arange(n_src)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / f


def area_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Area-averaging resize with round-half-up.

    Integer shrink factors take an exact integer path, so a 2x reduction is
    identical to :func:`reduce2x`.
    """
    in_h, in_w = img.shape[:2]
    if (in_w, in_h) == (out_w, out_h):
        return img.copy()
    if in_w % out_w == 0 and in_h % out_h == 0:
        fx, fy = in_w // out_w, in_h // out_h
        blocks = img.astype(np.uint64).reshape(out_h, fy, out_w, fx, -1)
        s = blocks.sum(axis=(1, 3))
        n = fx * fy
        return ((s + n // 2) // n).astype(np.uint8)
    wy = _axis_weights(in_h, out_h)
    wx = _axis_weights(in_w, out_w)
    out = np.einsum("ij,jkc,lk->ilc", wy, img.astype(np.float64), wx)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# slide handle


@dataclass
class SlidePyramid:
    """Open slide handle; immutable after :func:`open_slide`.

    Tile reads use positioned I/O on a per-process descriptor, so one handle may
    be shared between threads. Pickled copies reopen the file lazily.
    """

    path: Path
    slide_id: str
    levels: list[LevelInfo]
    tile_size: int
    metadata: dict[str, str]
    mag_override: float | None = None
    _index: list[np.ndarray] = field(default_factory=list, repr=False)
    _fd: int | None = field(default=None, repr=False)
    _fd_pid: int | None = field(default=None, repr=False)
    _flat: np.ndarray | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def is_flat(self) -> bool:
        return not self._index

    @property
    def dimensions(self) -> tuple[int, int]:
        return self.levels[0].width, self.levels[0].height

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def downsamples(self) -> list[float]:
        return [lv.downsample for lv in self.levels]

    def __getstate__(self):
        state = self.__dict__.copy()
        state.update(_fd=None, _fd_pid=None, _flat=None, _lock=None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _descriptor(self) -> int:
        pid = os.getpid()
        with self._lock:
            if self._fd is None or self._fd_pid != pid:
                self._fd = os.open(self.path, os.O_RDONLY)
                self._fd_pid = pid
            return self._fd

    def close(self) -> None:
        with self._lock:
            if self._fd is not None and self._fd_pid == os.getpid():
                os.close(self._fd)
            self._fd = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _flat_pixels(self) -> np.ndarray:
        with self._lock:
            if self._flat is None:
                with Image.open(self.path) as im:
                    self._flat = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return self._flat

    def read_tile(self, level: int, col: int, row: int) -> np.ndarray:
        lv = self.levels[level]
        ts = self.tile_size
        n_cols = -(-lv.width // ts)
        offset, length = self._index[level][row * n_cols + col]
        blob = os.pread(self._descriptor(), int(length), int(offset))
        if len(blob) != length:
            raise CorruptIndexError(f"{self.path}: short read for tile {level}/{col},{row}")
        try:
            raw = zlib.decompress(blob)
        except zlib.error as exc:
            raise CorruptIndexError(f"{self.path}: tile {level}/{col},{row}: {exc}") from exc
        if len(raw) != ts * ts * 3:
            raise CorruptIndexError(
                f"{self.path}: tile {level}/{col},{row} decodes to {len(raw)} bytes"
            )
        return np.frombuffer(raw, dtype=np.uint8).reshape(ts, ts, 3)

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        return read_region(self, level, x, y, w, h)


# --------------------------------------------------------------------------
# container I/O


def _downsample(l0: tuple[int, int], w: int, h: int) -> float:
    return (l0[0] / w + l0[1] / h) / 2.0


def _build_levels(dims: list[tuple[int, int]]) -> list[LevelInfo]:
    if not dims:
        raise InconsistentPyramidError("pyramid has no levels")
    for i, (w, h) in enumerate(dims):
        if w < 1 or h < 1:
            raise InconsistentPyramidError(f"level {i} has non-positive size {w}x{h}")
        if i:
            pw, ph = dims[i - 1]
            if w > -(-pw // 2) + 1 or h > -(-ph // 2) + 1:
                raise InconsistentPyramidError(
                    f"level {i} ({w}x{h}) is not a near-dyadic reduction of {pw}x{ph}"
                )
    levels = [LevelInfo(i, w, h, _downsample(dims[0], w, h)) for i, (w, h) in enumerate(dims)]
    for a, b in zip(levels, levels[1:]):
        if not b.downsample > a.downsample:
            raise InconsistentPyramidError("downsamples must be strictly increasing")
    return levels


def write_pyramid(
    image: np.ndarray,
    path: str | os.PathLike,
    tile_size: int = 256,
    n_levels: int = 1,
    metadata: dict | None = None,
    slide_id: str | None = None,
    compress_level: int = 6,
) -> int:
    """Write ``image`` as an SPYR container and return the number of levels written.

    Levels stop early once a further 2x reduction would drop below one pixel.
    """
    _check_tile_size(tile_size)
    if n_levels < 1:
        raise ValidationError("n_levels must be >= 1")
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    path = Path(path)

    pyramid = [image]
    while len(pyramid) < n_levels:
        prev = pyramid[-1]
        if prev.shape[0] < 2 or prev.shape[1] < 2:
            break
        pyramid.append(reduce2x(prev))

    ts = tile_size
    blobs: list[list[bytes]] = []
    for lvl in pyramid:
        h, w = lvl.shape[:2]
        rows, cols = -(-h // ts), -(-w // ts)
        padded = np.full((rows * ts, cols * ts, 3), WHITE, dtype=np.uint8)
        padded[:h, :w] = lvl
        blobs.append(
            [
                zlib.compress(padded[r * ts : (r + 1) * ts, c * ts : (c + 1) * ts].tobytes(), compress_level)
                for r in range(rows)
                for c in range(cols)
            ]
        )

    header = json.dumps(
        {
            "slide_id": slide_id if slide_id is not None else path.stem,
            "tile_size": ts,
            "levels": [{"w": int(lv.shape[1]), "h": int(lv.shape[0])} for lv in pyramid],
            "metadata": {str(k): str(v) for k, v in (metadata or {}).items()},
        },
        sort_keys=True,
    ).encode()
    n_tiles = sum(len(b) for b in blobs)
    offset = 12 + len(header) + 16 * n_tiles
    index = bytearray()
    for level_blobs in blobs:
        for blob in level_blobs:
            index += struct.pack("<QQ", offset, len(blob))
            offset += len(blob)

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(SPYR_MAGIC + struct.pack("<II", SPYR_VERSION, len(header)))
            fh.write(header)
            fh.write(index)
            for level_blobs in blobs:
                for blob in level_blobs:
                    fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return len(pyramid)


def _sidecar_for(path: Path) -> Path | None:
    for cand in (path.with_suffix(".meta.json"), path.with_name(path.name + ".meta.json")):
        if cand.exists():
            return cand
    return None


def _open_flat(path: Path, mag_override: float | None) -> SlidePyramid:
    with Image.open(path) as im:
        w, h = im.size
    metadata: dict[str, str] = {}
    sidecar = _sidecar_for(path)
    if sidecar is not None:
        try:
            raw = json.loads(sidecar.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad sidecar {sidecar}: {exc}") from exc
        metadata = {str(k): str(v) for k, v in raw.items()}
    return SlidePyramid(
        path=path,
        slide_id=path.stem,
        levels=[LevelInfo(0, w, h, 1.0)],
        tile_size=max(64, 1 << max(w, h, 1).bit_length()),
        metadata=metadata,
        mag_override=mag_override,
    )


def open_slide(path: str | os.PathLike, mag_override: float | None = None) -> SlidePyramid:
    """Open an SPYR container or a flat PNG (with optional ``<stem>.meta.json``)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such slide: {path}")
    if mag_override is not None and not mag_override > 0:
        raise ValidationError(f"mag_override must be a positive mpp, got {mag_override}")
    file_size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(12)
        if head[:8] == PNG_SIGNATURE:
            return _open_flat(path, mag_override)
        if head[:4] != SPYR_MAGIC:
            raise BadMagicError(f"{path}: not an SPYR container or PNG")
        if len(head) < 12:
            raise CorruptIndexError(f"{path}: truncated header")
        version, header_len = struct.unpack("<II", head[4:12])
        if version != SPYR_VERSION:
            raise BadMagicError(f"{path}: unsupported SPYR version {version}")
        if 12 + header_len > file_size:
            raise CorruptIndexError(f"{path}: header runs past end of file")
        try:
            header = json.loads(fh.read(header_len))
            ts = int(header["tile_size"])
            dims = [(int(lv["w"]), int(lv["h"])) for lv in header["levels"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptIndexError(f"{path}: unreadable header: {exc}") from exc
        _check_tile_size(ts)
        levels = _build_levels(dims)
        counts = [-(-w // ts) * -(-h // ts) for w, h in dims]
        index_bytes = fh.read(16 * sum(counts))
    if len(index_bytes) != 16 * sum(counts):
        raise CorruptIndexError(f"{path}: tile index truncated")
    flat_index = np.frombuffer(index_bytes, dtype="<u8").reshape(-1, 2)
    data_start = 12 + header_len + len(index_bytes)
    ends = flat_index[:, 0] + flat_index[:, 1]
    if flat_index.size and (
        (flat_index[:, 0] < data_start).any() or (ends > file_size).any() or (ends < flat_index[:, 0]).any()
    ):
        raise CorruptIndexError(f"{path}: tile offsets out of bounds")
    split = np.cumsum(counts)[:-1]
    return SlidePyramid(
        path=path,
        slide_id=str(header.get("slide_id", path.stem)),
        levels=levels,
        tile_size=ts,
        metadata={str(k): str(v) for k, v in header.get("metadata", {}).items()},
        mag_override=mag_override,
        _index=np.split(flat_index, split),
    )


def read_region(slide: SlidePyramid, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Read a ``w x h`` region at ``level`` whose top-left is ``(x, y)`` in level-0 pixels.

    Pixels outside the level are white.
    """
    if not 0 <= level < len(slide.levels):
        raise BadLevelError(f"level {level} not in [0, {len(slide.levels)})")
    if w <= 0 or h <= 0:
        raise ZeroAreaError(f"region {w}x{h} has no area")
    lv = slide.levels[level]
    lx = int(math.floor(x / lv.downsample))
    ly = int(math.floor(y / lv.downsample))
    out = np.full((h, w, 3), WHITE, dtype=np.uint8)
    x0, y0 = max(lx, 0), max(ly, 0)
    x1, y1 = min(lx + w, lv.width), min(ly + h, lv.height)
    if x0 >= x1 or y0 >= y1:
        return out

    if slide.is_flat:
        out[y0 - ly : y1 - ly, x0 - lx : x1 - lx] = slide._flat_pixels()[y0:y1, x0:x1]
        return out

    ts = slide.tile_size
    for row in range(y0 // ts, (y1 - 1) // ts + 1):
        for col in range(x0 // ts, (x1 - 1) // ts + 1):
            tile = slide.read_tile(level, col, row)
            tx0, ty0 = max(x0, col * ts), max(y0, row * ts)
            tx1, ty1 = min(x1, (col + 1) * ts), min(y1, (row + 1) * ts)
            out[ty0 - ly : ty1 - ly, tx0 - lx : tx1 - lx] = tile[
                ty0 - row * ts : ty1 - row * ts, tx0 - col * ts : tx1 - col * ts
            ]
    return out


def read_level(slide: SlidePyramid, level: int) -> np.ndarray:
    lv = slide.levels[level]
    return read_region(slide, level, 0, 0, lv.width, lv.height)


def infer_magnification(slide: SlidePyramid, mag_override: float | None = None) -> MagInfo:
    """Resolve level-0 resolution: explicit override, then metadata mpp, then
    metadata objective power."""
    override = mag_override if mag_override is not None else slide.mag_override
    if override is not None:
        if not override > 0:
            raise ValidationError(f"mpp override must be positive, got {override}")
        return MagInfo(float(override), nearest_magnification(override), "user_override")

    md = slide.metadata
    try:
        mpp_x = float(md["mpp_x"])
        mpp = (mpp_x + float(md["mpp_y"])) / 2 if "mpp_y" in md else mpp_x
        if math.isfinite(mpp) and mpp > 0:
            return MagInfo(mpp, nearest_magnification(mpp), "metadata_mpp")
    except (KeyError, ValueError):
        pass

    try:
        power = float(md["objective_power"])
        if math.isfinite(power) and power > 0:
            mag = min(MAG_TO_MPP, key=lambda m: (abs(math.log(power / m)), m))
            return MagInfo(MAG_TO_MPP[mag], mag, "metadata_objective")
    except (KeyError, ValueError):
        pass

    raise UnknownMagnificationError(
        f"{slide.slide_id}: no mpp or objective power in metadata; pass an mpp override"
    )


def thumbnail_geometry(slide: SlidePyramid, max_dim: int = 1024) -> tuple[int, int, int, float]:
    """Return ``(source_level, thumb_w, thumb_h, scale)`` without reading pixels."""
    if max_dim < 64:
        raise ValidationError("max_dim must be >= 64")
    qualifying = [lv for lv in slide.levels if max(lv.width, lv.height) >= max_dim]
    if not qualifying:
        lv = slide.levels[0]
        return 0, lv.width, lv.height, 1.0
    lv = qualifying[-1]
    if lv.width >= lv.height:
        tw, th = max_dim, max(1, int(math.floor(lv.height * max_dim / lv.width + 0.5)))
    else:
        tw, th = max(1, int(math.floor(lv.width * max_dim / lv.height + 0.5))), max_dim
    return lv.level, tw, th, slide.levels[0].width / tw


def build_thumbnail(slide: SlidePyramid, max_dim: int = 1024) -> tuple[np.ndarray, float]:
    """Return ``(thumbnail, scale)`` with ``scale = level0_width / thumb_width``.

    The source is the lowest-resolution level still at least ``max_dim`` on its
    long side; slides smaller than ``max_dim`` come back as-is.
    """
    level, tw, th, scale = thumbnail_geometry(slide, max_dim)
    return area_resize(read_level(slide, level), tw, th), scale
