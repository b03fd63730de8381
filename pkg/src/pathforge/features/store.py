"""FSTR feature files: patch coordinates plus a float32 embedding matrix."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, IoFailure, TruncatedFileError, ValidationError, VersionMismatchError

FSTR_MAGIC = b"FSTR"
FSTR_VERSION = 1


@dataclass
class FeatureStore:
    slide_id: str
    encoder_name: str
    coords: np.ndarray  # (n, 2) int64, level-0 top-left
    matrix: np.ndarray  # (n, dim) float32
    grid: dict = field(default_factory=dict)  # echo of the patch grid header

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.coords):
            raise ValidationError(
                f"matrix {self.matrix.shape} does not align with {len(self.coords)} coords"
            )
        if not np.isfinite(self.matrix).all():
            raise ValidationError(f"{self.slide_id}: non-finite features")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.encoder_name == other.encoder_name
            and self.grid == other.grid
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.matrix, other.matrix)
        )

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "slide_id": self.slide_id,
                "encoder_name": self.encoder_name,
                "dim": self.dim,
                "count": len(self),
                "grid": self.grid,
            },
            sort_keys=True,
        ).encode()
        return (
            FSTR_MAGIC
            + struct.pack("<II", FSTR_VERSION, len(header))
            + header
            + self.coords.astype("<i8").tobytes()
            + self.matrix.astype("<f4").tobytes()
        )

    def save(self, path: str | os.PathLike) -> None:
        """Write atomically (temp file + rename) so readers never see partial files."""
        path = Path(path)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        try:
            tmp.write_bytes(self.to_bytes())
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> FeatureStore:
        data = Path(path).read_bytes()
        header, offset = _parse_header(data, path)
        n, dim = header["count"], header["dim"]
        coords = np.frombuffer(data, dtype="<i8", count=2 * n, offset=offset).reshape(n, 2)
        matrix = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset + 16 * n).reshape(n, dim)
        return cls(header["slide_id"], header["encoder_name"], coords, matrix, header.get("grid", {}))


def _parse_header(data: bytes, path) -> tuple[dict, int]:
    if data[:4] != FSTR_MAGIC:
        raise BadMagicError(f"{path}: not an FSTR file")
    if len(data) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != FSTR_VERSION:
        raise VersionMismatchError(f"{path}: FSTR version {version}, expected {FSTR_VERSION}")
    if 12 + header_len > len(data):
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(data[12 : 12 + header_len])
        n, dim = int(header["count"]), int(header["dim"])
    except (ValueError, KeyError) as exc:
        raise TruncatedFileError(f"{path}: unreadable header: {exc}") from exc
    offset = 12 + header_len
    if len(data) != offset + 16 * n + 4 * n * dim:
        raise TruncatedFileError(f"{path}: size does not match {n} x {dim} records")
    return header, offset


def is_valid_store(path: str | os.PathLike, encoder_name: str | None = None) -> bool:
    """Cheap resumability check: header parses and the file size matches it."""
    try:
        header, _ = _parse_header(Path(path).read_bytes(), path)
    except (OSError, BadMagicError, TruncatedFileError, VersionMismatchError):
        return False
    return encoder_name is None or header["encoder_name"] == encoder_name
