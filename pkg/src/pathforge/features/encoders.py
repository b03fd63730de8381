"""Encoder registry and the built-in deterministic stub encoders."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import DimMismatchError, EmptyStoreError, SizeMismatchError, UnknownEncoderError, ValidationError


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    kind: str  # "patch" | "slide"
    dim: int | None  # None: same as input (pooling encoders)
    provider: str  # "builtin_stub" | "external_process"
    expected_patch_size: int | None = None


class PatchEncoder:
    spec: EncoderSpec

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def dim(self) -> int:
        return self.spec.dim

    def _check(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        if patches.ndim != 4 or patches.shape[-1] != 3 or len(patches) == 0:
            raise SizeMismatchError(f"expected a non-empty (B, H, W, 3) batch, got {patches.shape}")
        ps = self.spec.expected_patch_size
        if ps is not None and patches.shape[1:3] != (ps, ps):
            raise SizeMismatchError(f"{self.name} expects {ps}x{ps} patches, got {patches.shape[1:3]}")
        return patches

    def encode(self, patches: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, patches):
        return self.encode(patches)

    def close(self) -> None:
        pass


# --------------------------------------------------------------------------
# stub-stats-64


def _stats64(patches: np.ndarray) -> np.ndarray:
    """Fixed 64-feature layout, all features in [0, 1].

    [0:12]   per channel: mean, std, skew proxy, edge energy
    [12:60]  per channel: 16-bin histogram of mean-centred intensities
    [60:64]  grey-level absolute differences: horizontal, vertical, diagonal,
             anti-diagonal
    """
    x = patches.astype(np.float64)
    b, h, w, _ = x.shape
    area = h * w
    flat = x.reshape(b, area, 3)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    median = np.median(flat, axis=1)
    dx = np.abs(np.diff(x, axis=2)).mean(axis=(1, 2)) if w > 1 else np.zeros((b, 3))
    dy = np.abs(np.diff(x, axis=1)).mean(axis=(1, 2)) if h > 1 else np.zeros((b, 3))

    moments = np.stack(
        [mean / 255.0, std / 127.5, 0.5 + (mean - median) / 510.0, (dx + dy) / 510.0], axis=2
    ).reshape(b, 12)

    centred = flat - mean[:, None, :]
    bins = np.clip(np.floor((centred + 128.0) / 16.0), 0, 15).astype(np.int64)
    hist = np.zeros((b, 3, 16))
    for c in range(3):
        idx = bins[:, :, c] + 16 * np.arange(b)[:, None]
        hist[:, c] = np.bincount(idx.ravel(), minlength=16 * b).reshape(b, 16)
    hist = (hist / area).reshape(b, 48)

    g = x.mean(axis=3)
    tex = np.zeros((b, 4))
    if w > 1:
        tex[:, 0] = np.abs(g[:, :, 1:] - g[:, :, :-1]).mean(axis=(1, 2))
    if h > 1:
        tex[:, 1] = np.abs(g[:, 1:, :] - g[:, :-1, :]).mean(axis=(1, 2))
    if h > 1 and w > 1:
        tex[:, 2] = np.abs(g[:, 1:, 1:] - g[:, :-1, :-1]).mean(axis=(1, 2))
        tex[:, 3] = np.abs(g[:, 1:, :-1] - g[:, :-1, 1:]).mean(axis=(1, 2))
    tex /= 255.0
    return np.concatenate([moments, hist, tex], axis=1)


class StatsEncoder(PatchEncoder):
    def __init__(self, patch_size: int | None = None):
        self.spec = EncoderSpec("stub-stats-64", "patch", 64, "builtin_stub", patch_size)

    def encode(self, patches):
        return _stats64(self._check(patches)).astype(np.float32)


class ProjectionEncoder(PatchEncoder):
    """8x8 average-pooled pixels through a fixed seeded projection and tanh."""

    def __init__(self, dim: int = 32, seed: int = 0, patch_size: int | None = None):
        self.spec = EncoderSpec(f"stub-proj-{dim}", "patch", dim, "builtin_stub", patch_size)
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((8 * 8 * 3, dim)) / np.sqrt(8 * 8 * 3)

    def encode(self, patches):
        p = self._check(patches).astype(np.float64) / 255.0
        b, h, w, _ = p.shape
        ys = (np.arange(h) * 8) // h
        xs = (np.arange(w) * 8) // w
        pooled = np.zeros((b, 8, 8, 3))
        np.add.at(pooled, (slice(None), ys[:, None], xs[None, :]), p)
        counts = np.bincount(ys, minlength=8)[:, None] * np.bincount(xs, minlength=8)[None, :]
        pooled /= counts[None, :, :, None]
        return np.tanh(pooled.reshape(b, -1) @ self._proj).astype(np.float32)


# --------------------------------------------------------------------------
# slide-level pooling


class MeanPoolEncoder:
    spec = EncoderSpec("mean-pool", "slide", None, "builtin_stub")

    @property
    def name(self):
        return self.spec.name

    def encode(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features)
        if features.ndim != 2 or len(features) == 0:
            raise EmptyStoreError("mean pooling needs at least one patch embedding")
        return features.mean(axis=0, dtype=np.float64)

    __call__ = encode

    def close(self) -> None:
        pass


def pool_slide(features, method: str = "mean") -> np.ndarray:
    """Pool a :class:`FeatureStore` (or bare matrix) into one slide vector."""
    matrix = getattr(features, "matrix", features)
    if method != "mean":
        raise ValidationError(f"unknown pooling method {method!r}")
    out = MeanPoolEncoder().encode(matrix)
    if not np.isfinite(out).all():
        raise ValidationError("pooled vector is not finite")
    return out


def aggregate_patient(slide_vectors, method: str = "mean") -> np.ndarray:
    """Patient vector as the mean of that patient's slide vectors."""
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in slide_vectors]
    if not vecs:
        raise EmptyStoreError("patient has no slide vectors")
    if len({v.shape for v in vecs}) != 1:
        raise DimMismatchError(f"slide vectors have differing dims: {sorted({len(v) for v in vecs})}")
    if method != "mean":
        raise ValidationError(f"unknown aggregation method {method!r}")
    return np.mean(vecs, axis=0)


# --------------------------------------------------------------------------
# registry

EXTERNAL_ENV = "PATHFORGE_EXTERNAL_ENCODERS"

_BUILTINS: dict[str, Callable[..., object]] = {
    "stub-stats-64": StatsEncoder,
    "stub-proj-32": lambda **kw: ProjectionEncoder(32, **kw),
    "mean-pool": lambda **kw: MeanPoolEncoder(),
}
_EXTERNAL: dict[str, dict] = {}


def register_external(name: str, command: list[str], patch_size: int | None = None, timeout: float = 60.0) -> None:
    """Make ``name`` resolve to an ENC1 child process started with ``command``."""
    if name in _BUILTINS:
        raise ValidationError(f"{name!r} is a built-in encoder")
    _EXTERNAL[name] = {"command": list(command), "patch_size": patch_size, "timeout": timeout}


def unregister_external(name: str) -> None:
    _EXTERNAL.pop(name, None)


def _env_external() -> dict[str, dict]:
    raw = os.environ.get(EXTERNAL_ENV)
    if not raw:
        return {}
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{EXTERNAL_ENV} is not valid JSON: {exc}") from exc
    return {k: v if isinstance(v, dict) else {"command": v} for k, v in cfg.items()}


def registered_names() -> list[str]:
    return sorted(set(_BUILTINS) | set(_EXTERNAL) | set(_env_external()))


def registry_get(name: str, **kwargs):
    """Instantiate the encoder registered as ``name``."""
    if name in _BUILTINS:
        return _BUILTINS[name](**kwargs)
    cfg = _EXTERNAL.get(name) or _env_external().get(name)
    if cfg is not None:
        from .protocol import ExternalEncoder

        return ExternalEncoder(
            name,
            cfg["command"],
            patch_size=cfg.get("patch_size"),
            timeout=cfg.get("timeout", 60.0),
            **kwargs,
        )
    raise UnknownEncoderError(
        f"unknown encoder {name!r}; registered: {', '.join(registered_names())}"
    )
