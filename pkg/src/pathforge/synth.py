"""Synthetic slides and cohorts with known answers.

Blob slides pair a rendered image with its ground-truth tissue mask. Cohort
slides additionally carry a class signal: inside a seeded fraction of
patch-sized cells the stain colour shifts and a stripe texture appears, with
strength growing with the class index.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .slide_io import write_pyramid
from .task_splits import SplitTable, TaskSpec, make_task, write_task

BACKGROUND = np.array([243.0, 242.0, 244.0])
STAIN = np.array([208.0, 128.0, 178.0])
CLASS_SHIFT = np.array([-28.0, 8.0, 18.0])


def blob_mask(
    height: int,
    width: int,
    rng: np.random.Generator,
    n_blobs: int | None = None,
    radius_range: tuple[float, float] = (0.12, 0.25),
) -> np.ndarray:
    """Union of a few ellipses with wavy boundaries, kept off the slide border."""
    n_blobs = int(rng.integers(1, 4)) if n_blobs is None else n_blobs
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    mask = np.zeros((height, width), dtype=bool)
    short = min(height, width)
    for _ in range(n_blobs):
        cy = rng.uniform(0.3, 0.7) * height
        cx = rng.uniform(0.25, 0.75) * width
        ry = rng.uniform(*radius_range) * short
        rx = rng.uniform(*radius_range) * short
        rot = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(rot) + dy * np.sin(rot)) / rx
        v = (-dx * np.sin(rot) + dy * np.cos(rot)) / ry
        theta = np.arctan2(v, u)
        wobble = 1.0
        for k in (3, 5):
            wobble = wobble + rng.uniform(0.02, 0.08) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        mask |= np.hypot(u, v) <= wobble
    return mask


def render_slide(
    mask: np.ndarray,
    rng: np.random.Generator,
    *,
    signal_cells: np.ndarray | None = None,
    cell: int = 512,
    strength: float = 0.0,
    stain_jitter: float = 5.0,
) -> np.ndarray:
    """RGB image for ``mask``; ``signal_cells`` marks cells carrying the class shift."""
    h, w = mask.shape
    stain = STAIN + rng.normal(0, stain_jitter, 3)
    img = np.empty((h, w, 3), dtype=np.float64)
    img[...] = BACKGROUND
    img += rng.normal(0, 2.0, (h, w, 3))
    tissue = stain + rng.normal(0, 10.0, (h, w, 3))
    if signal_cells is not None and strength > 0:
        cy, cx = np.nonzero(signal_cells)
        stripes = 12.0 * strength * np.sign(np.sin(np.arange(w) * np.pi / 2.0))
        for y, x in zip(cy, cx):
            ys, xs = slice(y * cell, (y + 1) * cell), slice(x * cell, (x + 1) * cell)
            tissue[ys, xs] += strength * CLASS_SHIFT
            tissue[ys, xs] += stripes[xs][None, :, None]
    img[mask] = tissue[mask]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_blob_slide(
    path: str | os.PathLike,
    seed: int,
    size: tuple[int, int] = (2048, 1536),
    tile_size: int = 256,
    n_levels: int = 4,
    mpp: float = 0.25,
) -> np.ndarray:
    """Write a blob slide to ``path`` and return its level-0 ground-truth mask."""
    rng = np.random.default_rng(seed)
    width, height = size
    mask = blob_mask(height, width, rng)
    image = render_slide(mask, rng)
    write_pyramid(image, path, tile_size, n_levels, {"mpp_x": mpp, "mpp_y": mpp}, compress_level=1)
    return mask


@dataclass
class SynthCohort:
    root: Path
    slide_paths: list[Path]
    labels: dict[str, str]
    spec: TaskSpec
    table: SplitTable
    task_csv: Path
    task_yaml: Path


def synth_cohort(
    out_dir: str | os.PathLike,
    n_slides: int = 20,
    n_classes: int = 2,
    seed: int = 7,
    *,
    size: tuple[int, int] = (1024, 768),
    cell: int = 256,
    signal_fraction: float = 0.6,
    min_cover: float = 0.25,
    n_folds: int = 5,
    tile_size: int = 256,
    task_id: str = "synth",
) -> SynthCohort:
    """Write ``n_slides`` 20x pyramids (one per patient), ground-truth masks and
    a k-fold task under ``out_dir``.

    Slide ``i`` belongs to class ``i % n_classes``; class ``c`` applies the
    colour/texture shift with strength ``c`` to ``signal_fraction`` (at least
    one) of the cells on the ``cell``-pixel lattice whose tissue cover reaches
    ``min_cover``.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    root = Path(out_dir)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    seq = np.random.SeedSequence(seed)
    width, height = size
    paths, labels = [], {}
    for i, child in enumerate(seq.spawn(n_slides)):
        rng = np.random.default_rng(child)
        slide_id = f"slide_{i:03d}"
        cls = i % n_classes
        mask = blob_mask(height, width, rng, radius_range=(0.25, 0.4))
        ny, nx = height // cell, width // cell
        coverage = mask[: ny * cell, : nx * cell].reshape(ny, cell, nx, cell).mean(axis=(1, 3))
        covered = coverage >= min_cover if (coverage >= min_cover).any() else coverage > 0
        signal = np.zeros_like(covered)
        cells = np.flatnonzero(covered)
        n_signal = max(1, int(round(signal_fraction * len(cells)))) if len(cells) else 0
        signal.flat[rng.choice(cells, size=n_signal, replace=False)] = True
        image = render_slide(mask, rng, signal_cells=signal, cell=cell, strength=float(cls))
        path = root / "slides" / f"{slide_id}.spyr"
        meta = {"mpp_x": 0.5, "mpp_y": 0.5, "objective_power": 20}
        write_pyramid(image, path, tile_size, 3, meta, slide_id=slide_id, compress_level=1)
        Image.fromarray(mask.astype(np.uint8) * 255).save(root / "masks" / f"{slide_id}.png")
        paths.append(path)
        labels[slide_id] = f"class_{cls}"
    spec, table = make_task(task_id, labels, label_kind="categorical", n_folds=n_folds, seed=seed)
    csv_path, yaml_path = root / f"{task_id}.csv", root / f"{task_id}.yaml"
    write_task(spec, table, csv_path, yaml_path)
    return SynthCohort(root, paths, labels, spec, table, csv_path, yaml_path)
