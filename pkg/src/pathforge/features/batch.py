"""Resumable batch feature extraction over many slides."""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import PathforgeError
from ..patch_grid import PatchParams, load_patch, plan_grid, save_grid
from ..slide_io import infer_magnification, open_slide
from ..tissue_seg import SegParams, export_geojson, import_geojson, mask_to_polygons, segment_tissue
from .encoders import registry_get
from .store import FeatureStore, is_valid_store

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchPipeline:
    out_dir: str
    encoder: str = "stub-stats-64"
    seg: SegParams = SegParams()
    patch: PatchParams = PatchParams()
    mag_override: float | None = None
    batch_size: int = 32
    skip_existing: bool = True
    save_grids: bool = True
    # directory of <slide stem>.geojson outlines that replace the pipeline mask
    geojson_dir: str | None = None

    def feature_path(self, slide_path) -> Path:
        return Path(self.out_dir) / "features" / f"{Path(slide_path).stem}.fstr"


@dataclass
class BatchReport:
    status: dict[str, str] = field(default_factory=dict)
    reasons: dict[str, str] = field(default_factory=dict)
    n_patches: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, slide: str, status: str, reason: str = "", n_patches: int = 0) -> None:
        with self._lock:
            self.status[slide] = status
            if reason:
                self.reasons[slide] = reason
            self.n_patches[slide] = n_patches

    @property
    def counts(self) -> dict[str, int]:
        out = {"done": 0, "skipped_existing": 0, "failed": 0}
        for s in self.status.values():
            out[s] += 1
        return out

    @property
    def total(self) -> int:
        return len(self.status)


# one encoder per worker process, reused across slides
_ENCODERS: dict[tuple, object] = {}


def _encoder(name: str, patch_size: int):
    key = (os.getpid(), name, patch_size)
    if key not in _ENCODERS:
        try:
            _ENCODERS[key] = registry_get(name, patch_size=patch_size)
        except TypeError:
            _ENCODERS[key] = registry_get(name)
    return _ENCODERS[key]


def extract_slide(slide_path: str, pipeline: BatchPipeline) -> tuple[str, str, int]:
    """Segment, plan and encode one slide. Returns ``(status, reason, n_patches)``."""
    out = pipeline.feature_path(slide_path)
    if pipeline.skip_existing and is_valid_store(out, pipeline.encoder):
        return "skipped_existing", "", 0
    try:
        slide = open_slide(slide_path, pipeline.mag_override)
        mag = infer_magnification(slide)
        outline = Path(pipeline.geojson_dir or "") / f"{Path(slide_path).stem}.geojson"
        if pipeline.geojson_dir and outline.exists():
            mask = import_geojson(outline, slide, thumb_max_dim=pipeline.seg.thumb_max_dim)
        else:
            mask = segment_tissue(slide, pipeline.seg)
        grid = plan_grid(slide, mask, mag, pipeline.patch)
        encoder = _encoder(pipeline.encoder, pipeline.patch.patch_size)
        rows = []
        for start in range(0, len(grid), pipeline.batch_size):
            idx = range(start, min(start + pipeline.batch_size, len(grid)))
            rows.append(encoder.encode(np.stack([load_patch(slide, grid, i) for i in idx])))
        store = FeatureStore(slide.slide_id, pipeline.encoder, grid.coords, np.concatenate(rows), grid.header())
        out.parent.mkdir(parents=True, exist_ok=True)
        if pipeline.save_grids:
            grid_dir = Path(pipeline.out_dir) / "patches"
            grid_dir.mkdir(parents=True, exist_ok=True)
            save_grid(grid, grid_dir / f"{Path(slide_path).stem}.pgrd")
            if mask.source != "external":
                export_geojson(mask_to_polygons(mask), grid_dir / f"{Path(slide_path).stem}.geojson")
        store.save(out)
        slide.close()
        return "done", "", len(grid)
    except (PathforgeError, OSError, ValueError) as exc:
        return "failed", f"{type(exc).__name__}: {exc}", 0


def run_batch(slides, pipeline: BatchPipeline, workers: int = 1) -> BatchReport:
    """Extract features for every slide; one slide's failure never stops the batch.

    With ``workers > 1`` slides are spread over a process pool; outputs do not
    depend on the worker count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    Path(pipeline.out_dir).mkdir(parents=True, exist_ok=True)
    slides = [str(s) for s in slides]
    report = BatchReport()
    t0 = time.perf_counter()
    if workers == 1:
        for s in slides:
            report.record(s, *extract_slide(s, pipeline))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(extract_slide, s, pipeline): s for s in slides}
            for fut in as_completed(futures):
                s = futures[fut]
                try:
                    report.record(s, *fut.result())
                except Exception as exc:  # worker crashed outright
                    report.record(s, "failed", f"{type(exc).__name__}: {exc}")
    report.wall_time = time.perf_counter() - t0
    for s, reason in report.reasons.items():
        log.warning("%s failed: %s", s, reason)
    return report

