"""Certainty fusion of collocated mask streams and cloud-filter restoration."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .context import BinaryMask
from .raster import GridGeometry, collocate_grid

DEFAULT_CF_THRESHOLD = 0.2
DEFAULT_TIME_WINDOW = 3600.0


@dataclass(frozen=True, eq=False)
class StreamMask:
    geometry: GridGeometry
    mask: np.ndarray  # (H, W) {0, 1}
    valid: np.ndarray  # (H, W) bool
    scores: np.ndarray | None = None  # (H, W) in [0, 1]
    weight: float = 1.0
    timestamp: float = 0.0
    sensor_id: str = ""

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("stream weight must be positive")
        if np.shape(self.mask) != self.geometry.shape or np.shape(self.valid) != self.geometry.shape:
            raise ValueError("stream grids do not match their geometry")
        if self.scores is not None:
            if np.shape(self.scores) != self.geometry.shape:
                raise ValueError("stream scores do not match their geometry")
            if not np.all((self.scores >= 0) & (self.scores <= 1)):
                raise ValueError("stream scores must lie in [0, 1]")

    @property
    def quality(self) -> np.ndarray:
        q = self.mask if self.scores is None else self.scores
        return np.asarray(q, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class CertaintyMask:
    geometry: GridGeometry
    certainty: np.ndarray  # (H, W) float64 in [0, 1], 0 where invalid
    count: np.ndarray  # (H, W) contributing streams

    @property
    def valid(self) -> np.ndarray:
        return self.count > 0


@dataclass(frozen=True, eq=False)
class RetrievalGrid:
    values: np.ndarray
    cloud_fraction: np.ndarray
    valid: np.ndarray


def fuse(streams: list[StreamMask], target: GridGeometry, target_time: float | None = None,
         time_window: float = DEFAULT_TIME_WINDOW) -> CertaintyMask:
    """Weighted mean of collocated stream scores on the target grid.

    Per-pixel sums use ``math.fsum`` over the contributing streams, so the
    result does not depend on stream order.
    """
    if not streams:
        raise ValueError("fuse needs at least one stream")
    if target_time is not None:
        streams = [s for s in streams if abs(s.timestamp - target_time) <= time_window]
        if not streams:
            raise ValueError(f"no stream within {time_window}s of the target time")
    h, w = target.shape
    qualities = np.full((len(streams), h, w), np.nan)
    for i, s in enumerate(streams):
        index = collocate_grid(s.geometry, target, s.valid)
        covered = index >= 0
        qualities[i][covered] = s.quality.ravel()[index[covered]]
    weights = np.array([s.weight for s in streams])
    present = ~np.isnan(qualities)
    count = present.sum(axis=0)
    certainty = np.zeros((h, w))
    for r, c in zip(*np.nonzero(count)):
        keep = present[:, r, c]
        q, wt = qualities[keep, r, c], weights[keep]
        value = math.fsum(wt * q) / math.fsum(wt)
        # rounding can step outside the hull of the inputs; clamp back
        certainty[r, c] = min(max(value, q.min()), q.max())
    if not count.any():
        warnings.warn("no stream overlaps the target grid", RuntimeWarning)
    return CertaintyMask(target, certainty, count)


def binarize(cert: CertaintyMask, threshold: float) -> BinaryMask:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return BinaryMask(cert.certainty >= threshold, cert.valid, target="fused")


def restore_retrievals(ret: RetrievalGrid, smoke: BinaryMask,
                       cf_threshold: float = DEFAULT_CF_THRESHOLD) -> RetrievalGrid:
    """Keep retrievals passing the cloud-fraction filter or lying under the smoke mask."""
    if ret.values.shape != smoke.shape or ret.cloud_fraction.shape != smoke.shape:
        raise ValueError("retrieval grid and smoke mask differ in shape")
    keep = ret.valid & ((ret.cloud_fraction <= cf_threshold) | (smoke.foreground & smoke.valid))
    return RetrievalGrid(ret.values, ret.cloud_fraction, keep)
