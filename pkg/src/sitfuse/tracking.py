"""Connected-component instances, shape descriptors and greedy IoU tracking."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .context import BinaryMask

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True, eq=False)
class Instance:
    instance_id: int
    runs: np.ndarray  # (n, 3) rows of (row, col_start, col_stop)
    area: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    eccentricity: float
    timestamp: float = 0.0

    def pixels(self) -> np.ndarray:
        """Decoded ``(row, col)`` pairs."""
        out = [np.stack([np.full(c1 - c0, r), np.arange(c0, c1)], axis=1) for r, c0, c1 in self.runs]
        return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)

    def keys(self) -> np.ndarray:
        p = self.pixels().astype(np.int64)
        return np.sort((p[:, 0] << 32) + p[:, 1])


@dataclass(frozen=True)
class ShapeDescriptors:
    centroid: tuple[float, float]
    mu20: float
    mu02: float
    mu11: float
    eccentricity: float


def _encode_runs(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    breaks = np.flatnonzero((np.diff(rows) != 0) | (np.diff(cols) != 1)) + 1
    starts = np.concatenate([[0], breaks])
    stops = np.concatenate([breaks, [len(rows)]])
    return np.stack([rows[starts], cols[starts], cols[stops - 1] + 1], axis=1).astype(np.int64)


def _moments(pixels: np.ndarray):
    rows = pixels[:, 0].astype(np.float64)
    cols = pixels[:, 1].astype(np.float64)
    cr, cc = rows.mean(), cols.mean()
    # mu20 along columns (x), mu02 along rows (y)
    mu20 = float(np.mean((cols - cc) ** 2))
    mu02 = float(np.mean((rows - cr) ** 2))
    mu11 = float(np.mean((cols - cc) * (rows - cr)))
    return (float(cr), float(cc)), mu20, mu02, mu11


def _eccentricity(mu20: float, mu02: float, mu11: float) -> float:
    lam = np.linalg.eigvalsh(np.array([[mu20, mu11], [mu11, mu02]]))
    lam_min, lam_max = max(float(lam[0]), 0.0), float(lam[1])
    if lam_max <= 1e-12:
        return 0.0
    return float(np.sqrt(max(0.0, 1.0 - lam_min / lam_max)))


def shape_descriptors(inst: Instance) -> ShapeDescriptors:
    centroid, mu20, mu02, mu11 = _moments(inst.pixels())
    return ShapeDescriptors(centroid, mu20, mu02, mu11, _eccentricity(mu20, mu02, mu11))


def connected_components(mask: BinaryMask | np.ndarray, connectivity: int = 8,
                         timestamp: float | None = None) -> list[Instance]:
    """Foreground components numbered in raster-scan order of their first pixel."""
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 4 or 8")
    if isinstance(mask, BinaryMask):
        fg = mask.foreground & mask.valid
        ts = mask.timestamp if timestamp is None else timestamp
    else:
        fg = np.asarray(mask, dtype=bool)
        ts = 0.0 if timestamp is None else timestamp
    labels, n = ndimage.label(fg, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    order = np.argsort(flat[nz], kind="stable")
    groups = np.split(nz[order], np.cumsum(np.bincount(flat[nz])[1:])[:-1])
    # ndimage numbers components by first encounter; re-sort to be explicit about it
    groups.sort(key=lambda g: g[0])
    width = fg.shape[1]
    instances = []
    for i, g in enumerate(groups):
        rows, cols = g // width, g % width
        pixels = np.stack([rows, cols], axis=1)
        centroid, mu20, mu02, mu11 = _moments(pixels)
        instances.append(Instance(
            instance_id=i,
            runs=_encode_runs(rows, cols),
            area=len(g),
            centroid=centroid,
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1),
            eccentricity=_eccentricity(mu20, mu02, mu11),
            timestamp=ts,
        ))
    return instances


def instance_iou(a: Instance, b: Instance) -> float:
    if a.bbox[0] >= b.bbox[2] or b.bbox[0] >= a.bbox[2] or a.bbox[1] >= b.bbox[3] or b.bbox[1] >= a.bbox[3]:
        return 0.0
    inter = len(np.intersect1d(a.keys(), b.keys(), assume_unique=True))
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Matching:
    pairs: list[tuple[int, int, float]]  # (prev_id, curr_id, iou)
    unmatched_prev: list[int]
    unmatched_curr: list[int]


def match_instances(prev: list[Instance], curr: list[Instance], iou_min: float = 0.2) -> Matching:
    """Greedy matching on globally highest IoU; ties go to the lower prev id, then curr id."""
    if not 0.0 < iou_min <= 1.0:
        raise ValueError("iou_min must lie in (0, 1]")
    candidates = []
    for p in prev:
        for c in curr:
            iou = instance_iou(p, c)
            if iou >= iou_min:
                candidates.append((-iou, p.instance_id, c.instance_id))
    candidates.sort()
    used_p, used_c, pairs = set(), set(), []
    for neg_iou, pid, cid in candidates:
        if pid in used_p or cid in used_c:
            continue
        used_p.add(pid)
        used_c.add(cid)
        pairs.append((pid, cid, -neg_iou))
    return Matching(
        pairs,
        [p.instance_id for p in prev if p.instance_id not in used_p],
        [c.instance_id for c in curr if c.instance_id not in used_c],
    )


@dataclass
class Track:
    track_id: int
    entries: list[tuple[float, int]] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)
    status: str = "active"

    def __len__(self):
        return len(self.entries)


def track_sequence(masks: list[BinaryMask], iou_min: float = 0.2, connectivity: int = 8,
                   min_area: int = 1) -> list[Track]:
    """Link components frame to frame; components smaller than ``min_area`` are ignored."""
    times = [m.timestamp for m in masks]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("mask timestamps must be strictly increasing")
    tracks: list[Track] = []
    open_tracks: dict[int, Track] = {}  # instance id in previous frame -> track
    prev: list[Instance] = []
    for mask in masks:
        curr = [c for c in connected_components(mask, connectivity) if c.area >= min_area]
        by_id = {inst.instance_id: inst for inst in curr}
        matching = match_instances(prev, curr, iou_min)
        next_open = {}
        for pid, cid, _ in matching.pairs:
            track = open_tracks[pid]
            track.entries.append((mask.timestamp, cid))
            track.instances.append(by_id[cid])
            next_open[cid] = track
        for pid in matching.unmatched_prev:
            open_tracks[pid].status = "terminated"
        for cid in matching.unmatched_curr:
            track = Track(len(tracks), [(mask.timestamp, cid)], [by_id[cid]])
            tracks.append(track)
            next_open[cid] = track
        open_tracks, prev = next_open, curr
    return tracks


def tracks_to_csv(tracks: list[Track]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["track_id", "timestamp", "instance_id", "area", "centroid_row", "centroid_col", "eccentricity"])
    for t in tracks:
        for (ts, iid), inst in zip(t.entries, t.instances):
            writer.writerow([t.track_id, f"{ts:.3f}", iid, inst.area, f"{inst.centroid[0]:.4f}",
                             f"{inst.centroid[1]:.4f}", f"{inst.eccentricity:.6f}"])
    return buf.getvalue()
