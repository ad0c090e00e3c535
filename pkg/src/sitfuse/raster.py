"""Raster scenes, labels, sampling and grid collocation.

Rasters live on disk as a band-sequential payload of little-endian float32
values (``<name>.bin``) next to a JSON sidecar (``<name>.json``) carrying the
shape, nodata sentinel, affine geotransform, timestamp, sensor id and band
names. The geotransform follows the GDAL convention::

    x = gt[0] + col * gt[1] + row * gt[2]
    y = gt[3] + col * gt[4] + row * gt[5]
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_NODATA = -9999.0
STD_EPS = 1e-6


class LabelClass(enum.IntFlag):
    """Bit assigned to each label class in a :class:`LabelRaster`."""

    UNLABELED = 0
    SMOKE = 1
    FIRE = 2
    SMOKE_BG = 4
    FIRE_BG = 8


GEOJSON_CLASS_NAMES = {
    "smoke": LabelClass.SMOKE,
    "fire": LabelClass.FIRE,
    "smoke_background": LabelClass.SMOKE_BG,
    "fire_background": LabelClass.FIRE_BG,
}
_CLASS_TO_NAME = {v: k for k, v in GEOJSON_CLASS_NAMES.items()}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridGeometry:
    width: int
    height: int
    geotransform: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        gt = tuple(float(v) for v in self.geotransform)
        if len(gt) != 6:
            raise ValueError("geotransform needs 6 coefficients")
        det = gt[1] * gt[5] - gt[2] * gt[4]
        if det == 0.0 or not np.isfinite(det):
            raise ValueError(f"geotransform is not invertible: {gt}")
        object.__setattr__(self, "geotransform", gt)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_to_world(self, col, row):
        gt = self.geotransform
        col = np.asarray(col, dtype=np.float64)
        row = np.asarray(row, dtype=np.float64)
        return gt[0] + col * gt[1] + row * gt[2], gt[3] + col * gt[4] + row * gt[5]

    def world_to_pixel(self, x, y):
        """Continuous (col, row) for world coordinates; pixel ``c`` spans ``[c, c+1)``."""
        gt = self.geotransform
        dx = np.asarray(x, dtype=np.float64) - gt[0]
        dy = np.asarray(y, dtype=np.float64) - gt[3]
        det = gt[1] * gt[5] - gt[2] * gt[4]
        col = (gt[5] * dx - gt[2] * dy) / det
        row = (-gt[4] * dx + gt[1] * dy) / det
        return col, row

    def pixel_centers(self):
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        return self.pixel_to_world(cols + 0.5, rows + 0.5)


@dataclass(frozen=True, eq=False)
class RasterScene:
    """Multi-band float32 grid, shape ``(bands, height, width)``, plus metadata."""

    data: np.ndarray
    valid: np.ndarray
    geotransform: tuple[float, ...] = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    timestamp: float = 0.0
    sensor_id: str = "synthetic"
    band_names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"scene data must be (bands, height, width), got shape {data.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != data.shape[1:]:
            raise ValueError(f"validity grid {valid.shape} does not match data {data.shape[1:]}")
        if not np.isfinite(data[:, valid]).all():
            raise ValueError("non-finite value at a valid pixel")
        geometry = GridGeometry(data.shape[2], data.shape[1], tuple(self.geotransform))
        names = tuple(self.band_names) or tuple(f"band{i}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ValueError(f"{len(names)} band names for {data.shape[0]} bands")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "geotransform", geometry.geotransform)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "band_names", names)

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.width, self.height, self.geotransform)


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    pixel_count: int

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "pixel_count": int(self.pixel_count)}

    @classmethod
    def from_json(cls, obj: dict) -> "BandStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64),
                   int(obj["pixel_count"]))


@dataclass(frozen=True, eq=False)
class SampleSet:
    features: np.ndarray  # (N, D) float64
    coords: np.ndarray  # (N, 2) int64 (row, col)
    radius: int = 0
    scene_ref: str = ""

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LabelPolygon:
    label: LabelClass
    vertices: np.ndarray  # (n, 2) world (x, y)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise ValueError("polygon vertices must be an (n, 2) array")
        if len(verts) > 1 and np.array_equal(verts[0], verts[-1]):
            verts = verts[:-1]
        if len(verts) < 3:
            raise ValueError(f"degenerate polygon with {len(verts)} vertices")
        label = LabelClass(self.label)
        if label not in _CLASS_TO_NAME:
            raise ValueError(f"invalid polygon class {label!r}")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "vertices", verts)


@dataclass(frozen=True)
class LabelPolygonSet:
    polygons: tuple[LabelPolygon, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "polygons", tuple(self.polygons))

    def __len__(self):
        return len(self.polygons)


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Per-pixel bitset of :class:`LabelClass` codes."""

    bits: np.ndarray  # (H, W) uint8

    def has(self, label: LabelClass) -> np.ndarray:
        return (self.bits & int(label)) != 0

    @property
    def unlabeled(self) -> np.ndarray:
        return self.bits == 0

    @property
    def shape(self):
        return self.bits.shape


# --- file i/o ---------------------------------------------------------------

def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_raster(scene: RasterScene, path, nodata: float = DEFAULT_NODATA) -> None:
    stem = _stem(path)
    if np.any(scene.data[:, scene.valid] == np.float32(nodata)):
        raise ValueError(f"valid pixel collides with nodata sentinel {nodata}")
    payload = np.where(scene.valid[None], scene.data, np.float32(nodata)).astype("<f4")
    header = {
        "width": scene.width,
        "height": scene.height,
        "bands": scene.band_count,
        "dtype": "float32",
        "byteorder": "little",
        "interleave": "bsq",
        "nodata": float(nodata),
        "geotransform": list(scene.geotransform),
        "timestamp": scene.timestamp,
        "sensor_id": scene.sensor_id,
        "band_names": list(scene.band_names),
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(payload.tobytes(order="C"))
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def load_raster(path) -> RasterScene:
    stem = _stem(path)
    header_path = stem.with_suffix(".json")
    try:
        header = json.loads(header_path.read_text())
        width, height, bands = int(header["width"]), int(header["height"]), int(header["bands"])
        nodata = float(header.get("nodata", DEFAULT_NODATA))
        geotransform = tuple(float(v) for v in header["geotransform"])
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"corrupt raster header {header_path}: {exc}") from exc
    if min(width, height, bands) <= 0:
        raise ValueError(f"raster header {header_path} declares non-positive dimensions")
    raw = stem.with_suffix(".bin").read_bytes()
    expected = width * height * bands * 4
    if len(raw) != expected:
        raise ValueError(f"payload {stem.with_suffix('.bin')} holds {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(bands, height, width).astype(np.float32)
    invalid = np.any(data == np.float32(nodata), axis=0) | ~np.isfinite(data).all(axis=0)
    return RasterScene(
        data=data,
        valid=~invalid,
        geotransform=geotransform,
        timestamp=float(header.get("timestamp", 0.0)),
        sensor_id=str(header.get("sensor_id", "")),
        band_names=tuple(header.get("band_names") or ()),
    )


def grid_to_scene(values: np.ndarray, valid: np.ndarray, like: RasterScene | GridGeometry,
                  band_name: str = "value", timestamp: float | None = None,
                  sensor_id: str | None = None) -> RasterScene:
    """Wrap a single 2-D grid as a one-band scene sharing ``like``'s geometry."""
    ts = timestamp if timestamp is not None else getattr(like, "timestamp", 0.0)
    sid = sensor_id if sensor_id is not None else getattr(like, "sensor_id", "derived")
    return RasterScene(np.asarray(values, dtype=np.float32)[None], valid, like.geotransform,
                       ts, sid, (band_name,))


def load_label_polygons(path) -> LabelPolygonSet:
    obj = json.loads(Path(path).read_text())
    if obj.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    polygons = []
    for feature in obj.get("features", []):
        name = (feature.get("properties") or {}).get("class")
        if name not in GEOJSON_CLASS_NAMES:
            raise ValueError(f"{path}: unknown label class {name!r}")
        geom = feature.get("geometry") or {}
        if geom.get("type") == "Polygon":
            rings = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            rings = geom["coordinates"]
        else:
            raise ValueError(f"{path}: unsupported geometry {geom.get('type')!r}")
        # holes are ignored: only exterior rings carry labels
        for poly in rings:
            polygons.append(LabelPolygon(GEOJSON_CLASS_NAMES[name], np.asarray(poly[0], dtype=np.float64)))
    return LabelPolygonSet(tuple(polygons))


def save_label_polygons(labels: LabelPolygonSet, path) -> None:
    features = []
    for poly in labels.polygons:
        ring = [[float(x), float(y)] for x, y in poly.vertices]
        ring.append(ring[0])
        features.append({
            "type": "Feature",
            "properties": {"class": _CLASS_TO_NAME[poly.label]},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")


# --- statistics and sampling -----------------------------------------------

def compute_band_stats(scenes: RasterScene | Iterable[RasterScene]) -> BandStats:
    """Population mean/std per band over the valid pixels of one or more scenes."""
    if isinstance(scenes, RasterScene):
        scenes = [scenes]
    stacks = [s.data[:, s.valid].astype(np.float64) for s in scenes]
    if not stacks or len({x.shape[0] for x in stacks}) != 1:
        raise ValueError("band stats need scenes with a common band count")
    values = np.concatenate(stacks, axis=1)
    if values.shape[1] == 0:
        raise ValueError("band stats need at least one valid pixel")
    return BandStats(values.mean(axis=1), values.std(axis=1), values.shape[1])


def extract_samples(scene: RasterScene, stats: BandStats, radius: int = 0,
                    bands: Sequence[int] | None = None, scene_ref: str = "") -> SampleSet:
    """Standardized per-pixel feature vectors over fully valid windows.

    Each feature is ``(v - mean_b) / max(std_b, 1e-6)``; a window of side
    ``2r+1`` is flattened band-major, then row-major.
    """
    if len(stats.mean) != scene.band_count:
        raise ValueError(f"stats cover {len(stats.mean)} bands, scene has {scene.band_count}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    band_idx = np.arange(scene.band_count) if bands is None else np.asarray(list(bands), dtype=int)
    mean = stats.mean[band_idx][:, None, None]
    scale = np.maximum(stats.std[band_idx], STD_EPS)[:, None, None]
    std_data = (scene.data[band_idx].astype(np.float64) - mean) / scale
    side = 2 * radius + 1
    h, w = scene.height, scene.width
    if h < side or w < side:
        return SampleSet(np.zeros((0, len(band_idx) * side * side)), np.zeros((0, 2), dtype=np.int64),
                         radius, scene_ref)
    win_valid = np.lib.stride_tricks.sliding_window_view(scene.valid, (side, side)).all(axis=(2, 3))
    rows, cols = np.nonzero(win_valid)
    windows = np.lib.stride_tricks.sliding_window_view(std_data, (side, side), axis=(1, 2))
    # windows: (B, H-2r, W-2r, side, side)
    feats = windows[:, rows, cols].transpose(1, 0, 2, 3).reshape(len(rows), len(band_idx) * side * side)
    coords = np.stack([rows + radius, cols + radius], axis=1).astype(np.int64)
    return SampleSet(np.ascontiguousarray(feats), coords, radius, scene_ref)


# --- polygons ---------------------------------------------------------------

def points_in_polygon(x: np.ndarray, y: np.ndarray, vertices: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Even-odd point-in-polygon test; points on an edge count as inside."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    scale = max(1.0, float(np.abs(vertices).max()))
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < x_at)
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        seg_len = np.hypot(x1 - x0, y1 - y0)
        within = ((x >= min(x0, x1) - tol * scale) & (x <= max(x0, x1) + tol * scale)
                  & (y >= min(y0, y1) - tol * scale) & (y <= max(y0, y1) + tol * scale))
        on_edge |= within & (np.abs(cross) <= tol * scale * max(seg_len, 1.0))
    return inside | on_edge


def rasterize_polygons(labels: LabelPolygonSet, geometry: RasterScene | GridGeometry) -> LabelRaster:
    """Set the class bit of every pixel whose center falls inside a polygon of that class."""
    geom = geometry.geometry if isinstance(geometry, RasterScene) else geometry
    bits = np.zeros(geom.shape, dtype=np.uint8)
    if not labels.polygons:
        return LabelRaster(bits)
    # polygon bbox in pixel space limits the tested centers
    for poly in labels.polygons:
        cols, rows = geom.world_to_pixel(poly.vertices[:, 0], poly.vertices[:, 1])
        r0 = max(int(np.floor(rows.min())) - 1, 0)
        r1 = min(int(np.ceil(rows.max())) + 1, geom.height)
        c0 = max(int(np.floor(cols.min())) - 1, 0)
        c1 = min(int(np.ceil(cols.max())) + 1, geom.width)
        if r0 >= r1 or c0 >= c1:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        x, y = geom.pixel_to_world(cc + 0.5, rr + 0.5)
        hit = points_in_polygon(x, y, poly.vertices)
        bits[r0:r1, c0:c1] |= np.where(hit, np.uint8(poly.label), np.uint8(0))
    return LabelRaster(bits)


def mask_to_polygons(mask: np.ndarray, label: LabelClass, geometry: GridGeometry) -> list[LabelPolygon]:
    """Cover the true pixels of ``mask`` with one rectangle per horizontal run."""
    polys = []
    for row in range(mask.shape[0]):
        line = np.concatenate([[False], mask[row].astype(bool), [False]])
        edges = np.flatnonzero(line[1:] != line[:-1])
        for c0, c1 in zip(edges[::2], edges[1::2]):
            # inset by a quarter pixel so neighbouring centers stay outside
            cols = np.array([c0 + 0.25, c1 - 0.25, c1 - 0.25, c0 + 0.25])
            rows = np.array([row + 0.25, row + 0.25, row + 0.75, row + 0.75])
            x, y = geometry.pixel_to_world(cols, rows)
            polys.append(LabelPolygon(label, np.stack([x, y], axis=1)))
    return polys


# --- collocation ------------------------------------------------------------

def collocate_grid(src: GridGeometry | RasterScene, dst: GridGeometry | RasterScene,
                   src_valid: np.ndarray | None = None) -> np.ndarray:
    """Nearest source pixel (flat index) for every destination pixel, ``-1`` if none.

    When ``src`` is a scene its validity grid is used unless ``src_valid`` is given.
    """
    if isinstance(src, RasterScene):
        if src_valid is None:
            src_valid = src.valid
        src = src.geometry
    if isinstance(dst, RasterScene):
        dst = dst.geometry
    x, y = dst.pixel_centers()
    col, row = src.world_to_pixel(x, y)
    ci = np.floor(col).astype(np.int64)
    ri = np.floor(row).astype(np.int64)
    inside = (ci >= 0) & (ci < src.width) & (ri >= 0) & (ri < src.height)
    index = np.where(inside, ri * src.width + ci, -1)
    if src_valid is not None:
        ok = np.zeros_like(inside)
        ok[inside] = np.asarray(src_valid, dtype=bool).ravel()[index[inside]]
        index = np.where(ok, index, -1)
    return index
