"""Seeded synthetic multispectral scenes with clouds, smoke plumes and fires.

Random numbers come from NumPy's ``PCG64`` bit generator (PCG XSL RR 128/64,
multiplier ``0x2360ED051FC65DA44385DF649FCCF645``, increment derived from the
seed) seeded through ``numpy.random.SeedSequence``:

* object layout: ``SeedSequence(seed)``
* per-frame pixel noise: ``SeedSequence([seed, frame + 1])``

Draw order is fixed by the code below, so a given ``SceneSpec`` always yields
the same bytes on any platform running NumPy >= 1.17.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .raster import RasterScene

MIN_SIGNATURE_ANGLE_DEG = 15.0


def _default_signatures(n_visible: int, thermal: bool) -> dict[str, tuple[float, ...]]:
    s = np.linspace(0.0, 1.0, n_visible)
    sig = {
        # without a thermal band a steeper background slope keeps it apart from cloud
        "background": 0.15 + 0.15 * s if thermal else 0.1 + 0.3 * s,
        "cloud": 0.85 + 0.05 * s,
        "plume": 0.75 - 0.45 * s,
        "fire": np.full(n_visible, 0.1),
    }
    if thermal:
        for name, value in {"background": 0.5, "cloud": 0.15, "plume": 0.45, "fire": 3.0}.items():
            sig[name] = np.append(sig[name], value)
    return {k: tuple(float(x) for x in v) for k, v in sig.items()}


def signature_angle(a, b) -> float:
    """Angle in degrees between two spectral vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    band_count: int = 6
    n_clouds: int = 2
    n_plumes: int = 2
    n_fires: int = 2
    noise_sigma: float = 0.05
    seed: int = 0
    # last band is thermal; non-thermal specs set this False and carry no fire signal
    thermal: bool = True
    timestamp: float = 1721998310.0
    frame_interval: float = 600.0
    pixel_size: float = 2000.0
    sensor_id: str = "synthetic-abi"
    background: tuple[float, ...] | None = None
    cloud: tuple[float, ...] | None = None
    plume: tuple[float, ...] | None = None
    fire: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")
        if self.band_count < 3:
            raise ValueError("band_count must be at least 3")
        if min(self.n_clouds, self.n_plumes, self.n_fires) < 0:
            raise ValueError("object counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        defaults = _default_signatures(self.band_count - int(self.thermal), self.thermal)
        for name in ("background", "cloud", "plume", "fire"):
            value = getattr(self, name)
            value = defaults[name] if value is None else tuple(float(v) for v in value)
            if len(value) != self.band_count or not np.isfinite(value).all():
                raise ValueError(f"{name} signature must hold {self.band_count} finite values")
            object.__setattr__(self, name, value)
        names = ["background", "cloud", "plume"] + (["fire"] if self.thermal else [])
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                angle = signature_angle(getattr(self, a), getattr(self, b))
                if angle < MIN_SIGNATURE_ANGLE_DEG:
                    raise ValueError(f"{a}/{b} signatures only {angle:.1f} deg apart")

    @property
    def band_names(self) -> tuple[str, ...]:
        n_vis = self.band_count - int(self.thermal)
        return tuple(f"vis{i}" for i in range(n_vis)) + (("thermal",) if self.thermal else ())

    @classmethod
    def from_dict(cls, obj: dict) -> "SceneSpec":
        obj = dict(obj)
        for key in ("background", "cloud", "plume", "fire"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    smoke: np.ndarray
    fire: np.ndarray
    cloud: np.ndarray


@dataclass(frozen=True)
class _Plume:
    x: float
    y: float
    angle: float
    length: float
    width: float


@dataclass(frozen=True)
class _Cloud:
    x: float
    y: float
    a: float
    b: float
    angle: float


@dataclass(frozen=True)
class _Fire:
    x: float
    y: float
    radius: float


@dataclass(frozen=True)
class _Layout:
    gradient_angle: float
    plumes: list[_Plume] = field(default_factory=list)
    clouds: list[_Cloud] = field(default_factory=list)
    fires: list[_Fire] = field(default_factory=list)


def _plume_bbox(p: _Plume, margin: float) -> tuple[float, float, float, float]:
    ex = p.x + p.length * math.cos(p.angle)
    ey = p.y + p.length * math.sin(p.angle)
    pad = 2.5 * p.width + margin
    return min(p.x, ex) - pad, min(p.y, ey) - pad, max(p.x, ex) + pad, max(p.y, ey) + pad


def _boxes_overlap(a, b) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def _sample_layout(spec: SceneSpec) -> _Layout:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    w, h = spec.width, spec.height
    size = min(w, h)
    gradient_angle = float(rng.uniform(0, 2 * math.pi))

    plumes: list[_Plume] = []
    for _ in range(spec.n_plumes):
        for _attempt in range(200):
            width = float(rng.uniform(0.035, 0.05) * size)
            length = float(rng.uniform(0.35, 0.5) * size)
            length = max(length, 6.0 * width)  # elongation >= 3:1
            angle = float(rng.uniform(0, 2 * math.pi))
            x = float(rng.uniform(0.15, 0.85) * w)
            y = float(rng.uniform(0.15, 0.85) * h)
            cand = _Plume(x, y, angle, length, width)
            bb = _plume_bbox(cand, 0.0)
            in_frame = bb[0] >= 2 and bb[1] >= 2 and bb[2] <= w - 3 and bb[3] <= h - 3
            if in_frame and not any(_boxes_overlap(bb, _plume_bbox(p, 2.0)) for p in plumes):
                break
        plumes.append(cand)

    fires: list[_Fire] = []
    for i in range(spec.n_fires):
        radius = float(rng.uniform(2.0, 4.0))
        if plumes:
            p = plumes[i % len(plumes)]
            # extra fires on a plume sit a little downwind of its source
            offset = (i // len(plumes)) * 2.5 * radius
            fx = p.x + offset * math.cos(p.angle)
            fy = p.y + offset * math.sin(p.angle)
        else:
            fx = float(rng.uniform(0.1, 0.9) * w)
            fy = float(rng.uniform(0.1, 0.9) * h)
        fires.append(_Fire(fx, fy, radius))

    clouds: list[_Cloud] = []
    avoid = [_plume_bbox(p, 3.0) for p in plumes]
    avoid += [(f.x - f.radius - 3, f.y - f.radius - 3, f.x + f.radius + 3, f.y + f.radius + 3) for f in fires]
    for _ in range(spec.n_clouds):
        for _attempt in range(200):
            a = float(rng.uniform(0.05, 0.11) * size)
            b = float(rng.uniform(0.6, 1.0) * a)
            angle = float(rng.uniform(0, math.pi))
            x = float(rng.uniform(a, w - a))
            y = float(rng.uniform(a, h - a))
            cand = _Cloud(x, y, a, b, angle)
            bb = (x - a, y - a, x + a, y + a)
            if not any(_boxes_overlap(bb, other) for other in avoid):
                break
        clouds.append(cand)
        avoid.append((cand.x - cand.a, cand.y - cand.a, cand.x + cand.a, cand.y + cand.a))
    return _Layout(gradient_angle, plumes, clouds, fires)


def _plume_opacity(p: _Plume, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    ux, uy = math.cos(p.angle), math.sin(p.angle)
    dx, dy = xx - p.x, yy - p.y
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    # 0.9 at the source falling linearly to 0.4 at the plume tip
    ramp = 0.9 - 0.5 * np.clip(along / p.length, 0.0, 1.0)
    overshoot = np.where(along < 0, along, np.where(along > p.length, along - p.length, 0.0))
    two_w2 = 2.0 * p.width ** 2
    return ramp * np.exp(-(across ** 2 + overshoot ** 2) / two_w2)


def _render(spec: SceneSpec, layout: _Layout, frame: int, advection: tuple[float, float]):
    w, h = spec.width, spec.height
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    shift_x, shift_y = advection[0] * frame, advection[1] * frame
    growth = 1.05 ** frame

    bg = np.asarray(spec.background)[:, None, None]
    ga = layout.gradient_angle
    ramp = math.cos(ga) * (xx / w - 0.5) + math.sin(ga) * (yy / h - 0.5)
    image = bg * (1.0 + 0.3 * ramp)[None]

    transparency = np.ones((h, w))
    for p in layout.plumes:
        moved = replace(p, x=p.x + shift_x, y=p.y + shift_y, length=p.length * growth)
        transparency *= 1.0 - _plume_opacity(moved, xx, yy)
    alpha = 1.0 - transparency
    image = (1.0 - alpha)[None] * image + alpha[None] * np.asarray(spec.plume)[:, None, None]
    smoke = alpha > 0.5

    cloud = np.zeros((h, w), dtype=bool)
    for c in layout.clouds:
        dx, dy = xx - (c.x + shift_x), yy - (c.y + shift_y)
        u = dx * math.cos(c.angle) + dy * math.sin(c.angle)
        v = -dx * math.sin(c.angle) + dy * math.cos(c.angle)
        cloud |= (u / c.a) ** 2 + (v / c.b) ** 2 <= 1.0
    image = np.where(cloud[None], np.asarray(spec.cloud)[:, None, None], image)

    fire = np.zeros((h, w), dtype=bool)
    for f in layout.fires:
        fire |= (xx - (f.x + shift_x)) ** 2 + (yy - (f.y + shift_y)) ** 2 <= f.radius ** 2
    # fires burn through cloud: cloud never covers a fire pixel
    cloud &= ~fire
    smoke &= ~cloud
    if spec.thermal:
        image[-1] = np.where(fire, spec.fire[-1], image[-1])

    noise_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, frame + 1])))
    image = image + noise_rng.normal(0.0, 1.0, size=image.shape) * spec.noise_sigma

    scene = RasterScene(
        data=image.astype(np.float32),
        valid=np.ones((h, w), dtype=bool),
        geotransform=(0.0, spec.pixel_size, 0.0, 0.0, 0.0, -spec.pixel_size),
        timestamp=spec.timestamp + frame * spec.frame_interval,
        sensor_id=spec.sensor_id,
        band_names=spec.band_names,
    )
    return scene, GroundTruth(smoke=smoke, fire=fire, cloud=cloud)


def generate_scene(spec: SceneSpec) -> tuple[RasterScene, GroundTruth]:
    return _render(spec, _sample_layout(spec), 0, (0.0, 0.0))


def generate_sequence(spec: SceneSpec, steps: int,
                      advection: tuple[float, float] = (1.0, 0.0)) -> list[tuple[RasterScene, GroundTruth]]:
    """Frames in which every object drifts by ``advection`` pixels per step.

    Plumes also lengthen by 5% per step. Frame 0 equals :func:`generate_scene`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    layout = _sample_layout(spec)
    return [_render(spec, layout, t, tuple(advection)) for t in range(steps)]


def _erode_keep_cores(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Binary erosion that keeps the deepest pixel of components it would erase."""
    from scipy import ndimage

    if iterations <= 0:
        return mask.copy()
    eroded = ndimage.binary_erosion(mask, iterations=iterations)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    if n:
        depth = ndimage.distance_transform_edt(mask)
        for comp in range(1, n + 1):
            member = labels == comp
            if not (eroded & member).any():
                flat = np.flatnonzero(member)
                eroded.flat[flat[np.argmax(depth.flat[flat])]] = True
    return eroded


def auto_label_polygons(truth: GroundTruth, geometry, erode: int = 2, n_boxes: int = 24,
                        box_size: int = 7, margin: int = 3, seed: int = 0):
    """High-certainty polygons from ground truth, mimicking sparse expert labels.

    Object labels are the truth masks eroded by ``erode`` pixels. Background
    labels are ``box_size`` squares kept at least ``margin`` pixels away from
    the target; box centers are stratified over the other scene classes so
    every background type gets examples.
    """
    from scipy import ndimage

    from .raster import LabelClass, LabelPolygonSet, mask_to_polygons

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1ABE1])))
    h, w = truth.smoke.shape
    clear = ~(truth.smoke | truth.fire | truth.cloud)
    polygons = []
    plans = [
        ("smoke", LabelClass.SMOKE, LabelClass.SMOKE_BG, [truth.cloud, clear]),
        ("fire", LabelClass.FIRE, LabelClass.FIRE_BG, [truth.smoke & ~truth.fire, truth.cloud, clear]),
    ]
    half = box_size // 2
    for name, pos_cls, bg_cls, strata in plans:
        target = getattr(truth, name)
        polygons += mask_to_polygons(_erode_keep_cores(target, erode), pos_cls, geometry)
        allowed = ~ndimage.binary_dilation(target, structure=np.ones((3, 3), bool), iterations=margin)
        bg = np.zeros((h, w), dtype=bool)
        per_stratum = max(1, n_boxes // len(strata))
        for stratum in strata:
            rows, cols = np.nonzero(stratum & allowed)
            if len(rows) == 0:
                continue
            picks = rng.choice(len(rows), size=min(per_stratum, len(rows)), replace=False)
            for i in np.sort(picks):
                r, c = rows[i], cols[i]
                bg[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1] = True
        polygons += mask_to_polygons(bg & allowed, bg_cls, geometry)
    return LabelPolygonSet(tuple(polygons))


def synthetic_retrievals(truth: GroundTruth, seed: int = 0, noise: float = 0.02):
    """Trace-gas retrieval grid whose cloud fraction is high over clouds and thick smoke.

    Column values are enhanced under smoke. Cloud fraction is low over clear
    sky, high over clouds, and in between over smoke, which an operational
    cloud filter would therefore discard.
    """
    from .fusion import RetrievalGrid

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7E7])))
    shape = truth.smoke.shape
    values = 0.2 + 0.6 * truth.smoke + noise * rng.standard_normal(shape)
    cf = rng.uniform(0.0, 0.15, shape)
    cf = np.where(truth.smoke, rng.uniform(0.3, 0.8, shape), cf)
    cf = np.where(truth.cloud, rng.uniform(0.6, 1.0, shape), cf)
    return RetrievalGrid(values, cf, np.ones(shape, dtype=bool))
