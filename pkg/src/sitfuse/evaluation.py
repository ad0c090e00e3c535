"""Mask scoring: structural similarity plus confusion-matrix metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .context import BinaryMask


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    gaussian_sigma: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.gaussian_sigma <= 0 or self.L <= 0:
            raise ValueError("gaussian_sigma and L must be positive")

    @property
    def C1(self) -> float:
        return (self.K1 * self.L) ** 2

    @property
    def C2(self) -> float:
        return (self.K2 * self.L) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM at every full-window position (valid region only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"SSIM needs equal 2-D grids, got {a.shape} and {b.shape}")
    if min(a.shape) < params.window:
        raise ValueError(f"grid {a.shape} is smaller than the {params.window}px window")
    win = gaussian_window(params.window, params.gaussian_sigma)
    shape = (params.window, params.window)

    def filt(x):
        return np.einsum("ijkl,kl->ij", np.lib.stride_tricks.sliding_window_view(x, shape), win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    C1, C2 = params.C1, params.C2
    return ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2))


def ssim(a, b, params: SsimParams = SsimParams(), valid: np.ndarray | None = None) -> float:
    """Mean SSIM; pixels outside ``valid`` are zero-filled first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if valid is not None:
        a = np.where(valid, a, 0.0)
        b = np.where(valid, b, 0.0)
    return float(ssim_map(a, b, params).mean())


@dataclass(frozen=True)
class EvalReport:
    ssim: float
    precision: float
    recall: float
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int
    n_valid: int
    scene: str = ""
    target: str = ""
    reference: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @staticmethod
    def csv_header() -> list[str]:
        return ["scene", "target", "reference", "ssim", "precision", "recall", "f1", "iou",
                "tp", "fp", "fn", "tn", "n_valid"]

    def csv_row(self) -> list:
        d = asdict(self)
        return [d[k] for k in self.csv_header()]


def write_reports_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalReport.csv_header())
    for r in reports:
        writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r.csv_row()])
    return buf.getvalue()


def mean_reports(reports: list[EvalReport]) -> list[EvalReport]:
    """Unweighted per-scene mean of the metrics for each (target, reference); counts are summed."""
    groups: dict[tuple[str, str], list[EvalReport]] = {}
    for r in reports:
        groups.setdefault((r.target, r.reference), []).append(r)
    out = []
    for (target, reference), group in groups.items():
        def mean(name):
            return math.fsum(getattr(r, name) for r in group) / len(group)

        def total(name):
            return sum(getattr(r, name) for r in group)
        out.append(EvalReport(mean("ssim"), mean("precision"), mean("recall"), mean("f1"), mean("iou"),
                              total("tp"), total("fp"), total("fn"), total("tn"), total("n_valid"),
                              "mean", target, reference))
    return out


def _as_grids(mask) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mask, BinaryMask):
        return mask.foreground, mask.valid
    arr = np.asarray(mask).astype(bool)
    return arr, np.ones(arr.shape, dtype=bool)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def confusion(mask, reference) -> EvalReport:
    """Counts over pixels valid in both grids; SSIM left at NaN.

    Empty denominators: precision is 1.0 when there is nothing to find
    (``fn == 0``) and 0.0 otherwise; recall mirrors that with ``fp``; IoU of two
    empty masks is 1.0.
    """
    m, mv = _as_grids(mask)
    r, rv = _as_grids(reference)
    if m.shape != r.shape:
        raise ValueError(f"mask {m.shape} and reference {r.shape} differ")
    both = mv & rv
    m, r = m[both], r[both]
    tp = int(np.count_nonzero(m & r))
    fp = int(np.count_nonzero(m & ~r))
    fn = int(np.count_nonzero(~m & r))
    tn = int(np.count_nonzero(~m & ~r))
    precision = _ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0)
    recall = _ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou = _ratio(tp, tp + fp + fn, 1.0)
    return EvalReport(float("nan"), precision, recall, f1, iou, tp, fp, fn, tn, int(both.sum()))


def evaluate_pair(mask, ref, params: SsimParams = SsimParams(), **meta) -> EvalReport:
    """Full report for ``mask`` against ``ref``; ``meta`` fills scene/target/reference names."""
    m, mv = _as_grids(mask)
    r, rv = _as_grids(ref)
    counts = confusion(mask, ref)
    score = ssim(m.astype(np.float64), r.astype(np.float64), params, valid=mv & rv)
    values = {f.name: getattr(counts, f.name) for f in fields(EvalReport)}
    values.update(meta, ssim=score)
    return EvalReport(**values)
