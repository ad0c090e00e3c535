"""Assign semantic context (smoke, fire) to self-supervised leaf clusters.

Purity of a leaf for a target is measured only against that target's own
background class, so smoke and fire masks are decided independently and may
overlap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .iic import NO_LABEL, HierarchicalLabelMap
from .raster import LabelClass, LabelRaster

TARGETS = ("smoke", "fire")
_TARGET_CLASSES = {
    "smoke": (LabelClass.SMOKE, LabelClass.SMOKE_BG),
    "fire": (LabelClass.FIRE, LabelClass.FIRE_BG),
}
# column order of ClusterClassHistogram.counts
HIST_COLUMNS = (LabelClass.SMOKE, LabelClass.FIRE, LabelClass.SMOKE_BG, LabelClass.FIRE_BG, LabelClass.UNLABELED)


def _check_target(target: str) -> str:
    if target not in _TARGET_CLASSES:
        raise ValueError(f"unknown target {target!r}; expected one of {TARGETS}")
    return target


@dataclass(frozen=True, eq=False)
class BinaryMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    valid: np.ndarray  # (H, W) bool
    target: str = ""
    scene_id: str = ""
    tree_id: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values).astype(np.uint8)
        valid = np.asarray(self.valid, dtype=bool)
        if values.shape != valid.shape:
            raise ValueError("mask and validity grids differ in shape")
        object.__setattr__(self, "values", np.where(valid, values != 0, 0).astype(np.uint8))
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self):
        return self.values.shape

    @property
    def foreground(self) -> np.ndarray:
        return self.values.astype(bool)


@dataclass(frozen=True, eq=False)
class ClusterClassHistogram:
    """Per-leaf counts of labeled pixels; columns follow ``HIST_COLUMNS``."""

    counts: dict[int, np.ndarray] = field(default_factory=dict)
    pixels: dict[int, int] = field(default_factory=dict)

    def count(self, leaf: int, label: LabelClass) -> int:
        row = self.counts.get(leaf)
        return 0 if row is None else int(row[HIST_COLUMNS.index(label)])

    @property
    def leaves(self) -> list[int]:
        return sorted(self.pixels)

    def merge(self, other: "ClusterClassHistogram") -> "ClusterClassHistogram":
        counts = {k: v.copy() for k, v in self.counts.items()}
        pixels = dict(self.pixels)
        for leaf, row in other.counts.items():
            counts[leaf] = counts.get(leaf, 0) + row
            pixels[leaf] = pixels.get(leaf, 0) + other.pixels[leaf]
        return ClusterClassHistogram(counts, pixels)


@dataclass(frozen=True)
class LeafContext:
    leaf: int
    purity: float
    support: int


@dataclass(frozen=True)
class ContextMap:
    """Positive leaves per target with purity and support."""

    positives: dict[str, tuple[LeafContext, ...]]
    purity_threshold: float = 0.5
    min_support: int = 20

    def positive_leaves(self, target: str) -> dict[int, float]:
        return {e.leaf: e.purity for e in self.positives.get(_check_target(target), ())}

    def to_json(self) -> dict:
        out = {"purity_threshold": self.purity_threshold, "min_support": self.min_support}
        for target in TARGETS:
            out[target] = [{"leaf": e.leaf, "purity": e.purity, "support": e.support}
                           for e in self.positives.get(target, ())]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ContextMap":
        positives = {t: tuple(LeafContext(int(e["leaf"]), float(e["purity"]), int(e["support"]))
                              for e in obj.get(t, [])) for t in TARGETS}
        return cls(positives, float(obj["purity_threshold"]), int(obj["min_support"]))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ContextMap":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_histogram(label_map: HierarchicalLabelMap, labels: LabelRaster) -> ClusterClassHistogram:
    if label_map.leaf.shape != labels.shape:
        raise ValueError(f"label map {label_map.leaf.shape} and label raster {labels.shape} differ")
    has_leaf = label_map.leaf != NO_LABEL
    leaves = label_map.leaf[has_leaf]
    bits = labels.bits[has_leaf]
    uniq, inverse = np.unique(leaves, return_inverse=True)
    columns = [(bits & int(c)) != 0 for c in HIST_COLUMNS[:-1]] + [bits == 0]
    table = np.stack([np.bincount(inverse, weights=col, minlength=len(uniq)) for col in columns], axis=1)
    pixel_counts = np.bincount(inverse, minlength=len(uniq))
    counts = {int(l): table[i].astype(np.int64) for i, l in enumerate(uniq)}
    pixels = {int(l): int(pixel_counts[i]) for i, l in enumerate(uniq)}
    return ClusterClassHistogram(counts, pixels)


def assign_context(hist: ClusterClassHistogram, target: str, purity_threshold: float = 0.5,
                   min_support: int = 20) -> tuple[LeafContext, ...]:
    """Leaves whose target purity against its paired background reaches the threshold."""
    _check_target(target)
    if not 0.0 < purity_threshold <= 1.0:
        raise ValueError("purity threshold must lie in (0, 1]")
    pos_cls, bg_cls = _TARGET_CLASSES[target]
    out = []
    for leaf in hist.leaves:
        pos, bg = hist.count(leaf, pos_cls), hist.count(leaf, bg_cls)
        support = pos + bg
        if support == 0 or support < min_support:
            continue
        purity = pos / support
        if purity >= purity_threshold:
            out.append(LeafContext(leaf, purity, support))
    return tuple(out)


def build_context_map(hist: ClusterClassHistogram, purity_threshold: float = 0.5,
                      min_support: int = 20) -> ContextMap:
    positives = {t: assign_context(hist, t, purity_threshold, min_support) for t in TARGETS}
    return ContextMap(positives, purity_threshold, min_support)


def apply_context(label_map: HierarchicalLabelMap, context: ContextMap, target: str, **provenance) -> BinaryMask:
    positive = np.array(sorted(context.positive_leaves(target)), dtype=np.int64)
    values = np.isin(label_map.leaf, positive) & label_map.valid
    return BinaryMask(values, label_map.valid, target, **provenance)


def soft_scores(label_map: HierarchicalLabelMap, context: ContextMap, target: str) -> np.ndarray:
    """Per-pixel purity of the pixel's leaf when that leaf is positive, else 0."""
    scores = np.zeros(label_map.leaf.shape)
    for leaf, purity in context.positive_leaves(target).items():
        scores[label_map.leaf == leaf] = purity
    return scores


def context_subset(label_map: HierarchicalLabelMap, context: ContextMap, target: str) -> np.ndarray:
    """Leaf labels kept only inside the target's positive leaves, ``NO_LABEL`` elsewhere."""
    positive = np.array(sorted(context.positive_leaves(target)), dtype=np.int64)
    return np.where(np.isin(label_map.leaf, positive), label_map.leaf, NO_LABEL)
