"""Staged pipeline behind the ``sitfuse`` subcommands.

Each stage reads its inputs from, and writes its outputs to, the run directory
``<output>/<run_id>/{scenes,models,masks,reports,tracks}``. Stages never
retrain upstream artifacts, so rerunning ``predict`` with unchanged
checkpoints reproduces the same masks. After every stage
``run_manifest.json`` is rewritten with the config hash and a SHA-256 of every
artifact; it holds no wall-clock data so repeated runs are byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .context import (TARGETS, BinaryMask, ContextMap, apply_context,
                      build_context_map, build_histogram, context_subset, soft_scores)
from .dbn import DbnModel, encode, load_dbn, save_dbn, train_dbn
from .evaluation import EvalReport, evaluate_pair, mean_reports, write_reports_csv
from .fusion import RetrievalGrid, StreamMask, binarize, fuse, restore_retrievals
from .iic import ClusterTree, HierarchicalLabelMap, assign_labels, build_tree, load_tree, save_tree
from .raster import (BandStats, LabelClass, RasterScene, compute_band_stats, extract_samples, grid_to_scene,
                     load_label_polygons, load_raster, rasterize_polygons, save_label_polygons, save_raster)
from .synthetic import auto_label_polygons, generate_scene, generate_sequence, synthetic_retrievals
from .tracking import track_sequence, tracks_to_csv

SUBDIRS = ("scenes", "models", "masks", "reports", "tracks")
MANIFEST = "run_manifest.json"


class PipelineError(RuntimeError):
    """A stage cannot run; the message names what is missing or wrong."""


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    role: str  # "train" or "sequence"
    timestamp: float
    has_truth: bool
    labels: str | None  # geojson path relative to the run dir
    has_retrieval: bool


@contextmanager
def thread_limit():
    """Cap BLAS/OpenMP pools at ``SITFUSE_THREADS`` (unset or 0 = library default)."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SITFUSE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise PipelineError(f"SITFUSE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise PipelineError("SITFUSE_THREADS must be >= 0")
    if n == 0:
        yield
    else:
        with threadpool_limits(limits=n):
            yield


class Run:
    """Paths and artifact I/O for one run directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.run_dir

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def make_dirs(self):
        for d in SUBDIRS:
            self.path(d).mkdir(parents=True, exist_ok=True)

    def require(self, *parts, what: str) -> Path:
        p = self.path(*parts)
        if not (p.exists() or p.with_suffix(".json").exists()):
            raise PipelineError(f"missing {what}: {p} (run the upstream stage first)")
        return p

    # scenes
    def scenes(self) -> list[SceneEntry]:
        index = self.require("scenes", "index.json", what="scene index")
        return [SceneEntry(**e) for e in json.loads(index.read_text())["scenes"]]

    def scene(self, entry: SceneEntry) -> RasterScene:
        return load_raster(self.path("scenes", entry.scene_id))

    def truth(self, entry: SceneEntry) -> dict[str, np.ndarray]:
        if not entry.has_truth:
            raise PipelineError(f"scene {entry.scene_id} has no ground truth")
        t = load_raster(self.path("scenes", f"{entry.scene_id}_truth"))
        return {name: t.data[i] > 0.5 for i, name in enumerate(t.band_names)}

    # models
    def band_stats(self) -> BandStats:
        p = self.require("models", "band_stats.json", what="band statistics (train-encoder output)")
        return BandStats.from_json(json.loads(p.read_text()))

    def encoder(self) -> DbnModel:
        self.require("models", "encoder", "manifest.json", what="encoder checkpoint")
        return load_dbn(self.path("models", "encoder"))

    def tree(self) -> ClusterTree:
        self.require("models", "tree", "tree_manifest.json", what="tree checkpoint")
        return load_tree(self.path("models", "tree"))

    def context(self) -> ContextMap:
        return ContextMap.load(self.require("models", "context.json", what="context map (train-tree output)"))

    def mask(self, scene_id: str, target: str) -> BinaryMask:
        r = load_raster(self.require("masks", f"{scene_id}_{target}", what=f"{target} mask for {scene_id}"))
        return BinaryMask(r.data[0] > 0.5, r.valid, target, scene_id, timestamp=r.timestamp)

    def write_raster(self, scene: RasterScene, *parts):
        save_raster(scene, self.path(*parts))

    def write_text(self, text: str, *parts):
        p = self.path(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)

    def write_manifest(self, stage: str):
        previous = set()
        mp = self.path(MANIFEST)
        if mp.exists():
            previous = set(json.loads(mp.read_text()).get("stages", []))
        artifacts = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                artifacts[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(include_output=False),
            "stages": sorted(previous | {stage}),
            "artifacts": artifacts,
        }
        mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _truth_scene(truth, like: RasterScene) -> RasterScene:
    data = np.stack([truth.smoke, truth.fire, truth.cloud]).astype(np.float32)
    return RasterScene(data, np.ones(like.valid.shape, bool), like.geotransform, like.timestamp,
                       like.sensor_id, ("smoke", "fire", "cloud"))


def _retrieval_scene(ret: RetrievalGrid, like: RasterScene) -> RasterScene:
    data = np.stack([ret.values, ret.cloud_fraction]).astype(np.float32)
    return RasterScene(data, ret.valid, like.geotransform, like.timestamp, like.sensor_id,
                       ("value", "cloud_fraction"))


def _emit_synthetic(run: Run, scene_id: str, role: str, scene, truth, label_seed: int) -> SceneEntry:
    cfg = run.cfg
    run.write_raster(scene, "scenes", scene_id)
    run.write_raster(_truth_scene(truth, scene), "scenes", f"{scene_id}_truth")
    labels = None
    if role == "train":
        polys = auto_label_polygons(truth, scene.geometry, erode=cfg.context.auto_erode,
                                    n_boxes=cfg.context.auto_boxes, box_size=cfg.context.auto_box_size,
                                    seed=label_seed)
        labels = f"scenes/{scene_id}_labels.geojson"
        save_label_polygons(polys, run.path(labels))
    ret = synthetic_retrievals(truth, seed=label_seed)
    run.write_raster(_retrieval_scene(ret, scene), "scenes", f"{scene_id}_retrieval")
    return SceneEntry(scene_id, role, float(scene.timestamp), True, labels, True)


def cmd_gen(cfg: PipelineConfig) -> list[SceneEntry]:
    """Write the input scenes (generated or copied), truth, labels and retrieval grids."""
    run = Run(cfg)
    run.make_dirs()
    entries = []
    if cfg.data.scene_paths:
        label_paths = cfg.context.label_paths
        if label_paths and len(label_paths) != len(cfg.data.scene_paths):
            raise PipelineError("context.label_paths must pair one-to-one with data.scene_paths")
        for i, src in enumerate(cfg.data.scene_paths):
            scene = load_raster(src)
            scene_id = f"scene{i:03d}"
            run.write_raster(scene, "scenes", scene_id)
            labels = None
            if label_paths:
                labels = f"scenes/{scene_id}_labels.geojson"
                shutil.copyfile(label_paths[i], run.path(labels))
            entries.append(SceneEntry(scene_id, "train", float(scene.timestamp), False, labels, False))
    else:
        for i in range(cfg.data.n_scenes):
            scene, truth = generate_scene(cfg.scene_spec(i))
            entries.append(_emit_synthetic(run, f"scene{i:03d}", "train", scene, truth,
                                           cfg.component_seed("labels") + i))
        if cfg.data.sequence_steps > 0:
            spec = replace(cfg.scene_spec(0), seed=cfg.component_seed("sequence"))
            frames = generate_sequence(spec, cfg.data.sequence_steps, cfg.data.advection)
            for t, (scene, truth) in enumerate(frames):
                entries.append(_emit_synthetic(run, f"seq{t:03d}", "sequence", scene, truth,
                                               cfg.component_seed("labels") + 100 + t))
    index = {"scenes": [e.__dict__ for e in entries]}
    run.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", "scenes", "index.json")
    run.write_manifest("gen")
    return entries


def _samples(run: Run, entry: SceneEntry, stats: BandStats):
    return extract_samples(run.scene(entry), stats, run.cfg.sampling.radius, run.cfg.sampling.bands,
                           scene_ref=entry.scene_id)


def cmd_train_encoder(cfg: PipelineConfig) -> DbnModel:
    run = Run(cfg)
    train = [e for e in run.scenes() if e.role == "train"]
    if not train:
        raise PipelineError("no training scenes in the scene index")
    stats = compute_band_stats([run.scene(e) for e in train])
    run.write_text(json.dumps(stats.to_json(), indent=2, sort_keys=True) + "\n", "models", "band_stats.json")
    features = np.concatenate([_samples(run, e, stats).features for e in train])
    model, traces = train_dbn(features, cfg.encoder.layer_dims, cfg.train_config())
    save_dbn(model, run.path("models", "encoder"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "epoch", "reconstruction_error"])
    for layer, trace in enumerate(traces):
        for epoch, err in enumerate(trace):
            writer.writerow([layer, epoch, f"{err:.9g}"])
    run.write_text(buf.getvalue(), "models", "encoder_trace.csv")
    run.write_manifest("train-encoder")
    return model


def _label_map(run: Run, entry: SceneEntry, stats, model, tree) -> HierarchicalLabelMap:
    samples = _samples(run, entry, stats)
    scene = run.scene(entry)
    return assign_labels(tree, encode(model, samples.features), samples.coords, (scene.height, scene.width))


def cmd_train_tree(cfg: PipelineConfig) -> tuple[ClusterTree, ContextMap]:
    """Grow the clustering tree on encoded training pixels, then assign context from the labels."""
    run = Run(cfg)
    train = [e for e in run.scenes() if e.role == "train"]
    stats, model = run.band_stats(), run.encoder()
    latent = np.concatenate([encode(model, _samples(run, e, stats).features) for e in train])
    tcfg = cfg.tree_config()
    tree = build_tree(latent, tcfg)
    save_tree(tree, run.path("models", "tree"), tcfg.head)
    # context must see the same float32 heads that predict will load
    tree = run.tree()
    labelled = [e for e in train if e.labels]
    if not labelled:
        raise PipelineError("no label polygons for any training scene; context cannot be assigned")
    hist = None
    for e in labelled:
        scene = run.scene(e)
        labels = rasterize_polygons(load_label_polygons(run.path(e.labels)), scene)
        h = build_histogram(_label_map(run, e, stats, model, tree), labels)
        hist = h if hist is None else hist.merge(h)
    ctx = build_context_map(hist, cfg.context.purity_threshold, cfg.context.min_support)
    ctx.save(run.path("models", "context.json"))
    run.write_manifest("train-tree")
    return tree, ctx


def cmd_predict(cfg: PipelineConfig, scene_ids: list[str] | None = None) -> dict[str, dict[str, BinaryMask]]:
    """Emit the hierarchical labels, the context subsets and the binary masks per scene."""
    run = Run(cfg)
    stats, model, tree, ctx = run.band_stats(), run.encoder(), run.tree(), run.context()
    entries = run.scenes()
    if scene_ids:
        known = {e.scene_id for e in entries}
        missing = [s for s in scene_ids if s not in known]
        if missing:
            raise PipelineError(f"unknown scene id(s): {', '.join(missing)}")
        entries = [e for e in entries if e.scene_id in scene_ids]
    out = {}
    for e in entries:
        scene = run.scene(e)
        lm = _label_map(run, e, stats, model, tree)
        bands = np.concatenate([lm.leaf[None], np.moveaxis(lm.path, -1, 0)]).astype(np.float32)
        names = ("leaf",) + tuple(f"level{i}" for i in range(lm.path.shape[-1]))
        run.write_raster(RasterScene(bands, lm.valid, scene.geometry.geotransform, scene.timestamp,
                                     scene.sensor_id, names), "masks", f"{e.scene_id}_hier")
        out[e.scene_id] = {}
        for target in TARGETS:
            subset = context_subset(lm, ctx, target)
            run.write_raster(grid_to_scene(subset, lm.valid, scene, f"{target}_leaf"),
                             "masks", f"{e.scene_id}_subset_{target}")
            mask = apply_context(lm, ctx, target, scene_id=e.scene_id, timestamp=scene.timestamp)
            run.write_raster(grid_to_scene(mask.values, mask.valid, scene, target), "masks", f"{e.scene_id}_{target}")
            run.write_raster(grid_to_scene(soft_scores(lm, ctx, target), lm.valid, scene, f"{target}_score"),
                             "masks", f"{e.scene_id}_{target}_score")
            out[e.scene_id][target] = mask
    run.write_manifest("predict")
    return out


def _label_reference(labels, target: str) -> BinaryMask:
    pos, bg = {"smoke": (LabelClass.SMOKE, LabelClass.SMOKE_BG), "fire": (LabelClass.FIRE, LabelClass.FIRE_BG)}[target]
    return BinaryMask(labels.has(pos), labels.has(pos) | labels.has(bg), target)


def cmd_evaluate(cfg: PipelineConfig) -> list[EvalReport]:
    """Score every mask against ground truth (when known) and against the label polygons."""
    run = Run(cfg)
    params = cfg.ssim_params()
    reports = []
    for e in run.scenes():
        scene = run.scene(e)
        truth = run.truth(e) if e.has_truth else None
        labels = rasterize_polygons(load_label_polygons(run.path(e.labels)), scene) if e.labels else None
        for target in TARGETS:
            mask = run.mask(e.scene_id, target)
            refs = []
            configured = cfg.evaluation.reference_paths.get(f"{e.scene_id}:{target}")
            if configured:
                r = load_raster(configured)
                refs.append(("reference", BinaryMask(r.data[0] > 0.5, r.valid, target)))
            elif truth is not None:
                refs.append(("truth", BinaryMask(truth[target], np.ones(mask.shape, bool), target)))
            if labels is not None:
                refs.append(("labels", _label_reference(labels, target)))
            for ref_name, ref in refs:
                rep = evaluate_pair(mask, ref, params, scene=e.scene_id, target=target, reference=ref_name)
                run.write_text(rep.to_json(), "reports", f"{e.scene_id}_{target}_{ref_name}.json")
                reports.append(rep)
    if not reports:
        raise PipelineError("no reference (truth, configured raster or labels) for any scene")
    run.write_text(write_reports_csv(reports + mean_reports(reports)), "reports", "evaluation.csv")
    run.write_manifest("evaluate")
    return reports


def cmd_fuse(cfg: PipelineConfig):
    """Fuse stream masks onto the target scene grid, binarize, and restore filtered retrievals."""
    run = Run(cfg)
    fc = cfg.fusion
    entries = {e.scene_id: e for e in run.scenes()}
    target_id = fc.target_scene or next(iter(entries))
    if target_id not in entries:
        raise PipelineError(f"fusion.target_scene {target_id!r} is not in the scene index")
    target_scene = run.scene(entries[target_id])
    specs = fc.streams or [{"scene": s} for s in entries]
    streams = []
    for s in specs:
        sid = s["scene"]
        if sid not in entries:
            raise PipelineError(f"fusion stream scene {sid!r} is not in the scene index")
        mask = run.mask(sid, fc.target)
        score_path = run.path("masks", f"{sid}_{fc.target}_score")
        scores = load_raster(score_path).data[0].astype(np.float64) if score_path.with_suffix(".json").exists() else None
        geom = run.scene(entries[sid]).geometry
        streams.append(StreamMask(geom, mask.values, mask.valid, scores, float(s.get("weight", 1.0)),
                                  mask.timestamp, sid))
    cert = fuse(streams, target_scene.geometry, target_scene.timestamp, fc.time_window)
    run.write_raster(grid_to_scene(cert.certainty, cert.valid, target_scene, f"{fc.target}_certainty"),
                     "masks", f"fused_{fc.target}_certainty")
    binary = binarize(cert, fc.threshold)
    run.write_raster(grid_to_scene(binary.values, binary.valid, target_scene, fc.target),
                     "masks", f"fused_{fc.target}")
    summary = {"target_scene": target_id, "streams": len(streams), "threshold": fc.threshold,
               "fused_pixels": int(binary.foreground.sum())}
    entry = entries[target_id]
    if entry.has_retrieval and fc.target == "smoke":
        r = load_raster(run.path("scenes", f"{target_id}_retrieval"))
        ret = RetrievalGrid(r.data[0].astype(np.float64), r.data[1].astype(np.float64), r.valid)
        restored = restore_retrievals(ret, run.mask(target_id, "smoke"), fc.cf_threshold)
        run.write_raster(_retrieval_scene(restored, target_scene), "masks", f"{target_id}_restored")
        passed = ret.valid & (ret.cloud_fraction <= fc.cf_threshold)
        summary.update(cf_threshold=fc.cf_threshold, passed_filter=int(passed.sum()),
                       restored=int((restored.valid & ~passed).sum()), kept=int(restored.valid.sum()))
    run.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "reports", f"fusion_{fc.target}.json")
    run.write_manifest("fuse")
    return cert, binary


def cmd_track(cfg: PipelineConfig):
    run = Run(cfg)
    tc = cfg.tracking
    seq = sorted((e for e in run.scenes() if e.role == "sequence"), key=lambda e: e.timestamp)
    if not seq:
        raise PipelineError("no sequence scenes to track; set data.sequence_steps > 0 and rerun gen")
    masks = []
    for e in seq:
        if tc.source == "truth":
            truth = run.truth(e)[tc.target]
            masks.append(BinaryMask(truth, np.ones_like(truth), tc.target, e.scene_id, timestamp=e.timestamp))
        else:
            masks.append(run.mask(e.scene_id, tc.target))
    tracks = track_sequence(masks, tc.iou_min, tc.connectivity, tc.min_area)
    run.write_text(tracks_to_csv(tracks), "tracks", f"tracks_{tc.target}.csv")
    run.write_manifest("track")
    return tracks


COMMANDS = {
    "gen": cmd_gen,
    "train-encoder": cmd_train_encoder,
    "train-tree": cmd_train_tree,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "track": cmd_track,
}


def run_all(cfg: PipelineConfig):
    with thread_limit():
        for fn in COMMANDS.values():
            fn(cfg)
