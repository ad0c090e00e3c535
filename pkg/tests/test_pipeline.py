import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sitfuse.cli import main
from sitfuse.config import ConfigError, PipelineConfig, apply_overrides, load_config, parse_override
from sitfuse.raster import load_raster

pytestmark = pytest.mark.filterwarnings("ignore:clustering head")

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic_e2e.json"
SMALL = ["run_id=small", "data.spec.width=48", "data.spec.height=48", "data.sequence_steps=3",
         "encoder.train.epochs=3", "tree.head.epochs=5", "tree.head.min_steps=30",
         "tree.min_node_samples=50", "context.auto_boxes=8"]


def cli(command, out, *extra):
    args = [command, "--config", str(CONFIG), "--out", str(out)]
    for s in SMALL:
        args += ["--set", s]
    return main(args + list(extra))


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli("all", out) == 0
    return out / "small"


class TestConfig:
    def test_committed_config_loads(self):
        cfg = load_config(CONFIG)
        assert cfg.encoder.layer_dims == [64, 32] and cfg.tree.k == 4 and cfg.tree.max_depth == 2
        assert cfg.scene_spec(0).width == 128

    @pytest.mark.parametrize("text, keys, value", [
        ("tree.k=3", ["tree", "k"], 3),
        ("run_id=abc", ["run_id"], "abc"),
        ("data.advection=[0, 1]", ["data", "advection"], [0, 1]),
        ("fusion.target_scene=seq001", ["fusion", "target_scene"], "seq001"),
    ])
    def test_parse_override(self, text, keys, value):
        assert parse_override(text) == (keys, value)

    def test_overrides_merge_with_defaults(self):
        cfg = load_config(None, ["encoder.train={\"epochs\": 2}"])
        assert cfg.train_config().epochs == 2
        assert cfg.train_config().learning_rate == PipelineConfig().train_config().learning_rate

    def test_overrides_do_not_mutate_input(self):
        base = {"tree": {"k": 4}}
        apply_overrides(base, ["tree.k=2"])
        assert base == {"tree": {"k": 4}}

    @pytest.mark.parametrize("overrides", [["bogus=1"], ["tree.kk=2"], ["tree.k=1"], ["noequals"],
                                           ["tracking.source=oracle"]])
    def test_rejects_bad_values(self, overrides):
        with pytest.raises(ConfigError):
            load_config(CONFIG, overrides)

    def test_digest_ignores_output_location(self):
        assert load_config(CONFIG, output="/a").digest() == load_config(CONFIG, output="/b").digest()
        assert load_config(CONFIG).digest() != load_config(CONFIG, ["seed=1"]).digest()

    def test_component_seeds_are_distinct(self):
        cfg = load_config(CONFIG)
        names = ["scenes", "encoder", "tree", "labels", "sequence"]
        assert len({cfg.component_seed(n) for n in names}) == len(names)


class TestRun:
    def test_layout(self, small_run):
        for sub in ["scenes", "models", "masks", "reports", "tracks"]:
            assert (small_run / sub).is_dir()
        manifest = json.loads((small_run / "run_manifest.json").read_text())
        assert manifest["config_hash"] == load_config(CONFIG, SMALL).digest()
        for rel, digest in manifest["artifacts"].items():
            assert hashlib.sha256((small_run / rel).read_bytes()).hexdigest() == digest

    def test_reports_carry_ssim(self, small_run):
        reports = sorted((small_run / "reports").glob("*_truth.json"))
        assert reports
        for path in reports:
            rep = json.loads(path.read_text())
            assert -1.0 <= rep["ssim"] <= 1.0 and "iou" in rep

    def test_rasters_round_trip(self, small_run):
        paths = sorted([*(small_run / "scenes").glob("*.bin"), *(small_run / "masks").glob("*.bin")])
        assert paths
        for p in paths:
            scene = load_raster(p)
            assert scene.data.shape[1:] == (48, 48)
            assert np.isfinite(scene.data[:, scene.valid]).all()

    def test_tracks_written(self, small_run):
        header = (small_run / "tracks" / "tracks_smoke.csv").read_text().splitlines()[0]
        assert header.startswith("track_id,timestamp")

    def test_predict_is_repeatable(self, small_run):
        before = tree_digest(small_run / "masks")
        assert cli("predict", small_run.parent) == 0
        assert tree_digest(small_run / "masks") == before

    def test_predict_single_scene(self, small_run, tmp_path):
        assert cli("predict", small_run.parent, "--scene", "seq001") == 0
        assert cli("predict", small_run.parent, "--scene", "nope") == 1

    def test_byte_identical_reruns(self, small_run, tmp_path):
        assert cli("all", tmp_path) == 0
        assert tree_digest(tmp_path / "small") == tree_digest(small_run)


class TestErrors:
    def test_missing_upstream_artifact_is_named(self, tmp_path, capsys):
        assert cli("gen", tmp_path) == 0
        assert cli("predict", tmp_path) == 1
        err = capsys.readouterr().err
        assert "band_stats.json" in err and "train-encoder" in err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["gen", "--config", str(tmp_path / "missing.json")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "sitfuse.cli", "gen", "--config", str(CONFIG),
                               "--out", str(tmp_path), "--set", "tree.k=1"], capture_output=True, text=True)
        assert proc.returncode == 1 and "error" in proc.stderr
