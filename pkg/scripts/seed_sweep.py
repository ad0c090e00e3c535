"""Re-run the synthetic end-to-end configuration under several global seeds.

The committed seed is what the acceptance suite checks; this sweep shows how often other seeds
clear the same thresholds.
"""
import argparse
import json
import tempfile
import warnings
from pathlib import Path

from sitfuse.config import load_config
from sitfuse.pipeline import COMMANDS

ROOT = Path(__file__).resolve().parents[1]
THRESHOLDS = {"smoke": (0.8, 0.7), "fire": (0.7, 0.6)}
# fusion and tracking need the sequence frames, which the sweep skips
STAGES = ["gen", "train-encoder", "train-tree", "predict", "evaluate"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "synthetic_e2e.json"))
    parser.add_argument("--seeds", type=int, default=12)
    args = parser.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    passed = 0
    print(f"{'seed':>4} {'smoke ssim':>10} {'smoke iou':>9} {'fire ssim':>9} {'fire iou':>8}  verdict")
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(args.seeds):
            cfg = load_config(args.config, [f"seed={seed}", "data.sequence_steps=0"], tmp)
            for stage in STAGES:
                COMMANDS[stage](cfg)
            scores, ok = [], True
            for target, (s_min, i_min) in THRESHOLDS.items():
                rep = json.loads((cfg.run_dir / "reports" / f"scene000_{target}_truth.json").read_text())
                scores += [rep["ssim"], rep["iou"]]
                ok &= rep["ssim"] >= s_min and rep["iou"] >= i_min
            passed += ok
            print(f"{seed:>4} {scores[0]:>10.3f} {scores[1]:>9.3f} {scores[2]:>9.3f} {scores[3]:>8.3f}  "
                  f"{'pass' if ok else 'fail'}")
    print(f"{passed}/{args.seeds} seeds pass")


if __name__ == "__main__":
    main()
