"""Run the committed synthetic configuration and print mask scores against the acceptance thresholds."""
import argparse
import csv
import sys
import time
from pathlib import Path

from sitfuse.cli import main as sitfuse_main
from sitfuse.config import load_config

ROOT = Path(__file__).resolve().parents[1]
THRESHOLDS = {"smoke": (0.8, 0.7), "fire": (0.7, 0.6)}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "synthetic_e2e.json"))
    parser.add_argument("--out", default="out")
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args(argv)

    cli_args = ["all", "--config", args.config, "--out", args.out]
    for s in args.overrides:
        cli_args += ["--set", s]
    start = time.perf_counter()
    if sitfuse_main(cli_args) != 0:
        return 1
    elapsed = time.perf_counter() - start

    run_dir = load_config(args.config, args.overrides, args.out).run_dir
    rows = list(csv.DictReader((run_dir / "reports" / "evaluation.csv").open()))
    ok = True
    print(f"{'scene':<10}{'target':<8}{'reference':<11}{'ssim':>8}{'iou':>8}  verdict")
    for row in rows:
        verdict = ""
        if row["reference"] == "truth":
            s_min, i_min = THRESHOLDS[row["target"]]
            passed = float(row["ssim"]) >= s_min and float(row["iou"]) >= i_min
            ok &= passed
            verdict = "pass" if passed else "FAIL"
        print(f"{row['scene']:<10}{row['target']:<8}{row['reference']:<11}"
              f"{float(row['ssim']):>8.3f}{float(row['iou']):>8.3f}  {verdict}")
    print(f"runtime {elapsed:.1f}s; overall {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
