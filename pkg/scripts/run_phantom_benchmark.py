"""Generate a phantom, run K-fold training, then segment every held-out subject and score it.

Example:
    python scripts/run_phantom_benchmark.py --out runs/bench --subjects 10 \
        --config configs/phantom_reduced.json
"""
import argparse
import json
import sys
import time
from pathlib import Path

from claustrum_seg.cli import main as cli


def run(args) -> int:
    out = Path(args.out)
    data, train_dir, preds = out / "phantom", out / "train", out / "predictions"
    t0 = time.perf_counter()
    steps = [
        ["phantom", "--subjects", str(args.subjects), "--out", str(data), "--seed", str(args.seed)],
        ["train", str(data), "--out", str(train_dir), "--folds", str(args.folds)]
        + (["--config", args.config] if args.config else []),
    ]
    for argv in steps:
        if (rc := cli(argv)) != 0:
            return rc

    # every subject is predicted by the fold that held it out
    cv = json.loads((train_dir / "cv_report.json").read_text())
    preds.mkdir(parents=True, exist_ok=True)
    for fold, test_ids in enumerate(cv["assignments"]):
        for sid in test_ids:
            rc = cli(["predict", "--checkpoint", str(train_dir / f"fold{fold}.unet"),
                      "--input", str(data / f"{sid}_img.nii.gz"), "--out", str(preds / f"{sid}_pred.nii.gz")])
            if rc != 0:
                return rc
    rc = cli(["evaluate", str(preds), str(data), "--out", str(out / "evaluation.json"),
              "--overlays", str(out / "overlays")])
    summary = {
        "cv_aggregate_dice": cv["aggregate_dice"],
        "evaluation": json.loads((out / "evaluation.json").read_text())["mean_dice"],
        "minutes": round((time.perf_counter() - t0) / 60, 2),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return rc


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "phantom_reduced.json"))
    return p.parse_args(argv)


if __name__ == "__main__":
    sys.exit(run(parse_args()))
