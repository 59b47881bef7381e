#!/usr/bin/env python3
"""Drive the full pipeline end to end on a small corpus via the CLI.

Synthesizes clean records, injects attacks, trains a one-block detector,
evaluates it with the plausibility filter, re-filters the prediction file,
and finishes with a single-seed ablation sweep. Takes a couple of minutes
on one core; everything lands under --out (default ./toy_pipeline_output).
"""

import argparse
import json
import shutil
import sys
from pathlib import Path

from vitalguard.cli import main as cli


def run(label: str, argv: list[str]) -> None:
    print(f"\n== {label}: vitalguard {' '.join(argv)}")
    code = cli(argv)
    if code != 0:
        sys.exit(f"stage {label!r} exited with {code}")


def show_metrics(path: Path) -> None:
    obj = json.loads(path.read_text())
    pre = obj.get("pre_filter") or obj
    line = ", ".join(
        f"{k} {pre[k]:.3f}" for k in ("sensitivity", "precision", "f1") if pre.get(k) is not None
    )
    print(f"   {path.name}: {line}")
    post = obj.get("post_filter")
    if post:
        print(
            f"   after filter: sensitivity {post['sensitivity']:.3f}, "
            f"precision {post['precision']:.3f}, f1 {post['f1']:.3f}"
        )


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="toy_pipeline_output")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--fresh", action="store_true", help="delete --out first")
    args = ap.parse_args()

    out = Path(args.out)
    if args.fresh and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = str(args.seed)

    substrate = out / "substrate"
    dataset = out / "dataset"
    model = out / "model"
    evaldir = out / "eval"
    ppfdir = out / "ppf"
    ablation = out / "ablation"

    run("synth", ["synth", "--out", str(substrate), "--seed", seed,
                  "--n-records", "14", "--n-steps", "240", "--force"])
    run("inject", ["inject", "--out", str(dataset), "--seed", seed,
                   "--dataset", str(substrate), "--probability", "0.06", "--force"])
    n_events = sum(1 for _ in (dataset / "events.jsonl").open())
    print(f"   {n_events} injected events")

    run("train", ["train", "--out", str(model), "--seed", seed,
                  "--dataset", str(dataset), "--n-blocks", "1",
                  "--stride", "3", "--lr", "0.002", "--batch-size", "32",
                  "--max-epochs", "8", "--patience", "8", "--force"])
    history = json.loads((model / "history.json").read_text())
    print(f"   best val F1 {history['best_val_f1']:.3f} at epoch {history['best_epoch']}")

    run("eval", ["eval", "--out", str(evaldir), "--seed", seed,
                 "--dataset", str(dataset), "--checkpoint", str(model / "checkpoint.json"),
                 "--ppf", "physionet2012", "--stride", "2", "--force"])
    show_metrics(evaldir / "metrics.json")

    run("ppf", ["ppf", "--out", str(ppfdir), "--seed", seed,
                "--dataset", str(dataset),
                "--predictions", str(evaldir / "predictions.csv"),
                "--ppf", "physionet2012", "--force"])
    show_metrics(ppfdir / "metrics.json")

    run("ablate", ["ablate", "--out", str(ablation), "--seed", seed,
                   "--dataset", str(dataset), "--seeds", "0",
                   "--n-blocks", "1", "--stride", "3", "--lr", "0.002",
                   "--batch-size", "32", "--max-epochs", "6", "--patience", "6",
                   "--ppf", "physionet2012", "--force"])
    table = json.loads((ablation / "ablation.json").read_text())
    print("   configuration ranking (by sensitivity):")
    for row in table:
        print(
            f"     {row['config']:<10} sensitivity {row['sensitivity']:.3f} "
            f"precision {row['precision']:.3f} f1 {row['f1']:.3f}"
        )
    print(f"\nall artifacts under {out}/")


if __name__ == "__main__":
    main()
