"""All methods on PROTEINS and IMDB-B at half of TRAIN-L, 5 seeds each.

    python scripts/run_ablation.py --out runs/ablation [--jobs 5]

Needs the archives under $KGNN_DATA_ROOT. Writes one CSV per
(dataset, method) and a combined table to ``<out>/table.txt``.
"""

import argparse
from pathlib import Path

from kgnn.cli import ExperimentConfig, cmd_report, cmd_train
from kgnn.trainer import METHODS, TrainConfig

HIDDEN = {"PROTEINS": 32, "IMDB-B": 64}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--datasets", nargs="+", default=list(HIDDEN))
    ap.add_argument("--methods", nargs="+", default=sorted(METHODS))
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    records = []
    for name in args.datasets:
        for method in args.methods:
            cfg = ExperimentConfig(
                dataset=name,
                method=method,
                labeled_fraction=args.fraction,
                train=TrainConfig(hidden_dim=HIDDEN.get(name, 32)),
                split_dir=str(Path(args.out) / "splits"),
                jobs=args.jobs,
            )
            rec = cmd_train(cfg, args.out)
            print(f"{name:10s} {method:14s} {100 * rec.mean:6.2f} +- {100 * rec.std:5.2f}")
            records.append(rec)
    text, _ = cmd_report(records)
    Path(args.out, "table.txt").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
