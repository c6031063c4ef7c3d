"""KGNN vs GNN-Sup on PROTEINS as the labeled share of TRAIN-L grows.

    python scripts/label_efficiency.py --out runs/label-efficiency
"""

import argparse
from pathlib import Path

from kgnn.cli import ExperimentConfig, cmd_report, cmd_train

FRACTIONS = (0.05, 0.25, 0.5, 1.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="PROTEINS")
    ap.add_argument("--out", default="runs/label-efficiency")
    ap.add_argument("--fractions", type=float, nargs="+", default=list(FRACTIONS))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    records = []
    for frac in args.fractions:
        for method in ("kgnn", "gnn-sup"):
            cfg = ExperimentConfig(args.dataset, method, frac, jobs=args.jobs, split_dir=str(Path(args.out) / "splits"))
            records.append(cmd_train(cfg, args.out))
            print(f"{frac:5.2f} {method:8s} {100 * records[-1].mean:6.2f}")
    text, _ = cmd_report(records)
    Path(args.out, "table.txt").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
