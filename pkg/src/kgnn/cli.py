"""Command-line front end: ``prepare``, ``train``, ``report``, ``kernel`` and ``stats``.

Datasets are named either by directory, by TUDataset name under
``$KGNN_DATA_ROOT``, or as ``synthetic:triangles-vs-stars[:n[:seed]]``.

``--labeled-fraction`` is a fraction of TRAIN-L, the labeled 2/7 of TRAIN:
1.0 labels 2/7 of TRAIN, 0.5 labels 1/7 of it, and so on.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .graph import GraphDataset, SplitSpec, make_split
from .synthetic import triangles_vs_stars
from .trainer import METHODS, TrainConfig, TrainResult, model_state, train_method
from .tudataset import dataset_stats, load_dataset_dir, load_split, save_split
from .wl import kernel_matrix

log = logging.getLogger("kgnn")

TRAIN_L_SHARE = 2.0 / 7.0
CSV_COLUMNS = ("method", "dataset", "fraction", "seed", "accuracy", "mean", "std", "runtime_s")
SYNTHETIC_PREFIX = "synthetic:"


class UsageError(ValueError):
    """Bad command-line or config input; exit code 2."""


class SeedFailure(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        super().__init__(f"seed {seed} failed: {type(cause).__name__}: {cause}")
        self.seed = seed


# -- datasets and splits ----------------------------------------------------------


def load_named_dataset(spec: str) -> GraphDataset:
    if spec.startswith(SYNTHETIC_PREFIX):
        parts = spec[len(SYNTHETIC_PREFIX) :].split(":")
        if parts[0] != "triangles-vs-stars" or len(parts) > 3:
            raise UsageError(f"unknown synthetic dataset {spec!r}")
        try:
            n = int(parts[1]) if len(parts) > 1 else 100
            seed = int(parts[2]) if len(parts) > 2 else 0
        except ValueError:
            raise UsageError(f"bad synthetic dataset parameters in {spec!r}") from None
        return triangles_vs_stars(n, seed)
    return load_dataset_dir(spec)


def dataset_tag(spec: str) -> str:
    """File-name-safe dataset name."""
    if spec.startswith(SYNTHETIC_PREFIX):
        return spec[len(SYNTHETIC_PREFIX) :].replace(":", "-")
    return Path(spec).name or spec


def split_fraction(labeled_fraction: float) -> float:
    """TRAIN-L fraction -> fraction of TRAIN handed to ``make_split``."""
    return labeled_fraction * TRAIN_L_SHARE


def _fraction_token(f: float) -> str:
    return f"{f:.6g}"


def split_path(split_dir, tag: str, seed: int, labeled_fraction: float) -> Path:
    return Path(split_dir) / f"{tag}-seed{seed}-frac{_fraction_token(labeled_fraction)}.split"


def cmd_prepare(dataset: str, seeds: Sequence[int], labeled_fraction: float, out) -> list:
    """Write one split file per seed; rerunning rewrites identical bytes."""
    ds = load_named_dataset(dataset)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in seeds:
        split = make_split(ds, seed, split_fraction(labeled_fraction))
        path = split_path(out, dataset_tag(dataset), seed, labeled_fraction)
        save_split(split, path)
        paths.append(path)
    return paths


def _split_for(ds: GraphDataset, tag: str, seed: int, labeled_fraction: float, split_dir) -> SplitSpec:
    """Stored split when present, else a fresh one (saved if ``split_dir`` is set)."""
    if split_dir is not None:
        path = split_path(split_dir, tag, seed, labeled_fraction)
        if path.exists():
            split = load_split(path)
            if not split.covers(len(ds)):
                raise ValueError(f"{path}: split does not partition the {len(ds)} graphs of {tag}")
            return split
    split = make_split(ds, seed, split_fraction(labeled_fraction))
    if split_dir is not None:
        Path(split_dir).mkdir(parents=True, exist_ok=True)
        save_split(split, split_path(split_dir, tag, seed, labeled_fraction))
    return split


# -- experiment config ------------------------------------------------------------


@dataclass
class ExperimentConfig:
    dataset: str
    method: str = "kgnn"
    labeled_fraction: float = 1.0  # of TRAIN-L
    seeds: tuple = (0, 1, 2, 3, 4)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_dir: Optional[str] = None
    jobs: int = 1
    timing: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(sorted(METHODS))}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise UsageError(f"duplicate seeds in {self.seeds}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise UsageError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.jobs < 1:
            raise UsageError("jobs must be at least 1")

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        values = dict(values)
        train = values.pop("train", None) or {}
        known = {f.name for f in fields(cls)} - {"train"}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        train_known = {f.name for f in fields(TrainConfig)}
        bad = set(train) - train_known
        if bad:
            raise UsageError(f"unknown train config keys: {sorted(bad)}")
        if "dataset" not in values:
            raise UsageError("config needs a dataset")
        try:
            tc = TrainConfig(**train)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad train config: {e}") from None
        return cls(train=tc, **values)

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out


def apply_override(mapping: dict, dotted: str) -> None:
    """``a.b=value`` sets ``mapping['a']['b']``; the value is parsed as YAML."""
    if "=" not in dotted:
        raise UsageError(f"override {dotted!r} is not of the form key=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = mapping
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {dotted!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config_file(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"{path}: invalid YAML: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return data


# -- results ------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRecord:
    method: str
    dataset: str
    labeled_fraction: float
    seeds: tuple
    accuracies: tuple
    runtimes: tuple

    def __post_init__(self):
        if not (len(self.seeds) == len(self.accuracies) == len(self.runtimes)) or not self.seeds:
            raise ValueError("a record needs one accuracy and runtime per seed")

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # population std over seeds
        return float(np.std(self.accuracies))

    @property
    def runtime_s(self) -> float:
        return float(sum(self.runtimes))

    @property
    def key(self) -> tuple:
        return (self.method, self.dataset, self.labeled_fraction)


def records_to_csv(records: Sequence[ResultRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        for seed, acc, rt in zip(rec.seeds, rec.accuracies, rec.runtimes):
            w.writerow([rec.method, rec.dataset, repr(rec.labeled_fraction), seed, repr(acc), repr(rec.mean), repr(rec.std), repr(rt)])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ValueError(f"not a results CSV (header {header!r})")
    groups: dict = {}
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ValueError(f"line {line_no}: expected {len(CSV_COLUMNS)} columns, got {len(row)}")
        method, dataset, frac, seed, acc, _, _, rt = row
        g = groups.setdefault((method, dataset, float(frac)), ([], [], []))
        g[0].append(int(seed))
        g[1].append(float(acc))
        g[2].append(float(rt))
    return [ResultRecord(m, d, f, tuple(s), tuple(a), tuple(r)) for (m, d, f), (s, a, r) in groups.items()]


def _column_label(dataset: str, fraction: float, multi: bool) -> str:
    return f"{dataset}@{_fraction_token(fraction)}" if multi else dataset


def cmd_report(records: Sequence[ResultRecord]) -> tuple:
    """(text table, CSV). Cells are ``mean ± std`` in percent; ``*`` marks the best per column."""
    if not records:
        raise ValueError("nothing to report")
    fracs: dict = {}
    for r in records:
        fracs.setdefault(r.dataset, set()).add(r.labeled_fraction)
    columns, methods = [], []
    cells: dict = {}
    for r in records:
        col = _column_label(r.dataset, r.labeled_fraction, len(fracs[r.dataset]) > 1)
        if col not in columns:
            columns.append(col)
        if r.method not in methods:
            methods.append(r.method)
        cells[(r.method, col)] = r
    best = {}
    for col in columns:
        means = [cells[(m, col)].mean for m in methods if (m, col) in cells]
        best[col] = max(means)
    table = [["method"] + columns]
    for m in methods:
        row = [m]
        for col in columns:
            rec = cells.get((m, col))
            if rec is None:
                row.append("-")
                continue
            mark = "*" if rec.mean == best[col] else " "
            row.append(f"{100 * rec.mean:.2f} ± {100 * rec.std:.2f}{mark}")
        table.append(row)
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.append("* best mean in column")
    return "\n".join(lines) + "\n", records_to_csv(records)


# -- training -----------------------------------------------------------------------


def _save_result(result: TrainResult, ckpt_dir: Path) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name, model in (("gnn", result.gnn), ("memnet", result.memnet), ("ensemble", result.ensemble)):
        if model is not None:
            ad.save_params(model_state(model), ckpt_dir / f"{name}.npz")


def _run_seed(config: ExperimentConfig, seed: int, out: Optional[str], ds: Optional[GraphDataset] = None) -> tuple:
    ds = ds if ds is not None else load_named_dataset(config.dataset)
    tag = dataset_tag(config.dataset)
    split = _split_for(ds, tag, seed, config.labeled_fraction, config.split_dir)
    start = time.perf_counter()
    result = train_method(config.method, ds, split, replace(config.train, seed=seed))
    acc = result.test_accuracy()
    elapsed = time.perf_counter() - start if config.timing else 0.0
    if out is not None:
        run = Path(out) / tag / config.method / f"frac{_fraction_token(config.labeled_fraction)}" / f"seed{seed}"
        _save_result(result, run)
        (run / "trace.txt").write_text("\n".join(result.trace_lines()) + "\n")
    return acc, elapsed


def cmd_train(config: ExperimentConfig, out=None) -> ResultRecord:
    """Run ``config.method`` once per seed and aggregate TEST accuracy of the best-VAL models."""
    ds = load_named_dataset(config.dataset)
    accs, times = [], []
    if config.jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(_run_seed, config, s, out) for s in config.seeds]
            for seed, fut in zip(config.seeds, futures):
                try:
                    acc, t = fut.result()
                except Exception as e:
                    raise SeedFailure(seed, e) from e
                accs.append(acc)
                times.append(t)
    else:
        for seed in config.seeds:
            try:
                acc, t = _run_seed(config, seed, out, ds)
            except Exception as e:
                raise SeedFailure(seed, e) from e
            log.info("%s %s seed=%d acc=%.4f", config.method, config.dataset, seed, acc)
            accs.append(acc)
            times.append(t)
    record = ResultRecord(
        config.method, dataset_tag(config.dataset), config.labeled_fraction, config.seeds, tuple(accs), tuple(times)
    )
    if out is not None:
        path = Path(out) / f"{record.dataset}-{record.method}-frac{_fraction_token(record.labeled_fraction)}.csv"
        path.write_text(records_to_csv([record]))
    return record


# -- kernel -----------------------------------------------------------------------


def cmd_kernel(dataset: str, H: int, normalize: bool, out, limit: Optional[int] = None) -> str:
    """Write the Gram matrix as CSV and return a symmetry / PSD summary line."""
    ds = load_named_dataset(dataset)
    graphs = ds.graphs if limit is None else ds.graphs[:limit]
    K, _ = kernel_matrix(graphs, H=H, normalize=normalize)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        K.to_csv(out)
    lo, hi = K.min_max_eigenvalues()
    return (
        f"graphs={len(graphs)} H={H} normalized={normalize} symmetric={K.is_symmetric()} "
        f"psd={K.is_psd()} min_eig={lo:.6e} max_eig={hi:.6e}"
    )


def cmd_stats(dataset: str) -> str:
    stats = dataset_stats(load_named_dataset(dataset))
    return " ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in stats.items())


# -- argument parsing -------------------------------------------------------------


def _parse_seeds(text: str) -> tuple:
    """``5`` -> seeds 0..4; ``0,3,7`` -> those seeds; ``2-4`` -> 2, 3, 4."""
    text = text.strip()
    try:
        if "," in text:
            return tuple(int(t) for t in text.split(",") if t.strip())
        if "-" in text[1:]:
            a, b = text.split("-", 1)
            return tuple(range(int(a), int(b) + 1))
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be positive")
    return tuple(range(n))


def _fraction(text: str) -> float:
    try:
        if "/" in text:
            a, b = text.split("/", 1)
            return float(a) / float(b)
        return float(text.rstrip("%")) / (100.0 if text.endswith("%") else 1.0)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad fraction {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="write split files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", type=_parse_seeds, default=tuple(range(5)))
    p.add_argument("--labeled-fraction", type=_fraction, default=1.0, help="fraction of TRAIN-L (default 1)")
    p.add_argument("--out", required=True, help="split directory")

    t = sub.add_parser("train", help="train a method over seeds")
    t.add_argument("--config", help="YAML experiment config")
    t.add_argument("--dataset")
    t.add_argument("--method", choices=sorted(METHODS))
    t.add_argument("--seeds", type=_parse_seeds)
    t.add_argument("--labeled-fraction", type=_fraction, help="fraction of TRAIN-L (default 1)")
    t.add_argument("--split-dir", help="reuse splits from here, writing any that are missing")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    t.add_argument("--jobs", type=int)
    t.add_argument("--no-timing", action="store_true", help="record runtimes as 0 for byte-stable CSV")
    t.add_argument("--out", help="directory for checkpoints, traces and the result CSV")

    r = sub.add_parser("report", help="tabulate result CSVs")
    r.add_argument("inputs", nargs="+", help="result CSV files or directories holding them")
    r.add_argument("--out", help="write <out>.txt and <out>.csv instead of printing")

    k = sub.add_parser("kernel", help="WL subtree Gram matrix")
    k.add_argument("--dataset", required=True)
    k.add_argument("--iterations", "-H", type=int, default=3)
    k.add_argument("--normalize", action="store_true")
    k.add_argument("--limit", type=int, help="use only the first N graphs")
    k.add_argument("--out", help="CSV path")

    s = sub.add_parser("stats", help="graph / class / size statistics")
    s.add_argument("--dataset", required=True)
    return parser


def experiment_from_args(args) -> ExperimentConfig:
    mapping = load_config_file(args.config) if args.config else {}
    for key in ("dataset", "method", "labeled_fraction", "split_dir", "jobs"):
        value = getattr(args, key)
        if value is not None:
            mapping[key] = value
    if args.seeds is not None:
        mapping["seeds"] = list(args.seeds)
    if args.no_timing:
        mapping["timing"] = False
    for item in args.set:
        apply_override(mapping, item)
    return ExperimentConfig.from_mapping(mapping)


def _collect_csvs(inputs) -> list:
    paths = []
    for item in inputs:
        p = Path(item)
        paths.extend(sorted(p.rglob("*.csv")) if p.is_dir() else [p])
    if not paths:
        raise ValueError("no result CSV files found")
    return paths


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "prepare":
            for path in cmd_prepare(args.dataset, args.seeds, args.labeled_fraction, args.out):
                print(path)
        elif args.command == "train":
            record = cmd_train(experiment_from_args(args), args.out)
            text, _ = cmd_report([record])
            sys.stdout.write(text)
        elif args.command == "report":
            records = []
            for path in _collect_csvs(args.inputs):
                records.extend(records_from_csv(Path(path).read_text()))
            text, table_csv = cmd_report(records)
            if args.out:
                Path(args.out + ".txt").write_text(text)
                Path(args.out + ".csv").write_text(table_csv)
            else:
                sys.stdout.write(text)
        elif args.command == "kernel":
            print(cmd_kernel(args.dataset, args.iterations, args.normalize, args.out, args.limit))
        elif args.command == "stats":
            print(cmd_stats(args.dataset))
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"kgnn: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"kgnn: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
