"""Reader for the TUDataset text format and the split-file serializer.

A TUDataset directory ``NAME/`` holds ``NAME_A.txt`` (1-based ``i, j`` node
pairs), ``NAME_graph_indicator.txt`` (1-based graph id per node),
``NAME_graph_labels.txt`` and optionally ``NAME_node_labels.txt``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import Graph, GraphDataset, GraphError, SplitSpec

DATA_ROOT_ENV = "KGNN_DATA_ROOT"

# short names used in tables -> directory names of the public archive
ALIASES = {
    "IMDB-B": "IMDB-BINARY",
    "IMDB-M": "IMDB-MULTI",
    "REDDIT-B": "REDDIT-BINARY",
    "REDDIT-M-5K": "REDDIT-MULTI-5K",
}

SPLIT_FORMAT = "kgnn-split"
SPLIT_VERSION = 1
SPLIT_SECTIONS = ("train_labeled", "train_unlabeled", "val", "test")


class ParseError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class TuDatasetFiles:
    adjacency_path: Path
    graph_indicator_path: Path
    graph_labels_path: Path
    node_labels_path: Optional[Path] = None

    @classmethod
    def from_dir(cls, directory, name: Optional[str] = None) -> "TuDatasetFiles":
        directory = Path(directory)
        name = name or directory.name
        p = lambda suffix: directory / f"{name}_{suffix}.txt"
        node_labels = p("node_labels")
        return cls(
            adjacency_path=p("A"),
            graph_indicator_path=p("graph_indicator"),
            graph_labels_path=p("graph_labels"),
            node_labels_path=node_labels if node_labels.exists() else None,
        )

    def check(self):
        for path in (self.adjacency_path, self.graph_indicator_path, self.graph_labels_path):
            if not Path(path).is_file():
                raise FileNotFoundError(f"missing TUDataset file: {path}")


def resolve_dataset_dir(name_or_path) -> Path:
    """Accept a directory path, or a dataset name looked up under ``$KGNN_DATA_ROOT``."""
    path = Path(name_or_path)
    if path.is_dir():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        for candidate in (str(name_or_path), ALIASES.get(str(name_or_path).upper(), "")):
            if candidate and (Path(root) / candidate).is_dir():
                return Path(root) / candidate
    raise FileNotFoundError(
        f"dataset {name_or_path!r} not found (set {DATA_ROOT_ENV} or pass a directory)"
    )


def _read_ints(path, width: int) -> list:
    rows = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = [t.strip() for t in text.split(",")]
            if len(parts) != width:
                raise ParseError(path, line_no, f"expected {width} comma-separated values, got {text!r}")
            try:
                vals = [int(t) for t in parts]
            except ValueError:
                raise ParseError(path, line_no, f"non-integer value in {text!r}") from None
            rows.append(vals if width > 1 else vals[0])
    return rows


def load_tudataset(files: TuDatasetFiles, name: str) -> GraphDataset:
    files.check()
    indicator = _read_ints(files.graph_indicator_path, 1)
    graph_labels_raw = _read_ints(files.graph_labels_path, 1)
    edges = _read_ints(files.adjacency_path, 2)
    node_labels_raw = None
    if files.node_labels_path is not None:
        # some archives carry several label columns; the first one is the node label
        node_labels_raw = []
        with open(files.node_labels_path) as fh:
            for line_no, line in enumerate(fh, start=1):
                text = line.strip()
                if not text:
                    continue
                try:
                    node_labels_raw.append(int(text.split(",")[0]))
                except ValueError:
                    raise ParseError(files.node_labels_path, line_no, f"bad node label {text!r}") from None
        if len(node_labels_raw) != len(indicator):
            raise ConsistencyError(
                f"{len(node_labels_raw)} node labels but {len(indicator)} nodes in graph_indicator"
            )

    n_graphs = len(graph_labels_raw)
    ind = np.asarray(indicator, dtype=np.int64)
    if ind.size == 0:
        raise ConsistencyError("graph_indicator is empty")
    if np.any(np.diff(ind) < 0):
        raise ConsistencyError("graph_indicator is not sorted by graph id")
    ids = np.unique(ind)
    if ids[0] != 1 or ids[-1] != len(ids) or len(ids) != n_graphs:
        raise ConsistencyError(
            f"graph ids must be contiguous 1..{n_graphs}; found {len(ids)} ids in [{ids[0]}, {ids[-1]}]"
        )
    # first global (0-based) node index of each graph
    starts = np.searchsorted(ind, np.arange(1, n_graphs + 1))
    sizes = np.bincount(ind - 1, minlength=n_graphs)

    per_graph_edges = [set() for _ in range(n_graphs)]
    n_nodes = len(indicator)
    for line_no, (i, j) in enumerate(edges, start=1):
        if not (1 <= i <= n_nodes and 1 <= j <= n_nodes):
            raise ConsistencyError(
                f"{files.adjacency_path}:{line_no}: node ({i}, {j}) not declared in graph_indicator"
            )
        gi, gj = ind[i - 1], ind[j - 1]
        if gi != gj:
            raise ConsistencyError(f"{files.adjacency_path}:{line_no}: edge ({i}, {j}) crosses graphs")
        if i == j:
            continue
        base = starts[gi - 1]
        u, v = i - 1 - base, j - 1 - base
        per_graph_edges[gi - 1].add((min(u, v), max(u, v)))

    label_values = sorted(set(graph_labels_raw))
    label_map = {v: k for k, v in enumerate(label_values)}

    node_symbols = None
    if node_labels_raw is not None:
        node_symbols = {v: k for k, v in enumerate(sorted(set(node_labels_raw)))}

    graphs = []
    for g in range(n_graphs):
        lo, cnt = starts[g], sizes[g]
        labels = None
        feats = None
        if node_labels_raw is not None:
            labels = node_labels_raw[lo : lo + cnt]
            feats = np.zeros((cnt, len(node_symbols)))
            feats[np.arange(cnt), [node_symbols[s] for s in labels]] = 1.0
        try:
            graphs.append(Graph(cnt, sorted(per_graph_edges[g]), node_labels=labels, node_features=feats))
        except GraphError as exc:
            raise ConsistencyError(f"graph {g + 1}: {exc}") from None

    return GraphDataset(
        name=name,
        graphs=graphs,
        labels=[label_map[v] for v in graph_labels_raw],
        num_classes=len(label_values),
    )


def load_dataset_dir(directory, name: Optional[str] = None) -> GraphDataset:
    directory = resolve_dataset_dir(directory)
    files = TuDatasetFiles.from_dir(directory, name)
    return load_tudataset(files, name or directory.name)


def dataset_stats(ds: GraphDataset) -> dict:
    """Graph count, class count and mean node/edge counts under both edge conventions."""
    nodes = np.array([g.node_count for g in ds.graphs], dtype=float)
    edges = np.array([g.edge_count for g in ds.graphs], dtype=float)
    return {
        "graphs": len(ds),
        "classes": ds.num_classes,
        "avg_nodes": float(nodes.mean()) if len(nodes) else 0.0,
        "avg_edges_undirected": float(edges.mean()) if len(edges) else 0.0,
        "avg_edges_directed": float(2 * edges.mean()) if len(edges) else 0.0,
    }


class SplitFormatError(ValueError):
    pass


def save_split(split: SplitSpec, path) -> None:
    lines = [
        f"format {SPLIT_FORMAT}",
        f"version {SPLIT_VERSION}",
        f"seed {split.seed}",
        f"labeled_fraction {split.labeled_fraction!r}",
    ]
    for name in SPLIT_SECTIONS:
        idx = getattr(split, name)
        lines.append(f"[{name}] {len(idx)}")
        lines.append(" ".join(str(i) for i in idx))
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path) -> SplitSpec:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise SplitFormatError(f"{path}: empty split file")
    header = {}
    pos = 0
    for key in ("format", "version", "seed", "labeled_fraction"):
        if pos >= len(lines):
            raise SplitFormatError(f"{path}:{pos + 1}: missing header field {key!r}")
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != key:
            raise SplitFormatError(f"{path}:{pos + 1}: expected '{key} <value>', got {lines[pos]!r}")
        header[key] = parts[1]
        pos += 1
    if header["format"] != SPLIT_FORMAT:
        raise SplitFormatError(f"{path}: not a {SPLIT_FORMAT} file")
    if header["version"] != str(SPLIT_VERSION):
        raise SplitFormatError(f"{path}: unsupported version {header['version']}")

    sections = {}
    for name in SPLIT_SECTIONS:
        if pos >= len(lines):
            raise SplitFormatError(f"{path}: truncated before section [{name}]")
        head = lines[pos].split()
        if len(head) != 2 or head[0] != f"[{name}]":
            raise SplitFormatError(f"{path}:{pos + 1}: expected section [{name}]")
        count = int(head[1])
        body = lines[pos + 1] if pos + 1 < len(lines) else ""
        try:
            idx = [int(t) for t in body.split()]
        except ValueError:
            raise SplitFormatError(f"{path}:{pos + 2}: non-integer index") from None
        if len(idx) != count:
            raise SplitFormatError(f"{path}:{pos + 2}: section [{name}] declares {count} indices, has {len(idx)}")
        sections[name] = idx
        pos += 2

    try:
        return SplitSpec(
            seed=int(header["seed"]),
            labeled_fraction=float(header["labeled_fraction"]),
            **sections,
        )
    except GraphError as exc:
        raise SplitFormatError(f"{path}: {exc}") from None
