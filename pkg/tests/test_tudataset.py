import numpy as np
import pytest

from kgnn.graph import make_split
from kgnn.synthetic import random_dataset
from kgnn.tudataset import (
    DATA_ROOT_ENV,
    ConsistencyError,
    ParseError,
    SplitFormatError,
    dataset_stats,
    load_dataset_dir,
    load_split,
    resolve_dataset_dir,
    save_split,
)


def write_tu(root, name, A, indicator, graph_labels, node_labels=None):
    d = root / name
    d.mkdir(parents=True)
    (d / f"{name}_A.txt").write_text("".join(f"{i}, {j}\n" for i, j in A))
    (d / f"{name}_graph_indicator.txt").write_text("".join(f"{g}\n" for g in indicator))
    (d / f"{name}_graph_labels.txt").write_text("".join(f"{y}\n" for y in graph_labels))
    if node_labels is not None:
        (d / f"{name}_node_labels.txt").write_text("".join(f"{x}\n" for x in node_labels))
    return d


@pytest.fixture
def tiny(tmp_path):
    # graph 1: triangle on nodes 1-3 (both directions listed), graph 2: edge 4-5 plus isolated node 6
    A = [(1, 2), (2, 1), (2, 3), (3, 2), (1, 3), (3, 1), (4, 5), (5, 4)]
    return write_tu(tmp_path, "TINY", A, [1, 1, 1, 2, 2, 2], [-1, 1], [0, 2, 2, 1, 0, 0])


def test_load_tiny(tiny):
    ds = load_dataset_dir(tiny)
    assert len(ds) == 2
    assert ds.labels == (0, 1)
    assert ds.num_classes == 2
    g0, g1 = ds.graphs
    assert g0.edges == ((0, 1), (0, 2), (1, 2))
    assert g1.edges == ((0, 1),)
    assert g1.node_count == 3
    # node labels {0, 1, 2} -> one-hot columns
    assert g0.node_features.tolist() == [[1, 0, 0], [0, 0, 1], [0, 0, 1]]


def test_stats(tiny):
    s = dataset_stats(load_dataset_dir(tiny))
    assert s["graphs"] == 2 and s["classes"] == 2
    assert s["avg_nodes"] == 3.0
    assert s["avg_edges_undirected"] == 2.0
    assert s["avg_edges_directed"] == 4.0


def test_self_loops_dropped(tmp_path):
    d = write_tu(tmp_path, "L", [(1, 1), (1, 2)], [1, 1], [0])
    assert load_dataset_dir(d).graphs[0].edges == ((0, 1),)


def test_without_node_labels_uses_ones(tmp_path):
    d = write_tu(tmp_path, "U", [(1, 2)], [1, 1, 2], [3, 5])
    ds = load_dataset_dir(d)
    assert ds.graphs[0].node_labels is None
    assert ds.graphs[1].node_features.tolist() == [[1.0]]


def test_missing_file_names_path(tiny):
    (tiny / "TINY_graph_labels.txt").unlink()
    with pytest.raises(FileNotFoundError, match="TINY_graph_labels.txt"):
        load_dataset_dir(tiny)


def test_parse_error_has_line(tmp_path):
    d = write_tu(tmp_path, "P", [(1, 2)], [1, 1], [0])
    (d / "P_A.txt").write_text("1, 2\n2, x\n")
    with pytest.raises(ParseError, match=r"P_A.txt:2"):
        load_dataset_dir(d)


def test_cross_graph_edge_rejected(tmp_path):
    d = write_tu(tmp_path, "X", [(1, 3)], [1, 1, 2], [0, 1])
    with pytest.raises(ConsistencyError, match="crosses"):
        load_dataset_dir(d)


def test_gap_in_graph_ids_rejected(tmp_path):
    d = write_tu(tmp_path, "G", [], [1, 3], [0, 1])
    with pytest.raises(ConsistencyError):
        load_dataset_dir(d)


def test_node_label_count_checked(tmp_path):
    d = write_tu(tmp_path, "N", [], [1, 1], [0], node_labels=[0])
    with pytest.raises(ConsistencyError):
        load_dataset_dir(d)


def test_resolve_through_env(tiny, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tiny.parent))
    assert resolve_dataset_dir("TINY") == tiny
    with pytest.raises(FileNotFoundError):
        resolve_dataset_dir("NOPE")


def test_split_round_trip(tmp_path):
    ds = random_dataset(50, 3, seed=2)
    s = make_split(ds, 9, 2 / 7)
    save_split(s, tmp_path / "a.split")
    assert load_split(tmp_path / "a.split") == s
    save_split(s, tmp_path / "b.split")
    assert (tmp_path / "a.split").read_bytes() == (tmp_path / "b.split").read_bytes()


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda t: "", "empty"),
        (lambda t: t.replace("version 1", "version 2"), "version"),
        (lambda t: t.replace("[val] ", "[vals] "), "section"),
        (lambda t: t.replace("[test] 10", "[test] 11"), "declares"),
    ],
)
def test_split_format_errors(tmp_path, mutate, fragment):
    ds = random_dataset(50, 2, seed=1)
    path = tmp_path / "s.split"
    save_split(make_split(ds, 0, 0.5), path)
    path.write_text(mutate(path.read_text()))
    with pytest.raises(SplitFormatError, match=fragment):
        load_split(path)


def test_split_overlap_rejected(tmp_path):
    ds = random_dataset(50, 2, seed=1)
    s = make_split(ds, 0, 0.5)
    path = tmp_path / "s.split"
    save_split(s, path)
    lines = path.read_text().splitlines()
    # make the first test index also a val index
    val_at = lines.index(next(l for l in lines if l.startswith("[val]"))) + 1
    test_at = lines.index(next(l for l in lines if l.startswith("[test]"))) + 1
    tests = lines[test_at].split()
    tests[0] = lines[val_at].split()[0]
    lines[test_at] = " ".join(tests)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SplitFormatError, match="overlap"):
        load_split(path)
