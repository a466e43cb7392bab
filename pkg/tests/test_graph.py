import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netquant.graph import (INF, DegenerateGraphError, Graph, GraphFormatError,
                            LabelPairSampler, PathMatrix, load_graph, qualifying_anchors,
                            sample_label_pairs, sample_triplet, sample_triplets,
                            shortest_paths, triplet_from_anchor, write_graph)

from oracles import floyd_warshall, random_graph_edges, truncate


def test_load_triangle(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("0 1\n1 2\n2 0\n")
    g = load_graph(f)
    assert g.num_nodes == 3
    assert g.num_edges == 3


def test_load_drops_self_loop_with_warning(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("# comment\n0 0\n0 1\n")
    with pytest.warns(UserWarning, match="self-loop"):
        g = load_graph(f)
    assert g.num_edges == 1
    assert list(g.neighbours[0]) == [1]


def test_load_deduplicates_and_symmetrises(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("0 1\n1 0\n0 1\n")
    g = load_graph(f)
    assert g.num_edges == 1
    assert list(g.neighbours[1]) == [0]


def test_path_neighbours(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("\n".join(f"{i} {i + 1}" for i in range(4)))
    g = load_graph(f)
    assert list(g.neighbours[2]) == [1, 3]


def test_malformed_line_reports_line_number(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("0 1\n1 x\n")
    with pytest.raises(GraphFormatError, match=":2:"):
        load_graph(f)
    f.write_text("0 1 2\n")
    with pytest.raises(GraphFormatError, match=":1:"):
        load_graph(f)


def test_node_id_overflow(tmp_path):
    f = tmp_path / "edges.txt"
    f.write_text("0 7\n")
    with pytest.raises(IndexError):
        load_graph(f, num_nodes=5)


def test_attributes_and_labels_roundtrip(tmp_path):
    e, a, lab = tmp_path / "e", tmp_path / "a", tmp_path / "l"
    e.write_text("0 1\n1 2\n")
    a.write_text("0 3\n\n2\n")
    lab.write_text("0 1\n1 1,2\n2 0\n")
    g = load_graph(e, a, lab)
    assert g.attributes.shape == (3, 4)
    assert g.attributes.toarray().tolist() == [[1, 0, 0, 1], [0, 0, 0, 0], [0, 0, 1, 0]]
    assert g.labels == [frozenset({1}), frozenset({1, 2}), frozenset({0})]
    assert g.num_labels == 3
    e2, a2, l2 = tmp_path / "e2", tmp_path / "a2", tmp_path / "l2"
    write_graph(g, e2, a2, l2)
    g2 = load_graph(e2, a2, l2)
    assert (g2.attributes != g.attributes).nnz == 0
    assert g2.labels == g.labels
    assert g2.edges().tolist() == g.edges().tolist()


def test_invariants_rejected():
    with pytest.raises(ValueError):
        Graph.from_edges(2, [(0, 1)], labels=[{0}, {5}], num_labels=2)
    with pytest.raises(IndexError):
        Graph.from_edges(2, [(0, 2)])


def test_shortest_paths_triangle(triangle):
    d = shortest_paths(triangle, 3).dist
    assert (d[~np.eye(3, dtype=bool)] == 1).all()
    assert (np.diag(d) == 0).all()


def test_shortest_paths_truncation(path5):
    pm = shortest_paths(path5, 2)
    assert pm[0, 3] == INF
    assert pm[0, 2] == 2


@pytest.mark.parametrize("seed", range(5))
def test_shortest_paths_match_floyd_warshall(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    edges = random_graph_edges(rng, n, float(rng.uniform(0.01, 0.1)))
    g = Graph.from_edges(n, edges)
    for h in (1, 3, 6):
        expected = truncate(floyd_warshall(n, edges), h)
        np.testing.assert_array_equal(shortest_paths(g, h, block=17).dist, expected)


def test_lazy_rows_match_dense():
    rng = np.random.default_rng(3)
    edges = random_graph_edges(rng, 60, 0.05)
    g = Graph.from_edges(60, edges)
    dense = shortest_paths(g, 4)
    lazy = shortest_paths(g, 4, dense_limit=10)
    assert not lazy.is_dense
    for i in range(60):
        np.testing.assert_array_equal(lazy.row(i), dense.dist[i])
    assert len(lazy._cache) == 60


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.floats(0.0, 0.4), st.integers(0, 2 ** 16))
def test_path_matrix_properties(n, p, seed):
    edges = random_graph_edges(np.random.default_rng(seed), n, p)
    g = Graph.from_edges(n, edges)
    d = shortest_paths(g, 5).dist.astype(int)
    assert (d == d.T).all()
    assert (np.diag(d) == 0).all()
    adj = g.adjacency.toarray() > 0
    assert ((d == 1) == adj).all()
    fin = np.where(d == INF, 10 ** 6, d)
    via = (fin[:, :, None] + fin[None, :, :]).min(axis=1)
    # triangle inequality wherever the two-leg route stays within the horizon
    assert (fin[via <= 5] <= via[via <= 5]).all()
    assert (d[via > 5] == INF).all()


def test_nqpm_roundtrip(tmp_path, path5):
    pm = shortest_paths(path5, 3)
    pm.save(tmp_path / "pm.bin")
    raw = (tmp_path / "pm.bin").read_bytes()
    assert raw[:4] == b"NQPM"
    assert len(raw) == 16 + 25
    back = PathMatrix.load(tmp_path / "pm.bin")
    assert back.max_hop == 3
    np.testing.assert_array_equal(back.dist, pm.dist)


def test_triplet_from_path_anchor(path5, rng):
    pm = shortest_paths(path5, 6)
    seen = set()
    for _ in range(200):
        t = triplet_from_anchor(pm, 0, rng)
        assert t.delta_ap == t.positive and t.delta_an == t.negative
        seen.add((t.positive, t.negative))
    # rings of node 0 are {1}, {2}, {3}, {4}: every ordered pair of rings appears
    assert seen == {(p, n) for p in range(1, 5) for n in range(p + 1, 5)}
    assert (1, 2) in seen


def test_triangle_is_degenerate(triangle, rng):
    pm = shortest_paths(triangle, 1)
    with pytest.raises(DegenerateGraphError):
        sample_triplet(pm, rng)


def test_star_triplets(star, rng):
    pm = shortest_paths(star, 2)
    assert triplet_from_anchor(pm, 0, rng) is None
    assert set(qualifying_anchors(pm).tolist()) == {1, 2, 3, 4}
    for _ in range(50):
        t = sample_triplet(pm, rng)
        assert t.anchor != 0 and t.positive == 0
        assert t.negative not in (0, t.anchor)
        assert (t.delta_ap, t.delta_an) == (1, 2)


def test_triplet_stream_invariant_and_reproducible():
    rng0 = np.random.default_rng(9)
    g = Graph.from_edges(80, random_graph_edges(rng0, 80, 0.04))
    pm = shortest_paths(g, 6)
    a = sample_triplets(pm, range(80), np.random.default_rng(5))
    b = sample_triplets(pm, range(80), np.random.default_rng(5))
    assert a == b
    for t in a:
        assert pm[t.anchor, t.positive] == t.delta_ap < pm[t.anchor, t.negative] == t.delta_an
        assert t.delta_an <= pm.max_hop


def test_label_pairs_single_class(rng):
    g = Graph.from_edges(20, [], labels=[{0}] * 20)
    pairs = sample_label_pairs(g, 0.5, 100, rng)
    assert all(same for _, _, same in pairs)
    assert all(i != j for i, j, _ in pairs)


def test_label_pairs_disjoint_classes(rng):
    g = Graph.from_edges(4, [], labels=[{0}, {0}, {1}, {1}])
    pairs = sample_label_pairs(g, 1.0, 200, rng)
    for i, j, same in pairs:
        assert same == ((i < 2) == (j < 2))


def test_label_pairs_multilabel_intersection(rng):
    g = Graph.from_edges(2, [], labels=[{1, 2}, {2, 3}])
    pairs = sample_label_pairs(g, 1.0, 10, rng)
    assert all(same for _, _, same in pairs)


def test_label_subset_fixed_and_seeded():
    g = Graph.from_edges(100, [], labels=[{i % 3} for i in range(100)])
    s1 = LabelPairSampler(g, 0.1, np.random.default_rng(2))
    s2 = LabelPairSampler(g, 0.1, np.random.default_rng(2))
    assert len(s1.subset) == 10
    np.testing.assert_array_equal(s1.subset, s2.subset)
    r = np.random.default_rng(0)
    for i, j, _ in s1.sample(500, r):
        assert i in s1.subset and j in s1.subset


def test_label_pairs_need_two_labelled(rng):
    g = Graph.from_edges(5, [], labels=[{0}, set(), set(), set(), set()])
    with pytest.raises(ValueError, match="two labelled"):
        sample_label_pairs(g, 1.0, 3, rng)


def test_hop_rings_agree_with_rows():
    g = Graph.from_edges(40, random_graph_edges(np.random.default_rng(3), 40, 0.08))
    pm = shortest_paths(g, 6)
    for i in range(40):
        rings, members = pm.hop_rings(i)
        row = pm.row(i)
        assert rings == sorted({int(h) for h in row if 1 <= h <= 6})
        for h in rings:
            np.testing.assert_array_equal(members[h], np.flatnonzero(row == h))
    assert pm.hop_rings(5) is pm.hop_rings(5)
