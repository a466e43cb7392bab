"""Attributed graphs, truncated hop distances and training samplers."""

from __future__ import annotations

import logging
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

#: Sentinel for pairs farther than the truncation horizon (or disconnected).
INF = 255
DEFAULT_MAX_HOP = 6
DENSE_LIMIT = 50_000

PM_MAGIC = b"NQPM"
PM_VERSION = 1
_PM_HEADER = struct.Struct("<4sHHII")  # magic, version, H, N (u32), reserved


class GraphFormatError(ValueError):
    """A graph input file could not be parsed."""


class DegenerateGraphError(ValueError):
    """No valid training sample exists in the graph."""


@dataclass
class Graph:
    """Undirected attributed graph with optional multi-label node sets.

    ``attributes`` is a binary CSR matrix (or None for plain graphs) and
    ``neighbours`` holds sorted int arrays, one per node.
    """

    num_nodes: int
    neighbours: list[np.ndarray]
    attributes: sp.csr_matrix | None = None
    labels: list[frozenset[int]] | None = None
    num_labels: int = 0
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.neighbours) != self.num_nodes:
            raise ValueError("neighbour list count does not match num_nodes")
        if self.attributes is not None:
            if self.attributes.shape[0] != self.num_nodes:
                raise ValueError("attribute rows do not match num_nodes")
            data = self.attributes.data
            if data.size and not np.all((data == 0) | (data == 1)):
                raise ValueError("attributes must be binary")
        if self.labels is not None:
            if len(self.labels) != self.num_nodes:
                raise ValueError("label sets do not match num_nodes")
            for ls in self.labels:
                for lab in ls:
                    if not 0 <= lab < self.num_labels:
                        raise ValueError(f"label id {lab} outside [0, {self.num_labels})")

    @classmethod
    def from_edges(cls, num_nodes, edges, attributes=None, labels=None, num_labels=None):
        """Build a graph from an iterable / (E, 2) array of node pairs.

        Self-loops are dropped and duplicate or reversed edges are merged.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise IndexError(f"edge endpoint outside [0, {num_nodes})")
        e = e[e[:, 0] != e[:, 1]]
        adj = sp.coo_matrix(
            (np.ones(2 * len(e), dtype=np.int8),
             (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(num_nodes, num_nodes),
        ).tocsr()
        adj.sum_duplicates()
        adj.data[:] = 1
        adj.sort_indices()
        nbrs = [adj.indices[adj.indptr[i]:adj.indptr[i + 1]].astype(np.int64)
                for i in range(num_nodes)]
        if labels is not None:
            labels = [frozenset(int(x) for x in ls) for ls in labels]
            if num_labels is None:
                num_labels = 1 + max((max(ls) for ls in labels if ls), default=-1)
        if attributes is not None:
            attributes = sp.csr_matrix(attributes, dtype=np.float32)
        g = cls(num_nodes, nbrs, attributes, labels, num_labels or 0)
        g._csr = adj
        return g

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._csr is None:
            rows = np.repeat(np.arange(self.num_nodes), [len(n) for n in self.neighbours])
            cols = np.concatenate(self.neighbours) if self.num_nodes else np.zeros(0, int)
            self._csr = sp.csr_matrix(
                (np.ones(len(rows), dtype=np.int8), (rows, cols)),
                shape=(self.num_nodes, self.num_nodes))
        return self._csr

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    def edges(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with i < j, lexicographically sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        e = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return e[np.lexsort((e[:, 1], e[:, 0]))]

    @property
    def attribute_dim(self) -> int:
        return 0 if self.attributes is None else self.attributes.shape[1]

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbours[i]
        k = np.searchsorted(nb, j)
        return bool(k < len(nb) and nb[k] == j)

    def label_matrix(self) -> np.ndarray:
        """Dense (N, num_labels) 0/1 indicator of label sets."""
        if self.labels is None:
            raise ValueError("graph has no labels")
        Y = np.zeros((self.num_nodes, self.num_labels), dtype=np.int8)
        for i, ls in enumerate(self.labels):
            for lab in ls:
                Y[i, lab] = 1
        return Y

    def with_edges(self, edges) -> "Graph":
        """Same nodes, attributes and labels over a different edge set."""
        return Graph.from_edges(self.num_nodes, edges, self.attributes, self.labels,
                                self.num_labels)


# -- file ingestion -------------------------------------------------------------

def _content_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def load_graph(edge_file, attr_file=None, label_file=None, num_nodes=None) -> Graph:
    """Read whitespace-separated edge pairs plus optional attribute and label files.

    Attribute files hold one line per node listing the indices of its 1-bits;
    label files hold ``node_id label[,label...]`` lines.  Node ids are used as
    given (0-based); ``num_nodes`` defaults to one past the largest id seen.
    """
    pairs = []
    for lineno, line in _content_lines(edge_file):
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{edge_file}:{lineno}: expected two node ids, got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{edge_file}:{lineno}: non-integer node id in {line!r}") from None
        if i < 0 or j < 0:
            raise GraphFormatError(f"{edge_file}:{lineno}: negative node id")
        if i == j:
            warnings.warn(f"{edge_file}:{lineno}: self-loop on node {i} dropped", stacklevel=2)
            continue
        pairs.append((i, j))
    max_id = max((max(p) for p in pairs), default=-1)

    attr_rows = None
    if attr_file is not None:
        attr_rows = []
        with open(attr_file) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                try:
                    attr_rows.append([int(t) for t in line.split()])
                except ValueError:
                    raise GraphFormatError(f"{attr_file}:{lineno}: bad attribute index") from None
        while attr_rows and not attr_rows[-1]:
            attr_rows.pop()
        max_id = max(max_id, len(attr_rows) - 1)

    label_map = {}
    if label_file is not None:
        for lineno, line in _content_lines(label_file):
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{label_file}:{lineno}: expected 'node label[,label]'")
            try:
                node = int(parts[0])
                labs = [int(t) for t in parts[1].split(",") if t]
            except ValueError:
                raise GraphFormatError(f"{label_file}:{lineno}: non-integer field") from None
            label_map.setdefault(node, set()).update(labs)
        if label_map:
            max_id = max(max_id, max(label_map))

    n = max_id + 1 if num_nodes is None else num_nodes
    if max_id >= n:
        raise IndexError(f"node id {max_id} exceeds declared node count {n}")

    attributes = None
    if attr_rows is not None:
        rows, cols = [], []
        for i, idx in enumerate(attr_rows):
            rows.extend([i] * len(idx))
            cols.extend(idx)
        dim = max(cols, default=-1) + 1
        attributes = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.float32), (rows, cols)), shape=(n, max(dim, 1)))
        attributes.sum_duplicates()
        attributes.data[:] = 1

    labels = None
    if label_file is not None:
        labels = [frozenset(label_map.get(i, ())) for i in range(n)]
    return Graph.from_edges(n, pairs, attributes, labels)


def write_graph(g: Graph, edge_file, attr_file=None, label_file=None):
    """Write ``g`` in the text formats read by :func:`load_graph`."""
    with open(edge_file, "w") as fh:
        for i, j in g.edges():
            fh.write(f"{i} {j}\n")
    if attr_file is not None and g.attributes is not None:
        X = g.attributes.tocsr()
        with open(attr_file, "w") as fh:
            for i in range(g.num_nodes):
                idx = X.indices[X.indptr[i]:X.indptr[i + 1]]
                fh.write(" ".join(str(int(k)) for k in np.sort(idx)) + "\n")
    if label_file is not None and g.labels is not None:
        with open(label_file, "w") as fh:
            for i, ls in enumerate(g.labels):
                if ls:
                    fh.write(f"{i} {','.join(str(x) for x in sorted(ls))}\n")


# -- hop distances --------------------------------------------------------------

def _bfs_block(adj: sp.csr_matrix, sources: np.ndarray, max_hop: int) -> np.ndarray:
    """Truncated multi-source BFS; one output row per source."""
    n = adj.shape[0]
    out = np.full((len(sources), n), INF, dtype=np.uint8)
    frontier = np.zeros((len(sources), n), dtype=bool)
    frontier[np.arange(len(sources)), sources] = True
    out[frontier] = 0
    visited = frontier.copy()
    adj_t = adj.T.tocsr().astype(np.float32)
    for hop in range(1, max_hop + 1):
        reach = (adj_t @ frontier.T.astype(np.float32)).T > 0
        frontier = reach & ~visited
        if not frontier.any():
            break
        out[frontier] = hop
        visited |= frontier
    return out


class PathMatrix:
    """Hop distances truncated at ``max_hop``; ``INF`` beyond it.

    Small graphs keep the full matrix; larger ones recompute BFS rows on demand
    behind an LRU cache.
    """

    def __init__(self, graph: Graph | None, max_hop: int, dist: np.ndarray | None = None,
                 cache_rows: int = 4096):
        if max_hop < 1:
            raise ValueError("max_hop must be >= 1")
        if max_hop >= INF:
            raise ValueError(f"max_hop must be < {INF}")
        self.max_hop = int(max_hop)
        self._graph = graph
        self._dist = dist
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_rows = cache_rows
        self._rings: dict[int, tuple[list[int], dict[int, np.ndarray]]] = {}
        self.num_nodes = dist.shape[0] if dist is not None else graph.num_nodes

    @property
    def is_dense(self) -> bool:
        return self._dist is not None

    @property
    def dist(self) -> np.ndarray:
        if self._dist is None:
            raise MemoryError("path matrix is row-on-demand at this size; use row()")
        return self._dist

    def row(self, i: int) -> np.ndarray:
        if self._dist is not None:
            return self._dist[i]
        r = self._cache.get(i)
        if r is None:
            r = _bfs_block(self._graph.adjacency, np.array([i]), self.max_hop)[0]
            self._cache[i] = r
            if len(self._cache) > self._cache_rows:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(i)
        return r

    def hop_rings(self, i: int) -> tuple[list[int], dict[int, np.ndarray]]:
        """Non-empty hop counts of row ``i`` and the sorted node ids at each."""
        hit = self._rings.get(i)
        if hit is not None:
            return hit
        row = self.row(i)
        rings = _rings(row, self.max_hop)
        out = rings, {h: np.flatnonzero(row == h) for h in rings}
        if self._dist is not None:  # dense matrices are small enough to memoise every row
            self._rings[i] = out
        return out

    def __getitem__(self, ij):
        i, j = ij
        return int(self.row(i)[j])

    def save(self, path):
        """Persist as NQPM: 16-byte header then row-major uint8 hops (255 = INF)."""
        d = self.dist
        with open(path, "wb") as fh:
            fh.write(_PM_HEADER.pack(PM_MAGIC, PM_VERSION, self.max_hop, d.shape[0], 0))
            fh.write(np.ascontiguousarray(d, dtype=np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "PathMatrix":
        raw = Path(path).read_bytes()
        magic, version, max_hop, n, _ = _PM_HEADER.unpack_from(raw)
        if magic != PM_MAGIC:
            raise ValueError(f"{path}: not an NQPM file")
        if version != PM_VERSION:
            raise ValueError(f"{path}: unsupported NQPM version {version}")
        body = np.frombuffer(raw, dtype=np.uint8, offset=_PM_HEADER.size)
        if body.size != n * n:
            raise ValueError(f"{path}: truncated payload")
        return cls(None, max_hop, dist=body.reshape(n, n).copy())


def shortest_paths(g: Graph, max_hop: int = DEFAULT_MAX_HOP, block: int = 256,
                   dense_limit: int = DENSE_LIMIT) -> PathMatrix:
    """All-pairs hop counts truncated at ``max_hop`` via blocked BFS."""
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    n = g.num_nodes
    if n > dense_limit:
        return PathMatrix(g, max_hop)
    dist = np.empty((n, n), dtype=np.uint8)
    adj = g.adjacency
    for start in range(0, n, block):
        src = np.arange(start, min(n, start + block))
        dist[start:start + len(src)] = _bfs_block(adj, src, max_hop)
    return PathMatrix(g, max_hop, dist=dist)


# -- samplers -------------------------------------------------------------------

@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    delta_ap: int
    delta_an: int


def _rings(row: np.ndarray, max_hop: int) -> list[int]:
    counts = np.bincount(row[row != INF], minlength=max_hop + 1)
    return [h for h in range(1, max_hop + 1) if counts[h] > 0]


def qualifying_anchors(pm: PathMatrix) -> np.ndarray:
    """Nodes with at least two non-empty hop rings (a valid triplet exists)."""
    if pm.is_dense:
        d = pm.dist
        present = np.zeros((d.shape[0], pm.max_hop + 1), dtype=bool)
        for h in range(1, pm.max_hop + 1):
            present[:, h] = (d == h).any(axis=1)
        return np.flatnonzero(present.sum(axis=1) >= 2)
    return np.array([i for i in range(pm.num_nodes) if len(_rings(pm.row(i), pm.max_hop)) >= 2],
                    dtype=np.int64)


def triplet_from_anchor(pm: PathMatrix, anchor: int, rng: np.random.Generator) -> Triplet | None:
    """Draw one triplet for ``anchor``; None if the anchor has fewer than two rings."""
    rings, members = pm.hop_rings(anchor)
    if len(rings) < 2:
        return None
    dp, dn = sorted(rng.choice(rings, size=2, replace=False).tolist())
    p = int(rng.choice(members[dp]))
    n = int(rng.choice(members[dn]))
    return Triplet(int(anchor), p, n, int(dp), int(dn))


def sample_triplet(pm: PathMatrix, rng: np.random.Generator, max_attempts: int = 64) -> Triplet:
    """Uniform anchor, uniform pair of its distinct hop rings, uniform nodes within rings."""
    for _ in range(max_attempts):
        t = triplet_from_anchor(pm, int(rng.integers(pm.num_nodes)), rng)
        if t is not None:
            return t
    valid = qualifying_anchors(pm)
    if len(valid) == 0:
        raise DegenerateGraphError("degenerate graph: no anchor has two distinct hop rings")
    return triplet_from_anchor(pm, int(rng.choice(valid)), rng)


def sample_triplets(pm: PathMatrix, anchors, rng: np.random.Generator,
                    valid: np.ndarray | None = None) -> list[Triplet]:
    """One triplet per requested anchor; unqualified anchors are replaced by random valid ones."""
    if valid is None:
        valid = qualifying_anchors(pm)
    if len(valid) == 0:
        raise DegenerateGraphError("degenerate graph: no anchor has two distinct hop rings")
    out = []
    for a in anchors:
        t = triplet_from_anchor(pm, int(a), rng)
        while t is None:
            t = triplet_from_anchor(pm, int(rng.choice(valid)), rng)
        out.append(t)
    return out


class LabelPairSampler:
    """Pairs of labelled nodes from a subset of size ``fraction * N`` fixed at construction."""

    def __init__(self, g: Graph, fraction: float, rng: np.random.Generator):
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if g.labels is None:
            raise ValueError("graph has no labels")
        labelled = np.array([i for i, ls in enumerate(g.labels) if ls], dtype=np.int64)
        size = min(len(labelled), int(round(fraction * g.num_nodes)))
        self.subset = np.sort(rng.choice(labelled, size=size, replace=False)) if size else labelled[:0]
        if len(self.subset) < 2:
            raise ValueError("need at least two labelled nodes in the supervision subset")
        self.labels = g.labels

    def sample(self, count: int, rng: np.random.Generator) -> list[tuple[int, int, bool]]:
        idx = rng.integers(len(self.subset), size=(count, 2))
        clash = idx[:, 0] == idx[:, 1]
        idx[clash, 1] = (idx[clash, 1] + 1 + rng.integers(len(self.subset) - 1, size=clash.sum())) \
            % len(self.subset)
        out = []
        for a, b in idx:
            i, j = int(self.subset[a]), int(self.subset[b])
            out.append((i, j, bool(self.labels[i] & self.labels[j])))
        return out


def sample_label_pairs(g: Graph, fraction_T: float, count: int, rng: np.random.Generator):
    """Convenience wrapper: fixes the subset with ``rng`` then draws ``count`` pairs."""
    return LabelPairSampler(g, fraction_T, rng).sample(count, rng)
