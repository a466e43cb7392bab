"""Seeded stochastic-block-model fixtures with community-indicator attributes."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .graph import Graph


def sbm_graph(num_nodes=1000, communities=5, p_in=0.1, p_out=0.005, attr_dim=300,
              attr_on=0.2, attr_noise=0.02, seed=0) -> Graph:
    """Planted-partition graph, one label per node (its community).

    Each community owns a contiguous block of ``attr_dim // communities``
    attribute columns.  Members switch on each owned column with probability
    ``attr_on``; every column is additionally switched on with probability
    ``attr_noise``.  ``attr_dim=0`` gives a plain graph.
    """
    rng = np.random.default_rng(seed)
    comm = np.sort(np.arange(num_nodes) % communities)
    iu, ju = np.triu_indices(num_nodes, k=1)
    p = np.where(comm[iu] == comm[ju], p_in, p_out)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    X = None
    if attr_dim:
        block = attr_dim // communities
        owned = np.zeros((num_nodes, attr_dim), dtype=bool)
        for c in range(communities):
            owned[comm == c, c * block:(c + 1) * block] = True
        bits = (owned & (rng.random(owned.shape) < attr_on)) | (rng.random(owned.shape) < attr_noise)
        X = sp.csr_matrix(bits.astype(np.float32))
    labels = [frozenset([int(c)]) for c in comm]
    return Graph.from_edges(num_nodes, edges, X, labels, communities)
