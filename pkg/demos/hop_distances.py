"""Truncated hop distances and the samples drawn from them.

Builds a small planted-partition graph, computes the hop matrix, then draws a
few triplets and label pairs the way training does.
"""
import numpy as np

from netquant.graph import INF, sample_label_pairs, sample_triplets, qualifying_anchors, shortest_paths
from netquant.synth import sbm_graph

g = sbm_graph(200, communities=4, p_in=0.08, p_out=0.004, attr_dim=40, seed=0)
print(f"{g.num_nodes} nodes, {g.num_edges} edges, {g.attribute_dim} attribute columns")

pm = shortest_paths(g, max_hop=6)
D = pm.dist
finite = D[D != INF]
print("hop histogram (off-diagonal, reachable within 6):")
for h in range(1, 7):
    print(f"  {h}: {int((finite == h).sum())}")
print("pairs beyond 6 hops:", int((D == INF).sum()))

# an anchor qualifies when it has nodes in at least two distinct hop rings
anchors = qualifying_anchors(pm)
rng = np.random.default_rng(0)
for t in sample_triplets(pm, anchors[:5], rng):
    print(f"anchor {t.anchor}: positive {t.positive} at {t.delta_ap} hops, "
          f"negative {t.negative} at {t.delta_an} hops")

# label pairs come from a fixed 10% subset of labelled nodes
for a, b, same in sample_label_pairs(g, 0.1, 5, rng):
    print(f"label pair ({a}, {b}) same={same}")
