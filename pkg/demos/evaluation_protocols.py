"""The evaluation protocols applied to hand-made embeddings.

No training here: one-hot community embeddings plus noise stand in for a
model, which makes the numbers easy to reason about.
"""
import numpy as np

from netquant.evalsuite import (SplitSpec, auc, l2_score_fn, link_prediction_auc,
                                node_classification, node_recommendation_ndcg, path_prediction,
                                split_edges, split_neighbours)
from netquant.graph import shortest_paths
from netquant.synth import sbm_graph

print("AUC of [0.9, 0.4] vs [0.1, 0.5, 0.3]:", auc([0.9, 0.4], [0.1, 0.5, 0.3]))

g = sbm_graph(300, communities=3, p_in=0.08, p_out=0.004, attr_dim=30, seed=2)
rng = np.random.default_rng(0)
comm = np.array([min(s) for s in g.labels])
Z = np.eye(3)[comm] * 3 + rng.normal(scale=0.5, size=(300, 3))

split = split_edges(g, SplitSpec(seed=0))
print("link AUC:", round(link_prediction_auc(split.test_pos, split.test_neg, Z), 4))

for row in node_classification(Z, g.labels, [0.02, 0.1], repeats=5):
    print(row)

pm = shortest_paths(g, 4)
res = path_prediction(Z, pm, 0.8, pairs_per_class=300, drop_empty=True)
print("path prediction micro-F1:", round(res["micro_f1"], 4), "per class:",
      {k: round(v, 3) for k, v in res["per_class"].items()})

ns = split_neighbours(g, 0.1, seed=0)
score, excluded = node_recommendation_ndcg(ns, l2_score_fn(Z), k=50)
print(f"NDCG@50: {score:.4f} ({excluded} nodes without held-out neighbours)")
