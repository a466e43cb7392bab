"""Train a small model, look at the log, and export compact codes.

Runs in well under a minute on one core.
"""
import numpy as np

from netquant.codestore import CodeIndex, export_codes, recommend_top_k, storage_report
from netquant.evalsuite import SplitSpec, link_prediction_auc, node_classification, split_edges
from netquant.synth import sbm_graph
from netquant.trainer import TrainConfig, fit

g = sbm_graph(400, communities=4, p_in=0.06, p_out=0.003, attr_dim=80, seed=1)
split = split_edges(g, SplitSpec(seed=0))

# with fewer than ~100 supervised nodes the encoder memorises them instead of the
# communities, so this small graph uses a 30% label fraction
cfg = TrainConfig(M=8, K=16, L=32, hidden=(64, 32), quant_hidden=(32, 32), epochs=60,
                  fraction_T=0.3)
result = fit(split.train_graph, cfg)
for row in result.epoch_log[::15] + result.epoch_log[-1:]:
    print("epoch {epoch:3d}  l_a {l_a:8.3f}  l_c {l_c:8.3f}  l_q {l_q:8.3f}  "
          "alpha {alpha:.3f}  beta {beta:.3f}".format(**row))

model = result.model
Z = model.embed(g)
print("held-out link AUC:", round(link_prediction_auc(split.test_pos, split.test_neg, Z), 4))
print("micro-F1 at 10% labelled:",
      round(node_classification(Z, g.labels, [0.1], repeats=3)[0]["micro_f1"], 4))

store = export_codes(g, model)
print("codes per node:", store.codes[0].tolist(), f"({store.payload_bytes // g.num_nodes} bytes)")
index = CodeIndex(store)
rec = recommend_top_k(store, index.tables, 0, 10, exclude=g.neighbours[0], index=index)
print("recommended for node 0:", rec.nodes.tolist())
same = np.mean([g.labels[int(n)] == g.labels[0] for n in rec.nodes])
print(f"share from node 0's community: {same:.2f}")

for key, val in storage_report(317080).items():
    print(f"{key}: {val}")
