"""Evaluation protocols: link prediction AUC, node classification, path prediction
and node recommendation NDCG, plus the one-vs-rest logistic regression they use."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .graph import INF, Graph, PathMatrix

_log = logging.getLogger(__name__)

PATH_CLASSES = ("1", "2", "3", "4", "no")


# -- metrics --------------------------------------------------------------------

def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def dcg(relevance) -> float:
    rel = np.asarray(relevance, dtype=np.float64)
    return float((rel / np.log2(np.arange(2, len(rel) + 2))).sum())


def ndcg_at_k(ranked_relevance, num_relevant: int, k: int) -> float:
    """NDCG of a binary-relevance ranking truncated at ``k`` (or the list length)."""
    rel = np.asarray(ranked_relevance, dtype=np.float64)[:k]
    ideal = dcg(np.ones(min(num_relevant, len(rel), k)))
    return dcg(rel) / ideal if ideal > 0 else 0.0


def f1_scores(y_true, y_pred, classes) -> tuple[float, float, np.ndarray]:
    """Macro-F1, micro-F1 and per-class F1 for single-label predictions."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    per = np.zeros(len(classes))
    tp_all = fp_all = fn_all = 0
    for k, c in enumerate(classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        per[k] = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    micro = 2 * tp_all / (2 * tp_all + fp_all + fn_all) if tp_all + fp_all + fn_all else 0.0
    return float(per.mean()), float(micro), per


# -- logistic regression --------------------------------------------------------

@dataclass
class LRClassifier:
    """One-vs-rest logistic regression over standardised features."""

    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    iterations: int

    def scores(self, features) -> np.ndarray:
        X = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return X @ self.weights + self.bias


def lr_fit(features, labels, l2=1e-4, lr=0.1, max_iter=2000, tol=1e-5, seed=0) -> LRClassifier:
    """Full-batch gradient descent on the per-class logistic losses.

    Stops when the gradient norm falls below ``tol`` or after ``max_iter``
    iterations.  Weights start at zero, so ``seed`` only matters for API
    symmetry with the other protocols.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("features must be a non-empty 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("NaN or infinite values in features")
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    n, d = Xs.shape
    Y = (y[:, None] == classes[None, :]).astype(np.float64)
    W = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    it = 0
    for it in range(1, max_iter + 1):
        P = 1.0 / (1.0 + np.exp(-(Xs @ W + b)))
        G = P - Y
        gW = Xs.T @ G / n + l2 * W
        gb = G.mean(axis=0)
        if np.sqrt((gW ** 2).sum() + (gb ** 2).sum()) < tol:
            break
        W -= lr * gW
        b -= lr * gb
    return LRClassifier(classes, W, b, mean, scale, it)


def lr_predict(model: LRClassifier, features) -> np.ndarray:
    return model.classes[np.argmax(model.scores(features), axis=1)]


# -- link prediction ------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    val_edge_fraction: float = 0.05
    test_edge_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.val_edge_fraction < 0 or self.test_edge_fraction <= 0 \
                or self.val_edge_fraction + self.test_edge_fraction >= 1:
            raise ValueError("edge fractions must be non-negative and sum below 1")


@dataclass
class EdgeSplit:
    train_graph: Graph
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray


def sample_non_edges(g: Graph, count: int, rng: np.random.Generator, exclude=()) -> np.ndarray:
    """Uniform node pairs (i < j) that are not edges of ``g`` and not in ``exclude``."""
    seen = {(int(i), int(j)) for i, j in exclude}
    n = g.num_nodes
    if count > n * (n - 1) // 2 - g.num_edges - len(seen):
        raise ValueError(f"cannot draw {count} distinct non-edges")
    out = []
    while len(out) < count:
        i, j = (int(v) for v in rng.integers(g.num_nodes, size=2))
        if i == j:
            continue
        i, j = min(i, j), max(i, j)
        if (i, j) in seen or g.has_edge(i, j):
            continue
        seen.add((i, j))
        out.append((i, j))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def split_edges(g: Graph, split: SplitSpec = SplitSpec()) -> EdgeSplit:
    """Hold out validation/test edges and draw one non-edge per held-out edge."""
    rng = np.random.default_rng(split.seed)
    E = g.edges()
    perm = rng.permutation(len(E))
    n_test = int(round(split.test_edge_fraction * len(E)))
    n_val = int(round(split.val_edge_fraction * len(E)))
    if n_test == 0:
        raise ValueError("no held-out test edges")
    test = E[perm[:n_test]]
    val = E[perm[n_test:n_test + n_val]]
    train = E[perm[n_test + n_val:]]
    train_graph = g.with_edges(train)
    before = sum(1 for nb in g.neighbours if len(nb) == 0)
    after = sum(1 for nb in train_graph.neighbours if len(nb) == 0)
    if after > before:
        _log.info("edge split isolated %d additional nodes", after - before)
    test_neg = sample_non_edges(g, len(test), rng)
    val_neg = sample_non_edges(g, len(val), rng, exclude=test_neg)
    return EdgeSplit(train_graph, val, val_neg, test, test_neg)


def l2_pair_scores(embeddings: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Negative Euclidean distance of each pair."""
    Z = np.asarray(embeddings, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    return -np.linalg.norm(Z[pairs[:, 0]] - Z[pairs[:, 1]], axis=1)


def link_prediction_auc(pos_pairs, neg_pairs, embeddings=None, scorer=None) -> float:
    """AUC of held-out edges against non-edges.

    Pairs are scored by ``scorer(pairs)`` when given (e.g. code similarity),
    otherwise by negative L2 distance between ``embeddings`` rows.
    """
    pos_pairs = np.asarray(pos_pairs).reshape(-1, 2)
    if len(pos_pairs) == 0:
        raise ValueError("no held-out edges")
    if scorer is None:
        def scorer(p):
            return l2_pair_scores(embeddings, p)
    return auc(scorer(pos_pairs), scorer(np.asarray(neg_pairs).reshape(-1, 2)))


# -- node classification ----------------------------------------------------------

def _primary_labels(labels) -> np.ndarray:
    """One class per node: the smallest label id (-1 for unlabelled)."""
    out = np.full(len(labels), -1, dtype=np.int64)
    for i, ls in enumerate(labels):
        if ls:
            out[i] = min(ls)
    return out


def node_classification(embeddings, labels, train_fractions=(0.02, 0.04, 0.06, 0.08, 0.10),
                        repeats: int = 10, seed: int = 0, max_redraws: int = 100) -> list[dict]:
    """Mean macro/micro F1 of one-vs-rest LR per training fraction.

    ``labels`` is a per-node sequence of label sets (first label is used) or an
    integer class array; unlabelled nodes are ignored.
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels) if isinstance(labels, np.ndarray) else _primary_labels(labels)
    nodes = np.flatnonzero(y >= 0)
    classes = np.unique(y[nodes])
    if len(classes) < 2:
        raise ValueError("node classification needs at least two classes")
    results = []
    for frac in train_fractions:
        n_train = max(2, int(round(frac * len(nodes))))
        macro, micro = [], []
        for rep in range(repeats):
            rng = np.random.default_rng([seed, rep, int(round(frac * 1e6))])
            for _ in range(max_redraws):
                perm = rng.permutation(nodes)
                tr, te = perm[:n_train], perm[n_train:]
                if len(np.unique(y[tr])) == len(classes):
                    break
            else:
                raise ValueError(f"could not draw a training set covering all classes at "
                                 f"fraction {frac}")
            clf = lr_fit(Z[tr], y[tr], seed=seed)
            ma, mi, _ = f1_scores(y[te], lr_predict(clf, Z[te]), classes)
            macro.append(ma)
            micro.append(mi)
        results.append({"train_fraction": frac, "macro_f1": float(np.mean(macro)),
                        "micro_f1": float(np.mean(micro))})
    return results


# -- path prediction ------------------------------------------------------------

def path_classes(pm: PathMatrix, pairs) -> np.ndarray:
    """Class index 0..3 for hop counts 1..4, 4 for longer or disconnected pairs."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pm.max_hop < 4:
        raise ValueError("path classes need hop distances up to 4")
    d = np.array([pm.row(i)[j] for i, j in pairs], dtype=np.int64)
    if np.any(d == 0):
        raise ValueError("path classes are defined for distinct nodes only")
    return np.where((d >= 1) & (d <= 4), d - 1, 4)


def path_pairs(pm: PathMatrix, pairs_per_class: int, rng: np.random.Generator,
               no_class_cap: float = 2.0, drop_empty: bool = False):
    """Sample node pairs (i < j) per path class.

    Returns ``(pairs, classes, present)`` where ``present`` lists the class
    indices that have at least one pair.
    """
    n = pm.num_nodes
    if pm.is_dense:
        iu, ju = np.triu_indices(n, k=1)
        cls = path_classes(pm, np.stack([iu, ju], axis=1)) if len(iu) else np.zeros(0, int)
    else:
        raise ValueError("path prediction needs a dense path matrix")
    chosen, labels, present = [], [], []
    for c, name in enumerate(PATH_CLASSES):
        idx = np.flatnonzero(cls == c)
        quota = int(pairs_per_class * (no_class_cap if name == "no" else 1))
        if len(idx) == 0:
            if drop_empty:
                _log.warning("path class %r has no pairs; dropped", name)
                continue
            raise ValueError(f"path class {name!r} has no node pairs")
        if len(idx) < quota:
            _log.warning("path class %r: only %d of %d pairs available", name, len(idx), quota)
        take = rng.choice(idx, size=min(quota, len(idx)), replace=False)
        chosen.append(np.stack([iu[take], ju[take]], axis=1))
        labels.append(np.full(len(take), c))
        present.append(c)
    return np.concatenate(chosen), np.concatenate(labels), present


def path_prediction(embeddings, pm: PathMatrix, train_ratio: float = 0.8,
                    pairs_per_class: int = 1000, seed: int = 0, drop_empty: bool = False) -> dict:
    """5-class path-length prediction from the elementwise product of node embeddings.

    Returns macro/micro F1, their mean, and per-class F1 keyed by class name.
    """
    if not 0 < train_ratio < 1:
        raise ValueError("train_ratio must be in (0, 1)")
    Z = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pairs, y, present = path_pairs(pm, pairs_per_class, rng, drop_empty=drop_empty)
    feats = Z[pairs[:, 0]] * Z[pairs[:, 1]]
    perm = rng.permutation(len(y))
    n_train = int(round(train_ratio * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    clf = lr_fit(feats[tr], y[tr], seed=seed)
    macro, micro, per = f1_scores(y[te], lr_predict(clf, feats[te]), present)
    return {"train_ratio": train_ratio, "macro_f1": macro, "micro_f1": micro,
            "mean_f1": (macro + micro) / 2,
            "per_class": {PATH_CLASSES[c]: float(f) for c, f in zip(present, per)}}


# -- node recommendation --------------------------------------------------------

@dataclass
class NeighbourSplit:
    train_graph: Graph
    held_out: list[np.ndarray]


def split_neighbours(g: Graph, holdout: float = 0.10, seed: int = 0) -> NeighbourSplit:
    """Hold out ``holdout`` of each node's incident edges for testing.

    Each undirected edge is assigned once (to a random endpoint's test set) so
    the training graph stays symmetric; a held-out edge is relevant for both
    endpoints.
    """
    rng = np.random.default_rng(seed)
    E = g.edges()
    test_mask = rng.random(len(E)) < holdout
    train_graph = g.with_edges(E[~test_mask])
    held = [[] for _ in range(g.num_nodes)]
    for i, j in E[test_mask]:
        held[i].append(j)
        held[j].append(i)
    return NeighbourSplit(train_graph, [np.array(sorted(h), dtype=np.int64) for h in held])


def node_recommendation_ndcg(split: NeighbourSplit, score_fn, k: int = 50,
                             nodes=None) -> tuple[float, int]:
    """Mean NDCG@k over nodes with held-out neighbours; also returns the count excluded.

    ``score_fn(i)`` returns similarity scores of node ``i`` against all nodes.
    Candidates are all nodes except ``i`` and its training neighbours; ties in
    score are broken by node id.
    """
    g = split.train_graph
    nodes = range(g.num_nodes) if nodes is None else nodes
    vals, excluded = [], 0
    for i in nodes:
        rel_set = split.held_out[i]
        if len(rel_set) == 0:
            excluded += 1
            continue
        s = np.asarray(score_fn(i), dtype=np.float64)
        mask = np.ones(g.num_nodes, dtype=bool)
        mask[i] = False
        mask[g.neighbours[i]] = False
        cand = np.flatnonzero(mask)
        order = cand[np.lexsort((cand, -s[cand]))][:k]
        rel = np.isin(order, rel_set).astype(np.float64)
        vals.append(ndcg_at_k(rel, len(rel_set), k))
    if excluded:
        _log.info("NDCG: %d nodes without held-out neighbours excluded", excluded)
    if not vals:
        raise ValueError("no node has held-out neighbours")
    return float(np.mean(vals)), excluded


def l2_score_fn(embeddings):
    Z = np.asarray(embeddings, dtype=np.float64)
    return lambda i: -np.linalg.norm(Z - Z[i], axis=1)
