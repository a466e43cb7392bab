"""Command-line entry point: ``netquant {synth,train,encode,recommend,evaluate,bench}``.

Exit codes: 0 success, 2 usage or input/config problems, 3 runtime failures.
Graphs are read from a directory holding ``edges.txt`` and, optionally,
``attributes.txt`` and ``labels.txt`` (the layout ``synth`` writes), or from
explicit ``--edges/--attributes/--labels`` files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .codestore import (CodeIndex, CodeStore, benchmark, build_tables, export_codes,
                        pair_similarities, recommend_top_k, reconstruct_embeddings,
                        storage_report)
from .evalsuite import (PATH_CLASSES, SplitSpec, l2_score_fn, link_prediction_auc,
                        node_classification, node_recommendation_ndcg, path_prediction,
                        split_edges, split_neighbours)
from .graph import Graph, PathMatrix, load_graph, shortest_paths, write_graph
from .synth import sbm_graph
from .trainer import ConfigError, Model, TrainConfig, TrainingAborted, fit, parse_config_text

_log = logging.getLogger("netquant")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
GRAPH_FILES = ("edges.txt", "attributes.txt", "labels.txt")
PROTOCOLS = ("link", "classify", "path", "ndcg")
VARIANTS = ("continuous", "discrete")


class UsageError(Exception):
    """Bad input detected by the CLI itself (exit 2)."""


# -- manifests ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance of one ``train`` run; written before any other artifact."""

    config: dict
    seed: int
    inputs: dict
    options: dict = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def same_run(self, other: "RunManifest") -> bool:
        return (self.config, self.seed, self.inputs, self.options) == \
            (other.config, other.seed, other.inputs, other.options)

    def outputs_intact(self, directory: Path) -> bool:
        if not self.finished or not self.outputs:
            return False
        return all((directory / name).exists() and sha256_file(directory / name) == digest
                   for name, digest in self.outputs.items())


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- graph arguments ------------------------------------------------------------

def _add_graph_args(p: argparse.ArgumentParser):
    p.add_argument("--graph", type=Path, help="directory with edges.txt [attributes.txt labels.txt]")
    p.add_argument("--edges", type=Path)
    p.add_argument("--attributes", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--num-nodes", type=int)


def _graph_files(args) -> tuple[Path, Path | None, Path | None]:
    if args.graph is not None:
        if args.edges is not None:
            raise UsageError("give either --graph or --edges, not both")
        e, a, lab = (args.graph / name for name in GRAPH_FILES)
        if not e.exists():
            raise UsageError(f"{e} not found")
        return e, a if a.exists() else None, lab if lab.exists() else None
    if args.edges is None:
        raise UsageError("a graph is required (--graph DIR or --edges FILE)")
    for f in (args.edges, args.attributes, args.labels):
        if f is not None and not f.exists():
            raise UsageError(f"{f} not found")
    return args.edges, args.attributes, args.labels


def _load_graph(args) -> tuple[Graph, list[Path]]:
    files = _graph_files(args)
    g = load_graph(*files, num_nodes=args.num_nodes)
    return g, [f for f in files if f is not None]


def _load_model(path: Path) -> Model:
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    return Model.load(path)


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    g = sbm_graph(args.nodes, args.communities, args.p_in, args.p_out, args.attr_dim,
                  args.attr_on, args.attr_noise, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    e, a, lab = (args.out / name for name in GRAPH_FILES)
    write_graph(g, e, a if g.attributes is not None else None, lab)
    print(f"wrote {g.num_nodes} nodes, {g.num_edges} edges to {args.out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _config_from_args(args) -> TrainConfig:
    items = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        items.update(parse_config_text(args.config.read_text()))
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    return TrainConfig.from_mapping(items)


def training_graph(g: Graph, split: str | None, seed: int, holdout: float) -> Graph:
    if split == "link":
        return split_edges(g, SplitSpec(seed=seed)).train_graph
    if split == "ndcg":
        return split_neighbours(g, holdout, seed).train_graph
    return g


def _path_matrix(g: Graph, max_hop: int, cache: Path | None) -> PathMatrix:
    if cache is not None and cache.exists():
        pm = PathMatrix.load(cache)
        if pm.num_nodes != g.num_nodes or pm.max_hop != max_hop:
            raise UsageError(f"path cache {cache} does not match the graph or max_hop")
        return pm
    pm = shortest_paths(g, max_hop)
    if cache is not None:
        pm.save(cache)
    return pm


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    g, files = _load_graph(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    options = {"split": args.split, "split_seed": args.split_seed, "holdout": args.holdout}
    manifest = RunManifest(cfg.to_mapping(), cfg.seed,
                           {str(f): sha256_file(f) for f in files}, options)
    mpath = out / "manifest.json"
    if args.resume and mpath.exists():
        previous = RunManifest.load(mpath)
        if not previous.same_run(manifest):
            raise UsageError(f"{mpath} was written for different inputs or configuration")
        if previous.outputs_intact(out):
            print(f"outputs in {out} are up to date")
            return EXIT_OK
        _log.info("previous run incomplete; training again")
    manifest.started = _now()
    manifest.save(mpath)

    train_g = training_graph(g, args.split, args.split_seed, args.holdout)
    pm = _path_matrix(train_g, cfg.max_hop, args.path_cache)

    def progress(row):
        _log.info("epoch %d  l_a %.4f  l_r %.4f  l_c %.4f  l_q %.4f", row["epoch"], row["l_a"],
                  row["l_r"], row["l_c"], row["l_q"])

    result = fit(train_g, cfg, pm=pm, progress=progress)
    result.model.save(out / "model.nqck")
    result.write_log(out / "train_log.csv")
    manifest.finished = _now()
    manifest.outputs = {n: sha256_file(out / n) for n in ("model.nqck", "train_log.csv")}
    manifest.save(mpath)
    print(f"checkpoint {out / 'model.nqck'}")
    return EXIT_OK


# -- encode ---------------------------------------------------------------------

def _print_storage(rep: dict):
    for k, v in rep.items():
        print(f"{k}\t{v:.6g}" if isinstance(v, float) else f"{k}\t{v}")


def cmd_encode(args) -> int:
    model = _load_model(args.checkpoint)
    g, _ = _load_graph(args)
    store = export_codes(g, model)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    store.save(args.out)
    print(f"codes {args.out}  N={store.N} M={store.M} K={store.K} L={store.L}")
    _print_storage(storage_report(store.N, store.M, store.K, store.L))
    return EXIT_OK


# -- recommend ------------------------------------------------------------------

def _load_store(path: Path) -> CodeStore:
    if not path.exists():
        raise UsageError(f"code store {path} not found")
    return CodeStore.load(path)


def cmd_recommend(args) -> int:
    store = _load_store(args.codes)
    exclude = set(int(x) for x in args.exclude.split(",") if x) if args.exclude else set()
    if args.graph is not None or args.edges is not None:
        g, _ = _load_graph(args)
        if g.num_nodes != store.N:
            raise UsageError("graph and code store disagree on the node count")
        exclude.update(int(j) for j in g.neighbours[args.query])
    rec = recommend_top_k(store, build_tables(store.codebooks), args.query, args.k, exclude)
    if rec.truncated:
        print(f"warning: only {len(rec.nodes)} candidates for k={args.k}", file=sys.stderr)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        fh.write("rank\tnode_id\tscore\n")
        for r, (n, s) in enumerate(zip(rec.nodes, rec.scores), 1):
            fh.write(f"{r}\t{n}\t{s:.9g}\n")
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# -- evaluate -------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


class _Representations:
    """Lazily computed continuous embeddings, codes and reconstructions of one graph."""

    def __init__(self, g: Graph, model: Model | None, store: CodeStore | None):
        self.g, self.model, self._store = g, model, store
        self._Z = self._R = self._T = None

    @property
    def continuous(self) -> np.ndarray:
        if self._Z is None:
            if self.model is None:
                raise UsageError("continuous variant needs --checkpoint")
            self._Z = self.model.embed(self.g)
        return self._Z

    @property
    def store(self) -> CodeStore:
        if self._store is None:
            if self.model is None:
                raise UsageError("discrete variant needs --codes or --checkpoint")
            self._store = export_codes(self.g, self.model)
        if self._store.N != self.g.num_nodes:
            raise UsageError("code store and graph disagree on the node count")
        return self._store

    @property
    def tables(self) -> np.ndarray:
        if self._T is None:
            self._T = build_tables(self.store.codebooks)
        return self._T

    @property
    def reconstructed(self) -> np.ndarray:
        if self._R is None:
            self._R = reconstruct_embeddings(self.store)
        return self._R

    def embeddings(self, variant: str) -> np.ndarray:
        return self.continuous if variant == "continuous" else self.reconstructed


def evaluate_link(rep: _Representations, variants, seed: int) -> list[list]:
    split = split_edges(rep.g, SplitSpec(seed=seed))
    rows = []
    for v in variants:
        if v == "continuous":
            score = link_prediction_auc(split.test_pos, split.test_neg, rep.continuous)
        else:
            score = link_prediction_auc(split.test_pos, split.test_neg,
                                        scorer=lambda p: pair_similarities(rep.store, rep.tables, p))
        rows.append([v, score])
    return rows


def evaluate_classify(rep: _Representations, variants, fractions, repeats, seed) -> list[list]:
    if rep.g.labels is None or sum(1 for ls in rep.g.labels if ls) < 2:
        raise UsageError("node classification needs a labelled graph (--labels)")
    rows = []
    for v in variants:
        for r in node_classification(rep.embeddings(v), rep.g.labels, [f / 100 for f in fractions],
                                     repeats=repeats, seed=seed):
            rows.append([v, r["train_fraction"], r["macro_f1"], r["micro_f1"]])
    return rows


def evaluate_path(rep: _Representations, variants, ratios, pairs_per_class, seed,
                  drop_empty) -> tuple[list[list], list[list]]:
    pm = shortest_paths(rep.g, 4)  # classes only distinguish hops 1..4
    grid, per_class = [], []
    for v in variants:
        results = [path_prediction(rep.embeddings(v), pm, r / 100, pairs_per_class, seed,
                                   drop_empty) for r in ratios]
        for metric in ("macro_f1", "micro_f1", "mean_f1"):
            grid.append([v, metric] + [res[metric] for res in results])
        for r, res in zip(ratios, results):
            for name in PATH_CLASSES:
                if name in res["per_class"]:
                    per_class.append([v, r, name, res["per_class"][name]])
    return grid, per_class


def evaluate_ndcg(rep: _Representations, variants, holdout, k, seed) -> list[list]:
    split = split_neighbours(rep.g, holdout, seed)
    rows = []
    for v in variants:
        if v == "continuous":
            score_fn = l2_score_fn(rep.continuous)
        else:
            score_fn = CodeIndex(rep.store, rep.tables).scores
        mean, excluded = node_recommendation_ndcg(split, score_fn, k)
        if excluded:
            _log.warning("ndcg: %d nodes without held-out neighbours excluded", excluded)
        rows.append([v, mean, excluded])
    return rows


def cmd_evaluate(args) -> int:
    if args.checkpoint is None and args.codes is None:
        raise UsageError("evaluate needs --checkpoint and/or --codes")
    model = _load_model(args.checkpoint) if args.checkpoint else None
    store = _load_store(args.codes) if args.codes else None
    g, _ = _load_graph(args)
    protocols = [p for item in args.protocol for p in item.split(",") if p]
    for p in protocols:
        if p not in PROTOCOLS:
            raise UsageError(f"unknown protocol {p!r}; choose from {', '.join(PROTOCOLS)}")
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    rep = _Representations(g, model, store)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    if "link" in protocols:
        rows = evaluate_link(rep, variants, args.split_seed)
        _write_csv(out / "link.csv", ["variant", "auc"], rows)
        summary += [["link", v, "auc", s] for v, s in rows]
    if "classify" in protocols:
        rows = evaluate_classify(rep, variants, args.train_fractions, args.repeats, args.seed)
        _write_csv(out / "classify.csv", ["variant", "train_fraction", "macro_f1", "micro_f1"],
                   rows)
        summary += [["classify", v, f"micro_f1@{f:g}", mi] for v, f, _, mi in rows]
    if "path" in protocols:
        grid, per_class = evaluate_path(rep, variants, args.train_ratios, args.pairs_per_class,
                                        args.seed, args.drop_empty_classes)
        _write_csv(out / "path.csv", ["variant", "metric"] + [str(r) for r in args.train_ratios],
                   grid)
        _write_csv(out / "path_per_class.csv", ["variant", "train_ratio", "class", "f1"],
                   per_class)
        summary += [["path", row[0], f"{row[1]}@{r}", val] for row in grid
                    for r, val in zip(args.train_ratios, row[2:])]
    if "ndcg" in protocols:
        rows = evaluate_ndcg(rep, variants, args.holdout, args.k, args.split_seed)
        _write_csv(out / "ndcg.csv", ["variant", f"ndcg@{args.k}", "excluded"], rows)
        summary += [["ndcg", v, f"ndcg@{args.k}", s] for v, s, _ in rows]
    _write_csv(out / "summary.csv", ["protocol", "variant", "metric", "value"], summary)
    for row in summary:
        print("\t".join(_fmt(v) for v in row))
    return EXIT_OK


# -- bench ----------------------------------------------------------------------

def synthetic_store(N: int, seed: int, M=8, K=256, L=128) -> tuple[CodeStore, np.ndarray]:
    """Random codes plus matching float embeddings for timing at arbitrary scale."""
    rng = np.random.default_rng(seed)
    books = rng.normal(0, 1 / np.sqrt(L), (M, K, L)).astype(np.float32)
    codes = rng.integers(0, K, size=(N, M))
    Z = books[np.arange(M), codes].sum(axis=1)
    return CodeStore(codes, books), Z


def cmd_bench(args) -> int:
    if args.queries < 1:
        raise UsageError("bench needs at least one query")
    if args.synthetic:
        store, Z = synthetic_store(args.synthetic, args.seed)
    else:
        if args.codes is None or args.checkpoint is None:
            raise UsageError("bench needs --codes and --checkpoint with a graph, or --synthetic N")
        store = _load_store(args.codes)
        g, _ = _load_graph(args)
        Z = _load_model(args.checkpoint).embed(g)
        if len(Z) != store.N:
            raise UsageError("code store and embeddings disagree on the node count")
    rng = np.random.default_rng(args.seed)
    queries = rng.integers(0, store.N, size=args.queries)
    timing = benchmark(CodeIndex(store), Z, queries, repeat=args.repeat)
    report = {"N": store.N, **timing, **storage_report(store.N, store.M, store.K, store.L)}
    print(json.dumps(report, indent=2))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netquant", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"netquant {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded stochastic-block-model graph")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--nodes", type=int, default=1000)
    s.add_argument("--communities", type=int, default=5)
    s.add_argument("--p-in", type=float, default=0.1)
    s.add_argument("--p-out", type=float, default=0.005)
    s.add_argument("--attr-dim", type=int, default=300)
    s.add_argument("--attr-on", type=float, default=0.2)
    s.add_argument("--attr-noise", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train embeddings and codes")
    _add_graph_args(t)
    t.add_argument("--config", type=Path, help="flat key=value file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--split", choices=("link", "ndcg"),
                   help="train on the graph with held-out edges removed")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--holdout", type=float, default=0.10)
    t.add_argument("--path-cache", type=Path, help="NQPM file to reuse or create")
    t.add_argument("--resume", action="store_true",
                   help="skip training if the manifest and outputs already match")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="export packed codes of every node")
    _add_graph_args(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_encode)

    r = sub.add_parser("recommend", help="top-k nodes by code similarity (TSV)")
    _add_graph_args(r)
    r.add_argument("--codes", type=Path, required=True)
    r.add_argument("--query", type=int, required=True)
    r.add_argument("--k", type=int, default=10)
    r.add_argument("--exclude", help="comma-separated node ids to skip")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_recommend)

    v = sub.add_parser("evaluate", help="run evaluation protocols")
    _add_graph_args(v)
    v.add_argument("--checkpoint", type=Path)
    v.add_argument("--codes", type=Path)
    v.add_argument("--protocol", action="append", required=True,
                   help="link, classify, path or ndcg (repeatable, comma-separated)")
    v.add_argument("--variants", default="continuous,discrete")
    v.add_argument("--train-ratios", type=_int_list, default=[20, 40, 60, 80],
                   help="path prediction training percentages")
    v.add_argument("--train-fractions", type=_int_list, default=[2, 4, 6, 8, 10],
                   help="classification training percentages")
    v.add_argument("--repeats", type=int, default=10)
    v.add_argument("--pairs-per-class", type=int, default=1000)
    v.add_argument("--drop-empty-classes", action="store_true",
                   help="skip path classes with no node pairs instead of failing")
    v.add_argument("--k", type=int, default=50)
    v.add_argument("--holdout", type=float, default=0.10)
    v.add_argument("--split-seed", type=int, default=0)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", type=Path, required=True)
    v.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="retrieval latency and storage")
    _add_graph_args(b)
    b.add_argument("--codes", type=Path)
    b.add_argument("--checkpoint", type=Path)
    b.add_argument("--synthetic", type=int, metavar="N", help="time a random store of N nodes")
    b.add_argument("--queries", type=int, default=20)
    b.add_argument("--repeat", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = exc.args[0] if exc.args else exc
        print(f"error: invalid config key {key}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, CheckpointError, FileNotFoundError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, MemoryError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
