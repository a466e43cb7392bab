"""Joint optimisation of the structural, rank, semantic and quantisation losses."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import decode_sections, encode_sections
from .graph import (DEFAULT_MAX_HOP, DegenerateGraphError, Graph, LabelPairSampler, PathMatrix,
                    Triplet, qualifying_anchors, sample_triplets, shortest_paths)
from .model import EMBED_DIM, HIDDEN, Encoder, adaptive_margin_loss, attribute_rows, encode, \
    semantic_margin_loss
from .quantiser import (QUANT_HIDDEN, Codebooks, QuantDecoder, QuantEncoder, gumbel_noise,
                        gumbel_softmax, hard_assign, quantisation_loss, rank_loss)

_log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_a", "l_r", "l_c", "l_q", "alpha", "beta", "lr")


class ConfigError(KeyError):
    """Unknown or malformed configuration key."""


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 100
    epochs: int = 50
    tau: float = 1.0
    omega: float = 0.5
    semantic_margin: float = 100.0
    fraction_T: float = 0.10
    M: int = 8
    K: int = 256
    L: int = EMBED_DIM
    seed: int = 0
    margin_mode: str = "adaptive"
    margin_value: float = 50.0
    no_rank_loss: bool = False
    optimizer: str = "sgd"
    momentum: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 100.0
    max_hop: int = DEFAULT_MAX_HOP
    hidden: tuple = HIDDEN
    quant_hidden: tuple = QUANT_HIDDEN

    def __post_init__(self):
        for name in ("lr", "batch_size", "tau", "omega", "semantic_margin", "M", "K", "L",
                     "max_hop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.fraction_T <= 1:
            raise ValueError("fraction_T must be in (0, 1]")
        if self.margin_mode not in ("adaptive", "fixed"):
            raise ValueError("margin_mode must be 'adaptive' or 'fixed'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.quant_hidden = tuple(int(h) for h in self.quant_hidden)

    @property
    def fixed_margin(self) -> float | None:
        return self.margin_value if self.margin_mode == "fixed" else None

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "TrainConfig":
        """Build from string key/values; dotted keys map to underscores (margin.mode)."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in items.items():
            name = key.replace(".", "_")
            if name not in known:
                raise ConfigError(key)
            default = known[name].default
            try:
                kwargs[name] = _coerce(raw, default)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                out[k] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[k] = str(v).lower()
            else:
                out[k] = repr(v) if isinstance(v, float) else str(v)
        return out


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(t) for t in raw.split(",") if t)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- schedules ------------------------------------------------------------------

def schedules(mu: float, omega: float = 0.5) -> tuple[float, float]:
    """Weights (alpha, beta) of the semantic and quantisation losses at progress ``mu``."""
    if not 0.0 <= mu <= 1.0:
        warnings.warn(f"training progress {mu} outside [0, 1]; clamped", stacklevel=2)
        mu = min(max(mu, 0.0), 1.0)
    s = 1.0 / (1.0 + math.exp(-omega * mu))
    return 0.1 * s, 1.0 - s


def one_cycle_lr(step: int, total_steps: int, base_lr: float, warmup: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up from ``base_lr/div`` to ``base_lr``, then cosine decay to ``base_lr/final_div``."""
    if total_steps <= 0:
        return base_lr / div
    start, final = base_lr / div, base_lr / final_div
    peak = warmup * total_steps
    if step <= peak:
        return start + (base_lr - start) * (step / peak if peak else 1.0)
    frac = min((step - peak) / (total_steps - peak), 1.0)
    return final + (base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- model bundle ---------------------------------------------------------------

class Model:
    """Embedding encoder, quantisation encoder/decoder and codebooks."""

    def __init__(self, config: TrainConfig, input_dim: int, identity_input: bool = False):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        self.encoder = Encoder(input_dim, rng, config.hidden, config.L, identity_input)
        self.qenc = QuantEncoder(config.L, config.M, config.K, rng, config.quant_hidden)
        self.qdec = QuantDecoder(config.L, rng, config.quant_hidden)
        self.codebooks = Codebooks(config.M, config.K, config.L, rng)

    @classmethod
    def for_graph(cls, g: Graph, config: TrainConfig) -> "Model":
        if g.attributes is None:
            return cls(config, g.num_nodes, identity_input=True)
        return cls(config, g.attribute_dim)

    @property
    def params(self) -> list[Tensor]:
        return (self.encoder.params + self.qenc.params + self.qdec.params
                + self.codebooks.params)

    def buffers(self) -> dict[str, np.ndarray]:
        out = self.encoder.buffers()
        out.update(self.qenc.buffers())
        out.update(self.qdec.buffers())
        return out

    # serialisation
    def to_bytes(self) -> bytes:
        sections = {p.name: p.value for p in self.params}
        sections.update(self.buffers())
        meta = {"config": self.config.to_mapping(), "input_dim": self.encoder.input_dim,
                "identity_input": self.encoder.identity_input}
        return encode_sections(sections, meta)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Model":
        sections, meta = decode_sections(raw)
        config = TrainConfig.from_mapping(meta["config"])
        m = cls(config, int(meta["input_dim"]), bool(meta["identity_input"]))
        for p in m.params:
            if p.name not in sections:
                raise ValueError(f"checkpoint lacks section {p.name!r}")
            p.assign(sections[p.name])
        for stack in (m.encoder, m.qenc, m.qdec):
            stack.load_buffers(sections)
        return m

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())

    # evaluation-mode inference
    def check_graph(self, g: Graph):
        if self.encoder.identity_input:
            if g.attributes is not None or g.num_nodes != self.encoder.input_dim:
                raise ValueError("checkpoint expects a plain graph with "
                                 f"{self.encoder.input_dim} nodes")
        elif g.attribute_dim != self.encoder.input_dim:
            raise ValueError(f"graph attribute dimension {g.attribute_dim} != checkpoint "
                             f"input dimension {self.encoder.input_dim}")

    def embed(self, g: Graph, nodes=None, chunk: int = 4096) -> np.ndarray:
        """Continuous embeddings (N, L) with running batch-norm statistics."""
        self.check_graph(g)
        nodes = np.arange(g.num_nodes) if nodes is None else np.asarray(nodes)
        out = [encode(self.encoder, attribute_rows(g.attributes, nodes[s:s + chunk]), False).value
               for s in range(0, len(nodes), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.L), np.float32)

    def assignment_probs(self, z: np.ndarray) -> np.ndarray:
        """Noise-free soft assignments (B, M*K)."""
        logits = self.qenc(Tensor(z, dtype=np.float32), False)
        return gumbel_softmax(logits, self.config.M, self.config.tau, hard_eval=True).value

    def codes(self, g: Graph, chunk: int = 4096) -> np.ndarray:
        z = self.embed(g)
        out = [hard_assign(self.assignment_probs(z[s:s + chunk]), self.config.M)
               for s in range(0, len(z), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.M), np.int64)


# -- training -------------------------------------------------------------------

@dataclass
class Batch:
    """One mini-batch: the node rows it touches plus its triplets, pairs and noise."""

    nodes: np.ndarray
    x: object
    triplets: list[Triplet]
    pairs: list[tuple[int, int, bool]]
    noise: np.ndarray
    index: np.ndarray = field(repr=False, default=None)

    def rows(self, ids) -> np.ndarray:
        return self.index[np.asarray(ids, dtype=np.int64)]


def make_batch(g: Graph, triplets, pairs, noise_rng: np.random.Generator, M: int, K: int) -> Batch:
    ids = [t.anchor for t in triplets] + [t.positive for t in triplets] \
        + [t.negative for t in triplets] + [p[0] for p in pairs] + [p[1] for p in pairs]
    nodes = np.unique(np.asarray(ids, dtype=np.int64))
    index = np.full(g.num_nodes, -1, dtype=np.int64)
    index[nodes] = np.arange(len(nodes))
    noise = gumbel_noise((len(nodes), M * K), noise_rng).astype(np.float32)
    return Batch(nodes, attribute_rows(g.attributes, nodes), list(triplets), list(pairs), noise,
                 index)


@dataclass
class TrainState:
    step: int
    total_steps: int
    velocity: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


ADAM_EPS = 1e-8


def apply_update(p: Tensor, cfg: TrainConfig, state: TrainState, lr: float):
    """SGD with momentum, or Adam with ``momentum``/``beta2`` as its decay rates."""
    g = p.grad
    v = state.velocity.get(p.name)
    if cfg.optimizer == "sgd":
        v = g if v is None else cfg.momentum * v + g
        state.velocity[p.name] = v
        p.assign(p.value - lr * v)
        return
    s = state.second.get(p.name)
    v = (1 - cfg.momentum) * g if v is None else cfg.momentum * v + (1 - cfg.momentum) * g
    s = (1 - cfg.beta2) * g * g if s is None else cfg.beta2 * s + (1 - cfg.beta2) * g * g
    state.velocity[p.name], state.second[p.name] = v, s
    t = state.step + 1
    vhat = v / (1 - cfg.momentum ** t)
    shat = s / (1 - cfg.beta2 ** t)
    p.assign(p.value - lr * vhat / (np.sqrt(shat) + ADAM_EPS))


def batch_losses(model: Model, batch: Batch, alpha: float, beta: float) -> dict[str, Tensor]:
    """Forward pass in training mode; records onto the active tape."""
    cfg = model.config
    z = encode(model.encoder, batch.x, training=True)
    l_a = adaptive_margin_loss(z, batch.triplets, batch.index, cfg.fixed_margin)
    logits = model.qenc(z, True)
    u = gumbel_softmax(logits, cfg.M, cfg.tau, noise=batch.noise)
    l_q = quantisation_loss(z, u, model.codebooks, model.qdec, training=True)
    zero = ad.scale(l_a, 0.0)
    if cfg.no_rank_loss:
        l_r = zero
    else:
        codes = hard_assign(u, cfg.M)
        a = batch.rows([t.anchor for t in batch.triplets])
        p = batch.rows([t.positive for t in batch.triplets])
        n = batch.rows([t.negative for t in batch.triplets])
        l_r = rank_loss(ad.take_rows(u, a), codes[p], codes[n], cfg.K)
    if batch.pairs:
        l_c = semantic_margin_loss(z, batch.pairs, cfg.semantic_margin, batch.index)
    else:
        l_c = zero
    total = ad.add(ad.add(l_a, l_r), ad.add(ad.scale(l_c, alpha), ad.scale(l_q, beta)))
    return {"total": total, "l_a": l_a, "l_r": l_r, "l_c": l_c, "l_q": l_q}


def train_step(model: Model, batch: Batch, state: TrainState) -> dict[str, float]:
    """One optimiser update; returns the loss breakdown before the update."""
    cfg = model.config
    mu = min(state.step / state.total_steps, 1.0) if state.total_steps else 0.0
    alpha, beta = schedules(mu, cfg.omega)
    lr = one_cycle_lr(state.step, state.total_steps, cfg.lr)
    params = model.params
    for p in params:
        p.zero_grad()
    try:
        with Tape() as tape:
            parts = batch_losses(model, batch, alpha, beta)
    except FloatingPointError as exc:
        raise TrainingAborted(f"non-finite forward pass at step {state.step}: {exc}") from exc
    record = {k: v.item() for k, v in parts.items()}
    if not all(math.isfinite(v) for v in record.values()):
        raise TrainingAborted(f"non-finite loss at step {state.step}: {record}")
    ad.backward(tape, parts["total"])
    live = [p for p in params if p.grad is not None]
    gnorm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in live))
    if cfg.clip_norm > 0 and gnorm > cfg.clip_norm:
        for p in live:
            p.grad = p.grad * np.float32(cfg.clip_norm / gnorm)
    for p in live:
        apply_update(p, cfg, state, lr)
    state.step += 1
    record.update(alpha=alpha, beta=beta, lr=lr, grad_norm=gnorm)
    return record


@dataclass
class FitResult:
    model: Model
    epoch_log: list[dict] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.epoch_log:
                w.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def _fmt(v):
    return v if isinstance(v, int) else f"{v:.9g}"


def fit(g: Graph, config: TrainConfig, pm: PathMatrix | None = None, model: Model | None = None,
        validation=None, patience: int | None = None, progress=None) -> FitResult:
    """Train on ``g``.

    ``validation`` is an optional callable ``model -> score`` (higher is better)
    evaluated after each epoch; with ``patience`` set, training stops once the
    score has not improved for that many epochs.
    """
    if pm is None:
        pm = shortest_paths(g, config.max_hop)
    valid = qualifying_anchors(pm)
    if len(valid) == 0:
        raise DegenerateGraphError("degenerate graph: no valid triplet")
    if model is None:
        model = Model.for_graph(g, config)
    rng = np.random.default_rng([config.seed, 1])
    pair_sampler = None
    if g.labels is not None and any(g.labels):
        pair_sampler = LabelPairSampler(g, config.fraction_T, rng)
    n = g.num_nodes
    per_epoch = max(1, math.ceil(n / config.batch_size))
    state = TrainState(0, per_epoch * config.epochs)
    result = FitResult(model)
    best, stale = -math.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("l_a", "l_r", "l_c", "l_q"), 0.0)
        steps = 0
        for start in range(0, n, config.batch_size):
            anchors = order[start:start + config.batch_size]
            triplets = sample_triplets(pm, anchors, rng, valid)
            pairs = pair_sampler.sample(max(1, config.batch_size // 2), rng) if pair_sampler else []
            batch = make_batch(g, triplets, pairs, rng, config.M, config.K)
            if len(batch.nodes) < 2:
                continue
            rec = train_step(model, batch, state)
            result.step_log.append(rec)
            for k in sums:
                sums[k] += rec[k]
            steps += 1
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()},
               "alpha": rec["alpha"], "beta": rec["beta"], "lr": rec["lr"]}
        result.epoch_log.append(row)
        _log.info("epoch %d l_a=%.4f l_r=%.4f l_c=%.4f l_q=%.4f", epoch, row["l_a"], row["l_r"],
                  row["l_c"], row["l_q"])
        if progress is not None:
            progress(row)
        if validation is not None:
            score = validation(model)
            row["val"] = score
            if score > best:
                best, stale = score, 0
            else:
                stale += 1
                if patience is not None and stale >= patience:
                    _log.info("early stop after epoch %d (best %.4f)", epoch, best)
                    break
    return result
