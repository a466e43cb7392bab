"""Attribute encoder and the two continuous-space losses (structural and semantic)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .graph import Triplet

EMBED_DIM = 128
HIDDEN = (512, 256)
SEMANTIC_MARGIN = 100.0


class DenseBlock:
    """Dense layer, optionally followed by batch-norm and ReLU."""

    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                 norm: bool = True, lookup: bool = False, dtype=ad.DEFAULT_DTYPE):
        self.name = name
        self.lookup = lookup
        std = np.sqrt(2.0 / (1 if lookup else fan_in))
        self.w = Tensor(rng.normal(0.0, std, (fan_in, fan_out)), True, f"{name}.w", dtype)
        self.b = Tensor(np.zeros((1, fan_out)), True, f"{name}.b", dtype)
        self.norm = norm
        if norm:
            self.gamma = Tensor(np.ones((1, fan_out)), True, f"{name}.gamma", dtype)
            self.beta = Tensor(np.zeros((1, fan_out)), True, f"{name}.beta", dtype)
            self.bn = BatchNormState(fan_out, dtype)

    @property
    def params(self) -> list[Tensor]:
        return [self.w, self.b] + ([self.gamma, self.beta] if self.norm else [])

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.norm:
            return {}
        return {f"{self.name}.bn_mean": self.bn.mean, f"{self.name}.bn_var": self.bn.var}

    def load_buffers(self, bufs):
        if self.norm:
            self.bn.mean = bufs[f"{self.name}.bn_mean"].copy()
            self.bn.var = bufs[f"{self.name}.bn_var"].copy()

    def __call__(self, x, training: bool) -> Tensor:
        h = ad.embedding_dense(x, self.w, self.b) if self.lookup else ad.dense(x, self.w, self.b)
        if self.norm:
            h = ad.relu(ad.batchnorm(h, self.gamma, self.beta, self.bn, training))
        return h


class Stack:
    """Sequence of :class:`DenseBlock` sharing a name prefix."""

    def __init__(self, blocks: Sequence[DenseBlock]):
        self.blocks = list(blocks)

    @property
    def params(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.params]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out.update(b.buffers())
        return out

    def load_buffers(self, bufs):
        for b in self.blocks:
            b.load_buffers(bufs)

    def __call__(self, x, training: bool) -> Tensor:
        for b in self.blocks:
            x = b(x, training)
        return x


class Encoder(Stack):
    """Three dense + batch-norm + ReLU layers mapping attributes to embeddings.

    With ``input_dim`` equal to the node count and ``identity_input=True`` the
    first layer is a lookup table (one-hot node ids for plain graphs).
    """

    def __init__(self, input_dim: int, rng: np.random.Generator, hidden=HIDDEN,
                 embed_dim: int = EMBED_DIM, identity_input: bool = False,
                 dtype=ad.DEFAULT_DTYPE):
        widths = [input_dim, *hidden, embed_dim]
        blocks = [DenseBlock(f"encoder.{k}", widths[k], widths[k + 1], rng,
                             lookup=identity_input and k == 0, dtype=dtype)
                  for k in range(len(widths) - 1)]
        super().__init__(blocks)
        self.input_dim = input_dim
        self.embed_dim = embed_dim
        self.identity_input = identity_input


def attribute_rows(attributes: sp.csr_matrix | None, nodes: np.ndarray, dtype=ad.DEFAULT_DTYPE):
    """Encoder input for ``nodes``: dense attribute rows, or the ids for plain graphs."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if attributes is None:
        return nodes
    return Tensor(attributes[nodes].toarray(), dtype=dtype)


def encode(params: Encoder, x_batch, training: bool = False) -> Tensor:
    """Embeddings for a batch of attribute rows (or node ids for lookup encoders)."""
    if params.identity_input:
        ids = np.asarray(x_batch)
        if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= params.input_dim)):
            raise ValueError("lookup encoder expects node ids within range")
    else:
        if not isinstance(x_batch, Tensor):
            x_batch = Tensor(np.asarray(x_batch), dtype=params.blocks[0].w.dtype)
        if x_batch.shape[1] != params.input_dim:
            raise ValueError(f"attribute dimension {x_batch.shape[1]} != encoder input "
                             f"{params.input_dim}")
    return params(x_batch, training)


@dataclass(frozen=True)
class MarginConfig:
    mode: str = "adaptive"
    value: float = 50.0
    semantic_margin: float = SEMANTIC_MARGIN
    fraction_T: float = 0.10

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"margin mode must be 'adaptive' or 'fixed', got {self.mode!r}")
        if self.mode == "fixed" and self.value <= 0:
            raise ValueError("fixed margin must be positive")
        if self.semantic_margin <= 0:
            raise ValueError("semantic margin must be positive")
        if not 0 < self.fraction_T <= 1:
            raise ValueError("fraction_T must be in (0, 1]")


def _rows(nodes, index):
    nodes = np.asarray(nodes, dtype=np.int64)
    return nodes if index is None else np.asarray(index)[nodes]


def adaptive_margin_loss(z: Tensor, triplets: Sequence[Triplet], index=None,
                         fixed_margin: float | None = None) -> Tensor:
    """Mean hinge ``max(D(a,p) - D(a,n) + margin, 0)`` over triplets.

    The margin is the hop gap ``delta_an - delta_ap`` unless ``fixed_margin`` is
    given.  ``index`` maps node ids to rows of ``z`` (identity by default).
    """
    if len(triplets) == 0:
        raise ValueError("empty triplet list")
    a = _rows([t.anchor for t in triplets], index)
    p = _rows([t.positive for t in triplets], index)
    n = _rows([t.negative for t in triplets], index)
    if fixed_margin is None:
        margin = np.array([[t.delta_an - t.delta_ap] for t in triplets], dtype=z.dtype)
    else:
        margin = np.full((len(triplets), 1), fixed_margin, dtype=z.dtype)
    za = ad.take_rows(z, a)
    d_ap = ad.l2_distance_rows(za, ad.take_rows(z, p))
    d_an = ad.l2_distance_rows(za, ad.take_rows(z, n))
    return ad.mean_all(ad.relu(ad.add_const(ad.sub(d_ap, d_an), margin)))


def semantic_margin_loss(z: Tensor, pairs: Sequence[tuple[int, int, bool]], margin: float,
                         index=None) -> Tensor:
    """Mean of ``(D(i,j) - S)^2`` with S = 0 for shared labels and ``margin`` otherwise."""
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    i = _rows([p[0] for p in pairs], index)
    j = _rows([p[1] for p in pairs], index)
    target = np.array([[0.0 if same else margin] for _, _, same in pairs], dtype=z.dtype)
    d = ad.l2_distance_rows(ad.take_rows(z, i), ad.take_rows(z, j))
    return ad.mean_all(ad.square(ad.add_const(d, -target)))
