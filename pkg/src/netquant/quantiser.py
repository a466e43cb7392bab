"""Differentiable product quantisation: Gumbel-softmax code assignment over learned
codebooks, a decoder back to embedding space, and the reconstruction and rank losses.

Soft assignments are carried as (B, M*K) tensors whose K-wide column blocks
are each row-stochastic; hard codes are (B, M) integer arrays.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import DenseBlock, Stack

NUM_CODEBOOKS = 8
CODEBOOK_SIZE = 256
QUANT_HIDDEN = (256, 256)


class Codebooks:
    """M codebooks of K codewords each, stored stacked as one (M*K, L) tensor."""

    def __init__(self, num_codebooks: int, codebook_size: int, dim: int,
                 rng: np.random.Generator | None = None, values=None, dtype=ad.DEFAULT_DTYPE):
        bits = num_codebooks * np.log2(codebook_size)
        if codebook_size < 2 or not float(np.log2(codebook_size)).is_integer() or bits % 8:
            raise ValueError("codebook size must be a power of two with M*log2(K) divisible by 8")
        self.M, self.K, self.L = num_codebooks, codebook_size, dim
        if values is None:
            values = rng.normal(0.0, 1.0 / np.sqrt(dim), (num_codebooks * codebook_size, dim))
        self.words = Tensor(np.asarray(values).reshape(num_codebooks * codebook_size, dim),
                            True, "codebooks", dtype)

    def as_array(self) -> np.ndarray:
        """Codewords as an (M, K, L) array."""
        return self.words.value.reshape(self.M, self.K, self.L)

    @property
    def params(self) -> list[Tensor]:
        return [self.words]


class QuantEncoder(Stack):
    """Two dense + batch-norm + ReLU layers, then M parallel K-way logit heads."""

    def __init__(self, dim: int, num_codebooks: int, codebook_size: int,
                 rng: np.random.Generator, hidden=QUANT_HIDDEN, dtype=ad.DEFAULT_DTYPE):
        widths = [dim, *hidden]
        blocks = [DenseBlock(f"qenc.{k}", widths[k], widths[k + 1], rng, dtype=dtype)
                  for k in range(len(hidden))]
        blocks.append(DenseBlock("qenc.heads", widths[-1], num_codebooks * codebook_size, rng,
                                 norm=False, dtype=dtype))
        super().__init__(blocks)
        self.M, self.K = num_codebooks, codebook_size


class QuantDecoder(Stack):
    """Mirror of :class:`QuantEncoder` mapping a codeword sum back to an embedding.

    ``identity=True`` yields the plain product-quantisation reconstruction.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None, hidden=QUANT_HIDDEN,
                 identity: bool = False, dtype=ad.DEFAULT_DTYPE):
        blocks = []
        if not identity:
            widths = [dim, *reversed(hidden)]
            blocks = [DenseBlock(f"qdec.{k}", widths[k], widths[k + 1], rng, dtype=dtype)
                      for k in range(len(hidden))]
            blocks.append(DenseBlock("qdec.out", widths[-1], dim, rng, norm=False, dtype=dtype))
        super().__init__(blocks)
        self.identity = identity


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape, dtype=np.float32)
    u = np.maximum(u, np.finfo(np.float32).tiny)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, num_codebooks: int, tau: float = 1.0,
                   rng: np.random.Generator | None = None, hard_eval: bool = False,
                   noise: np.ndarray | None = None) -> Tensor:
    """Per-codebook ``softmax((logits + g) / tau)`` with i.i.d. Gumbel ``g``.

    ``hard_eval`` disables the noise (evaluation / export).  ``noise`` pins the
    perturbation explicitly, e.g. for gradient checks.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    B, MK = logits.shape
    if MK % num_codebooks:
        raise ValueError("logit width is not a multiple of the codebook count")
    K = MK // num_codebooks
    x = logits
    if not hard_eval:
        if noise is None:
            noise = gumbel_noise(logits.shape, rng)
        x = ad.add_const(x, noise)
    if tau != 1.0:
        x = ad.scale(x, 1.0 / tau)
    u = ad.softmax_rows(ad.reshape(x, B * num_codebooks, K))
    return ad.reshape(u, B, MK)


def hard_assign(u, num_codebooks: int) -> np.ndarray:
    """Index of the largest entry in each codebook block (lowest index on ties)."""
    v = u.value if isinstance(u, Tensor) else np.asarray(u)
    B = v.shape[0]
    return np.argmax(v.reshape(B, num_codebooks, -1), axis=2).astype(np.int64)


def one_hot(codes: np.ndarray, codebook_size: int, dtype=ad.DEFAULT_DTYPE) -> np.ndarray:
    """(B, M) codes -> (B, M*K) concatenated one-hot rows."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= codebook_size):
        raise IndexError(f"code index outside [0, {codebook_size})")
    B, M = codes.shape
    out = np.zeros((B, M * codebook_size), dtype=dtype)
    cols = codes + np.arange(M) * codebook_size
    out[np.arange(B)[:, None], cols] = 1
    return out


def codeword_sum(u_or_q, cb: Codebooks) -> Tensor:
    """Decoder input ``sum_j u_j C_j`` (soft) or ``sum_j C_j[q_j]`` (hard codes)."""
    if isinstance(u_or_q, Tensor):
        if u_or_q.shape[1] != cb.M * cb.K:
            raise ad.ShapeError("assignment width does not match codebooks")
        return ad.matmul(u_or_q, cb.words)
    codes = np.asarray(u_or_q)
    if codes.ndim != 2 or codes.shape[1] != cb.M:
        raise ad.ShapeError("hard codes must be (B, M)")
    return ad.matmul(Tensor(one_hot(codes, cb.K, cb.words.dtype), dtype=cb.words.dtype), cb.words)


def reconstruct(u_or_q, cb: Codebooks, dec: QuantDecoder, training: bool = False) -> Tensor:
    return dec(codeword_sum(u_or_q, cb), training)


def quantisation_loss(z: Tensor, u: Tensor, cb: Codebooks, dec: QuantDecoder,
                      training: bool = False) -> Tensor:
    """Mean squared reconstruction error ``||z_i - D(sum_j u_ij C_j)||^2``."""
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    r = reconstruct(u, cb, dec, training)
    return ad.scale(ad.sum_all(ad.square(ad.sub(z, r))), 1.0 / z.shape[0])


def rank_loss(u_a: Tensor, q_p: np.ndarray, q_n: np.ndarray, codebook_size: int) -> Tensor:
    """Sum over triplets of ``max(u_a . q_n - u_a . q_p + 1, 0)``; codes are constants."""
    hp = Tensor(one_hot(q_p, codebook_size, u_a.dtype), dtype=u_a.dtype)
    hn = Tensor(one_hot(q_n, codebook_size, u_a.dtype), dtype=u_a.dtype)
    gap = ad.sub(ad.inner_product_rows(u_a, hn), ad.inner_product_rows(u_a, hp))
    return ad.sum_all(ad.relu(ad.add_const(gap, 1.0)))
