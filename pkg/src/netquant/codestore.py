"""Packed quantisation codes, codeword lookup tables and table-based retrieval.

NQCS file layout (little-endian)::

    "NQCS" | version u16 | N u64 | M u16 | K u32 | L u32
    payload   N * M * log2(K) / 8 bytes of packed code indices
    codebooks M * K * L float32
    decoder   u64 length, then an NQCK blob (absent when length is 0)
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .checkpoint import decode_sections, encode_sections
from .graph import Graph
from .quantiser import Codebooks, QuantDecoder, codeword_sum

MAGIC = b"NQCS"
VERSION = 1
_HEAD = struct.Struct("<4sHQHII")
MIB = 2 ** 20


def bits_per_index(K: int) -> int:
    return max(1, math.ceil(math.log2(K)))


def pack_codes(codes: np.ndarray, K: int) -> bytes:
    """Pack (N, M) indices at ceil(log2 K) bits each, node-major, little bit order."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise IndexError(f"code index outside [0, {K})")
    b = bits_per_index(K)
    if b == 8:
        return codes.astype(np.uint8).tobytes()
    N, M = codes.shape
    if (M * b) % 8:
        raise ValueError("M * log2(K) must be a multiple of 8")
    bits = ((codes[:, :, None] >> np.arange(b)) & 1).astype(np.uint8).reshape(N, M * b)
    return np.packbits(bits, axis=1, bitorder="little").tobytes()


def unpack_codes(raw: bytes, N: int, M: int, K: int) -> np.ndarray:
    b = bits_per_index(K)
    buf = np.frombuffer(raw, dtype=np.uint8)
    if buf.size != N * M * b // 8:
        raise ValueError("packed payload has the wrong length")
    if b == 8:
        return buf.reshape(N, M).astype(np.int64)
    bits = np.unpackbits(buf.reshape(N, M * b // 8), axis=1, bitorder="little")
    bits = bits.reshape(N, M, b).astype(np.int64)
    return (bits << np.arange(b)).sum(axis=2)


def _decoder_sections(dec: QuantDecoder) -> tuple[dict, dict]:
    sections = {p.name: p.value for p in dec.params}
    sections.update(dec.buffers())
    hidden = [blk.w.shape[1] for blk in dec.blocks[:-1]]
    return sections, {"hidden": hidden}


def _decoder_from_sections(sections: dict, meta: dict, L: int) -> QuantDecoder:
    hidden = tuple(reversed(meta["hidden"]))
    dec = QuantDecoder(L, np.random.default_rng(0), hidden=hidden)
    for p in dec.params:
        p.assign(sections[p.name])
    dec.load_buffers(sections)
    return dec


@dataclass
class CodeStore:
    codes: np.ndarray            # (N, M) int indices
    codebooks: np.ndarray        # (M, K, L) float32
    decoder: QuantDecoder | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.codebooks = np.asarray(self.codebooks, dtype=np.float32)
        if self.codes.ndim != 2 or self.codes.shape[1] != self.codebooks.shape[0]:
            raise ValueError("codes and codebooks disagree on M")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.K):
            raise IndexError("code index outside codebook")

    N = property(lambda self: self.codes.shape[0])
    M = property(lambda self: self.codebooks.shape[0])
    K = property(lambda self: self.codebooks.shape[1])
    L = property(lambda self: self.codebooks.shape[2])

    @property
    def payload_bytes(self) -> int:
        return self.N * self.M * bits_per_index(self.K) // 8

    def to_bytes(self) -> bytes:
        parts = [_HEAD.pack(MAGIC, VERSION, self.N, self.M, self.K, self.L),
                 pack_codes(self.codes, self.K),
                 np.ascontiguousarray(self.codebooks, dtype="<f4").tobytes()]
        if self.decoder is None:
            parts.append(struct.pack("<Q", 0))
        else:
            blob = encode_sections(*_decoder_sections(self.decoder))
            parts.append(struct.pack("<Q", len(blob)) + blob)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CodeStore":
        magic, version, N, M, K, L = _HEAD.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError("not an NQCS code store")
        if version != VERSION:
            raise ValueError(f"unsupported code store version {version}")
        pos = _HEAD.size
        nbytes = N * M * bits_per_index(K) // 8
        codes = unpack_codes(raw[pos:pos + nbytes], N, M, K)
        pos += nbytes
        cb_bytes = M * K * L * 4
        codebooks = np.frombuffer(raw, dtype="<f4", count=M * K * L, offset=pos).reshape(M, K, L)
        pos += cb_bytes
        (dlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        decoder = None
        if dlen:
            sections, meta = decode_sections(raw[pos:pos + dlen])
            decoder = _decoder_from_sections(sections, meta, L)
            pos += dlen
        if pos != len(raw):
            raise ValueError("trailing bytes in code store")
        return cls(codes, codebooks.astype(np.float32), decoder)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodeStore":
        return cls.from_bytes(Path(path).read_bytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        magic, version, N, M, K, L = _HEAD.unpack(fh.read(_HEAD.size))
    if magic != MAGIC:
        raise ValueError("not an NQCS code store")
    return {"version": version, "N": N, "M": M, "K": K, "L": L}


def export_codes(g: Graph, model) -> CodeStore:
    """Noise-free hard codes of every node under a trained model."""
    model.check_graph(g)
    return CodeStore(model.codes(g), model.codebooks.as_array().copy(), model.qdec)


# -- tables and retrieval -------------------------------------------------------

def build_tables(codebooks: np.ndarray) -> np.ndarray:
    """(M, K, K) per-codebook codeword inner products, in float64."""
    C = np.asarray(codebooks, dtype=np.float64)
    return np.einsum("mkl,mjl->mkj", C, C)


def code_similarity(store: CodeStore, tables: np.ndarray, i: int, j: int) -> float:
    """Sum over codebooks of the tabulated product of node i's and node j's codewords."""
    n = store.N
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"node id outside [0, {n})")
    qi, qj = store.codes[i], store.codes[j]
    return float(sum(tables[m, qi[m], qj[m]] for m in range(store.M)))


def pair_similarities(store: CodeStore, tables: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    qi, qj = store.codes[pairs[:, 0]], store.codes[pairs[:, 1]]
    m = np.arange(store.M)
    return tables[m, qi, qj].sum(axis=1)


@numba.njit(cache=True, nogil=True)
def _lut_scores(lut, codes_t, out):
    M, N = codes_t.shape
    for n in range(N):
        out[n] = 0.0
    for m in range(M):
        row = lut[m]
        col = codes_t[m]
        for n in range(N):
            out[n] += row[col[n]]


class CodeIndex:
    """Read-only query structure: column-major uint8/uint16 codes plus tables."""

    def __init__(self, store: CodeStore, tables: np.ndarray | None = None):
        self.store = store
        self.tables = build_tables(store.codebooks) if tables is None else tables
        dtype = np.uint8 if store.K <= 256 else np.uint16
        self.codes_t = np.ascontiguousarray(store.codes.T.astype(dtype))

    def scores(self, query: int) -> np.ndarray:
        """Code similarity of ``query`` against every node."""
        q = self.store.codes[query]
        lut = np.ascontiguousarray(self.tables[np.arange(self.store.M), q])
        out = np.empty(self.store.N, dtype=np.float64)
        _lut_scores(lut, self.codes_t, out)
        return out


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Indices by decreasing score, ties by increasing index."""
    order = np.argsort(-scores)
    v = scores[order]
    tie = v[1:] == v[:-1]
    if tie.any():
        group = np.concatenate([[0], np.cumsum(~tie)])
        order = order[np.argsort(group * len(scores) + order)]
    return order


@dataclass
class Recommendation:
    nodes: np.ndarray
    scores: np.ndarray
    truncated: bool


def recommend_top_k(store: CodeStore, tables: np.ndarray, query: int, k: int, exclude=(),
                    index: CodeIndex | None = None) -> Recommendation:
    """Top-k nodes by code similarity, excluding the query and ``exclude``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= query < store.N:
        raise IndexError("query node out of range")
    index = index or CodeIndex(store, tables)
    s = index.scores(query)
    order = rank_descending(s)
    mask = np.ones(store.N, dtype=bool)
    mask[query] = False
    mask[np.asarray(list(exclude), dtype=np.int64)] = False
    order = order[mask[order]]
    truncated = k > store.N - 1 or k > len(order)
    order = order[:k]
    return Recommendation(order, s[order], truncated)


def reconstruct_embeddings(store: CodeStore, chunk: int = 8192) -> np.ndarray:
    """Decoder applied to each node's codeword sum, (N, L)."""
    if store.decoder is None:
        raise ValueError("code store has no decoder")
    cb = Codebooks(store.M, store.K, store.L, values=store.codebooks)
    out = []
    for s in range(0, store.N, chunk):
        x = codeword_sum(store.codes[s:s + chunk], cb)
        out.append(store.decoder(x, False).value)
    return np.concatenate(out) if out else np.zeros((0, store.L), np.float32)


# -- storage and latency --------------------------------------------------------

def storage_report(N: int, M: int = 8, K: int = 256, L: int = 128) -> dict:
    """Byte counts of codes, float32 codebooks and a float32 embedding baseline."""
    if min(M, K, L) <= 0 or N < 0:
        raise ValueError("sizes must be positive")
    codes = N * M * bits_per_index(K) // 8
    books = M * K * L * 4
    flt = N * L * 4
    return {"codes_bytes": codes, "codebooks_bytes": books, "float_bytes": flt,
            "quantised_total_bytes": codes + books,
            "codes_mib": codes / MIB, "codebooks_mib": books / MIB, "float_mib": flt / MIB,
            "codes_mb": codes / 1e6, "float_mb": flt / 1e6}


def l2_scores(Z: np.ndarray, query: int) -> np.ndarray:
    """Negative Euclidean distance of every row of ``Z`` to row ``query``."""
    return -np.sqrt(((Z - Z[query]) ** 2).sum(axis=1))


def benchmark(index: CodeIndex, Z: np.ndarray, queries, repeat: int = 1) -> dict:
    """Mean per-query full-ranking latency (ms) for float L2 and table lookup."""
    queries = list(queries)
    if not queries:
        raise ValueError("need at least one query")
    index.scores(queries[0])
    rank_descending(l2_scores(Z, queries[0]))

    def timed(fn):
        t = time.perf_counter()
        for _ in range(repeat):
            for q in queries:
                rank_descending(fn(q))
        return (time.perf_counter() - t) / (repeat * len(queries)) * 1e3

    float_ms = timed(lambda q: l2_scores(Z, q))
    table_ms = timed(index.scores)
    return {"float_ms": float_ms, "table_ms": table_ms, "speedup": float_ms / table_ms,
            "queries": len(queries)}
