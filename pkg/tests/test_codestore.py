import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netquant.codestore import (CodeIndex, CodeStore, benchmark, bits_per_index, build_tables,
                                code_similarity, export_codes, l2_scores, pack_codes,
                                pair_similarities, rank_descending, read_header,
                                recommend_top_k, reconstruct_embeddings, storage_report,
                                unpack_codes)
from netquant.quantiser import Codebooks, QuantDecoder, codeword_sum
from netquant.synth import sbm_graph
from netquant.trainer import TrainConfig, fit


def random_store(seed, N=300, M=8, K=256, L=16, decoder=False):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, K, size=(N, M))
    books = rng.normal(size=(M, K, L)).astype(np.float32)
    dec = QuantDecoder(L, rng, hidden=(8, 8)) if decoder else None
    return CodeStore(codes, books, dec)


def brute_similarity(store, i, j):
    C = store.codebooks.astype(np.float64)
    return sum(float(C[m, store.codes[i, m]] @ C[m, store.codes[j, m]]) for m in range(store.M))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(8, 256), (4, 16), (2, 16), (8, 2), (4, 4), (3, 256), (2, 4096)]),
       st.integers(0, 40), st.integers(0, 2 ** 16))
def test_pack_roundtrip(mk, N, seed):
    M, K = mk
    codes = np.random.default_rng(seed).integers(0, K, size=(N, M))
    raw = pack_codes(codes, K)
    assert len(raw) == N * M * bits_per_index(K) // 8
    np.testing.assert_array_equal(unpack_codes(raw, N, M, K), codes)


def test_payload_is_eight_bytes_per_node():
    assert len(pack_codes(np.zeros((2995, 8), dtype=int), 256)) == 23960
    assert random_store(0, N=10).payload_bytes == 80


def test_pack_rejects_out_of_range():
    with pytest.raises(IndexError):
        pack_codes(np.array([[256]]), 256)
    with pytest.raises(IndexError):
        CodeStore(np.array([[3]]), np.zeros((1, 2, 4)))


def test_store_file_roundtrip_is_bit_exact(tmp_path):
    store = random_store(1, decoder=True)
    path = tmp_path / "codes.nqcs"
    store.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"NQCS"
    back = CodeStore.load(path)
    np.testing.assert_array_equal(back.codes, store.codes)
    np.testing.assert_array_equal(back.codebooks, store.codebooks)
    assert back.to_bytes() == raw
    assert read_header(path) == {"version": 1, "N": 300, "M": 8, "K": 256, "L": 16}
    np.testing.assert_array_equal(reconstruct_embeddings(back), reconstruct_embeddings(store))


def test_store_rejects_foreign_bytes():
    raw = random_store(2, N=3).to_bytes()
    with pytest.raises(ValueError):
        CodeStore.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        CodeStore.from_bytes(raw + b"\0")


def test_tables_orthonormal_codewords_give_identity():
    books = np.stack([np.eye(4, dtype=np.float32)] * 2)
    T = build_tables(books)
    np.testing.assert_array_equal(T, np.stack([np.eye(4)] * 2))


def test_tables_match_direct_products():
    store = random_store(3)
    T = build_tables(store.codebooks)
    C = store.codebooks.astype(np.float64)
    assert T.shape == (8, 256, 256)
    np.testing.assert_allclose(T, np.transpose(T, (0, 2, 1)))
    for m in range(8):
        np.testing.assert_allclose(np.diag(T[m]), (C[m] ** 2).sum(axis=1), rtol=1e-12)
    a, b = 17, 201
    assert abs(T[5, a, b] - float(C[5, a] @ C[5, b])) < 1e-6


def test_code_similarity_matches_brute_force():
    store = random_store(4, N=200)
    T = build_tables(store.codebooks)
    rng = np.random.default_rng(0)
    for i, j in rng.integers(0, 200, size=(300, 2)):
        s = code_similarity(store, T, i, j)
        assert abs(s - brute_similarity(store, i, j)) < 1e-6
        assert s == code_similarity(store, T, j, i)
    C = store.codebooks.astype(np.float64)
    self_sim = sum((C[m, store.codes[7, m]] ** 2).sum() for m in range(8))
    assert code_similarity(store, T, 7, 7) == pytest.approx(self_sim, rel=1e-12)
    with pytest.raises(IndexError):
        code_similarity(store, T, 0, 200)


def test_code_similarity_differs_from_full_codeword_sum_product():
    store = random_store(5, N=5, M=2, K=16)
    cb = Codebooks(2, 16, 16, values=store.codebooks)
    x = codeword_sum(store.codes[:2], cb).value.astype(np.float64)
    full = float(x[0] @ x[1])
    per_book = code_similarity(store, build_tables(store.codebooks), 0, 1)
    assert per_book == pytest.approx(brute_similarity(store, 0, 1))
    assert abs(full - per_book) > 1e-3  # cross-codebook products are not part of the lookup


def test_index_scores_and_pair_similarities():
    store = random_store(6, N=150)
    T = build_tables(store.codebooks)
    idx = CodeIndex(store, T)
    s = idx.scores(11)
    expected = np.array([brute_similarity(store, 11, j) for j in range(150)])
    np.testing.assert_allclose(s, expected, atol=1e-6)
    pairs = np.array([[11, j] for j in range(150)])
    np.testing.assert_allclose(pair_similarities(store, T, pairs), s, atol=1e-9)


def test_rank_descending_breaks_ties_by_id():
    s = np.array([1.0, 3.0, 1.0, 3.0, 2.0])
    assert rank_descending(s).tolist() == [1, 3, 4, 0, 2]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_rank_descending_matches_sorted(vals):
    s = np.array(vals, dtype=float)
    expected = sorted(range(len(s)), key=lambda i: (-s[i], i))
    assert rank_descending(s).tolist() == expected


@pytest.mark.parametrize("seed", range(3))
def test_top_k_matches_brute_force(seed):
    store = random_store(seed, N=400, K=4)  # small K forces many tied scores
    T = build_tables(store.codebooks)
    query, exclude = 9, {1, 2, 3}
    brute = [(brute_similarity(store, query, j), j) for j in range(400)
             if j != query and j not in exclude]
    expected = [j for _, j in sorted(brute, key=lambda t: (-round(t[0], 9), t[1]))][:25]
    rec = recommend_top_k(store, T, query, 25, exclude)
    assert rec.nodes.tolist() == expected
    assert not rec.truncated


def test_top_k_full_ranking_and_truncation():
    store = random_store(7, N=50)
    T = build_tables(store.codebooks)
    full = recommend_top_k(store, T, 0, 49)
    assert sorted(full.nodes.tolist()) == list(range(1, 50))
    assert 0 not in full.nodes and not full.truncated
    over = recommend_top_k(store, T, 0, 80)
    assert over.truncated and len(over.nodes) == 49
    with pytest.raises(ValueError):
        recommend_top_k(store, T, 0, 0)


def test_reconstruction_is_function_of_codes_and_row_wise():
    store = random_store(8, N=40, decoder=True)
    store.codes[5] = store.codes[6]
    Z = reconstruct_embeddings(store, chunk=7)
    assert Z.shape == (40, 16)
    np.testing.assert_array_equal(Z[5], Z[6])
    cb = Codebooks(8, 256, 16, values=store.codebooks)
    for i in (0, 13, 39):
        row = store.decoder(codeword_sum(store.codes[i:i + 1], cb), False).value[0]
        np.testing.assert_allclose(Z[i], row, atol=1e-6)
    with pytest.raises(ValueError):
        reconstruct_embeddings(random_store(8, N=3))


def test_storage_report_arithmetic():
    r = storage_report(317080, 8, 256, 128)
    assert r["codes_bytes"] == 317080 * 8
    assert r["codes_mb"] == pytest.approx(2.54, abs=0.01)
    assert r["float_bytes"] == 317080 * 128 * 4
    assert abs(r["float_mib"] - 155.31) / 155.31 < 0.01
    assert r["codebooks_bytes"] == 8 * 256 * 128 * 4
    empty = storage_report(0)
    assert empty["codes_bytes"] == 0 and empty["codebooks_bytes"] == r["codebooks_bytes"]
    with pytest.raises(ValueError):
        storage_report(10, 0)


def test_benchmark_reports_both_paths():
    store = random_store(9, N=2000)
    Z = np.random.default_rng(0).normal(size=(2000, 16)).astype(np.float32)
    out = benchmark(CodeIndex(store), Z, [0, 1, 2])
    assert out["queries"] == 3 and out["float_ms"] > 0 and out["table_ms"] > 0
    with pytest.raises(ValueError):
        benchmark(CodeIndex(store), Z, [])
    assert l2_scores(Z, 4).argmax() == 4


@pytest.fixture(scope="module")
def trained():
    g = sbm_graph(120, 3, p_in=0.15, p_out=0.01, attr_dim=30, seed=3)
    cfg = TrainConfig(M=4, K=16, L=16, hidden=(32, 16), quant_hidden=(16, 16), batch_size=40,
                      epochs=2)
    return g, fit(g, cfg).model


def test_export_codes_deterministic(trained, tmp_path):
    g, model = trained
    a, b = export_codes(g, model), export_codes(g, model)
    assert a.to_bytes() == b.to_bytes()
    assert a.codes.shape == (120, 4) and a.payload_bytes == 120 * 2
    np.testing.assert_array_equal(a.codes, model.codes(g))


def test_export_rejects_mismatched_graph(trained):
    _, model = trained
    with pytest.raises(ValueError):
        export_codes(sbm_graph(50, 2, attr_dim=12, seed=0), model)
