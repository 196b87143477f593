import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from coqmem.dataio import FeatureDataset
from coqmem.errors import DataError
from coqmem.quantizer import Codebooks, quantize_hard, reconstruct_hard
from coqmem.retrieval import (
    RetrievalIndex,
    aqs_score,
    aqs_scores,
    average_precision,
    build_lookup,
    encode_database,
    evaluate,
    map_at_n,
    pr_curve,
    precision_at_n,
    read_results_csv,
    relevance_from_labels,
    search_batch,
    search_topn,
    write_metrics_json,
    write_results_csv,
)
from coqmem.trainer import EmbeddingLayer, embed


def identity(D):
    return EmbeddingLayer(np.eye(D), np.zeros(D))


@pytest.fixture
def books(rng):
    return Codebooks(rng.standard_normal((2, 8, 3)))


def test_encode_examples(books, rng):
    cn = books.normalized()
    target = np.r_[cn[0, 5], cn[1, 2]]
    index = encode_database(target[None], identity(6), books)
    np.testing.assert_array_equal(index.codes, [[5, 2]])
    assert index.codes.dtype == np.uint8

    x = rng.standard_normal((30, 4))
    layer = EmbeddingLayer(rng.standard_normal((6, 4)), rng.standard_normal(6))
    a = encode_database(x, layer, books).codes
    np.testing.assert_array_equal(a, encode_database(x, layer, books).codes)
    loop = [oracles.quantize_hard(embed(layer, row), books.weights) for row in x]
    np.testing.assert_array_equal(a, loop)


def test_lookup_examples(books, rng):
    cn = books.normalized()
    zq = np.r_[cn[0, 3] * 4.0, rng.standard_normal(3)]
    assert build_lookup(zq, books)[0, 3] == pytest.approx(1.0)

    ortho = Codebooks(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    np.testing.assert_allclose(build_lookup([0.0, 2.0], ortho), [[0.0, 1.0]])

    table = build_lookup(zq, books)
    direct = [[oracles.dot(oracles.unit(zq[m * 3:(m + 1) * 3]), oracles.unit(books.weights[m, i]))
               for i in range(8)] for m in range(2)]
    np.testing.assert_allclose(table, direct, atol=1e-12)
    with pytest.raises(DataError, match="zero norm"):
        build_lookup(np.r_[np.zeros(3), np.ones(3)], books)


def test_aqs_examples(books, rng):
    assert aqs_score(np.ones((3, 4)), [0, 3, 1]) == 3.0
    t = np.zeros((2, 4))
    t[0, 1], t[1, 2] = 0.5, -0.25
    assert aqs_score(t, [1, 2]) == 0.25
    with pytest.raises(DataError, match="out of range"):
        aqs_score(t, [0, 4])


def test_aqs_equals_direct_formula(books, rng):
    for _ in range(100):
        zq = rng.standard_normal(6)
        code = rng.integers(0, 8, 2)
        u = np.concatenate([oracles.unit(zq[:3]), oracles.unit(zq[3:])])
        direct = oracles.dot(u, reconstruct_hard(code, books))
        assert aqs_score(build_lookup(zq, books), code) == pytest.approx(direct, abs=1e-10)
        assert -2 <= direct <= 2


def test_search_matches_full_scan(rng):
    books = Codebooks(rng.standard_normal((4, 16, 4)))
    layer = EmbeddingLayer(rng.standard_normal((16, 10)), np.zeros(16))
    index = encode_database(rng.standard_normal((1000, 10)), layer, books)
    for _ in range(5):
        q = rng.standard_normal(10)
        zq = embed(layer, q)
        u = np.concatenate([oracles.unit(s) for s in zq.reshape(4, 4)])
        brute = np.array([u @ reconstruct_hard(c, books) for c in index.codes])
        # descending score, ascending id on ties
        full = sorted(range(1000), key=lambda i: (-round(brute[i], 9), i))
        res = search_topn(index, layer, q, 50)
        np.testing.assert_array_equal(res.ids, full[:50])
        np.testing.assert_allclose(res.scores, brute[res.ids], atol=1e-10)
        assert (np.diff(res.scores) <= 0).all() and len(set(res.ids.tolist())) == 50


def test_search_self_match_and_full_ranking(books, rng):
    layer = identity(6)
    codes = rng.integers(0, 8, (20, 2))
    index = RetrievalIndex(books, codes)
    q = reconstruct_hard(codes[7], books)
    res = search_topn(index, layer, q, 3)
    assert res.scores[0] == pytest.approx(2.0)
    assert np.array_equal(codes[res.ids[0]], codes[7])
    assert len(search_topn(index, layer, q, 100)) == 20
    with pytest.raises(DataError):
        search_topn(index, layer, q, 0)


def test_tie_break_ascending_id(books):
    index = RetrievalIndex(books, np.zeros((6, 2), dtype=int))
    res = search_topn(index, identity(6), np.ones(6), 4)
    np.testing.assert_array_equal(res.ids, [0, 1, 2, 3])


def test_search_batch_agrees_with_single(books, rng):
    layer = identity(6)
    index = RetrievalIndex(books, rng.integers(0, 8, (50, 2)))
    qs = rng.standard_normal((4, 6))
    ids, scores = search_batch(index, layer, qs, 10)
    for q, row in zip(qs, ids):
        np.testing.assert_array_equal(search_topn(index, layer, q, 10).ids, row)


def test_index_validation(books, tmp_path):
    with pytest.raises(DataError):
        RetrievalIndex(books, np.zeros((3, 3), dtype=int))
    with pytest.raises(DataError):
        RetrievalIndex(books, np.full((3, 2), 8))
    with pytest.raises(DataError, match="empty"):
        search_topn(RetrievalIndex(books, np.zeros((0, 2), dtype=int)), identity(6), np.ones(6), 1)
    idx = RetrievalIndex(books, np.array([[1, 2], [7, 0]]))
    idx.save_codes(tmp_path / "c.mcqb")
    back = RetrievalIndex.from_files(books, tmp_path / "c.mcqb")
    np.testing.assert_array_equal(back.codes, idx.codes)
    assert (tmp_path / "c.mcqb").stat().st_size == 16 + 2 * 2


# ---------------------------------------------------------------- metrics


def test_hand_fixture_ap():
    rel = np.zeros((1, 5), dtype=bool)
    rel[0, [0, 2]] = True
    ranked = np.array([[0, 1, 2]])
    # (1/1 + 2/3) / 2 = 5/6; floating point lands within one ulp
    assert map_at_n(ranked, rel, 3) == pytest.approx(5 / 6, abs=2e-16)
    assert map_at_n(ranked, rel, 3, "standard") == pytest.approx(5 / 6, abs=2e-16)


def test_perfect_ranking():
    rel = np.zeros((2, 10), dtype=bool)
    rel[:, :4] = True
    ranked = np.tile(np.arange(10), (2, 1))
    assert map_at_n(ranked, rel, 4) == 1.0
    assert precision_at_n(ranked, rel, [1, 4]) == {1: 1.0, 4: 1.0}


def test_conventions_differ_exactly_when_n_below_relevant():
    rel = np.zeros((1, 10), dtype=bool)
    rel[0, :5] = True
    ranked = np.arange(10)[None]
    for n in range(1, 11):
        p, s = map_at_n(ranked, rel, n, "paper"), map_at_n(ranked, rel, n, "standard")
        assert (p != s) == (n < 5)


def test_empty_relevance_excluded():
    rel = np.zeros((2, 4), dtype=bool)
    rel[0, 1] = True
    rep = average_precision(np.tile(np.arange(4), (2, 1)), rel, 4)
    assert rep.excluded == [1]
    assert rep.value == 0.5


@pytest.mark.parametrize("convention", ["paper", "standard"])
def test_metrics_match_counting_oracle(rng, convention):
    for _ in range(50):
        n_items = int(rng.integers(5, 40))
        rel = rng.random((3, n_items)) < rng.uniform(0.05, 0.6)
        rel[:, 0] |= ~rel.any(axis=1)
        ranked = np.stack([rng.permutation(n_items) for _ in range(3)])
        n = int(rng.integers(1, n_items + 1))
        expect = np.mean([oracles.average_precision(list(r), set(np.flatnonzero(q)), n, convention)
                          for r, q in zip(ranked, rel)])
        assert map_at_n(ranked, rel, n, convention) == pytest.approx(expect, abs=1e-12)
        k = int(rng.integers(1, n_items + 1))
        prec = np.mean([sum(int(q[i]) for i in r[:k]) / k for r, q in zip(ranked, rel)])
        assert precision_at_n(ranked, rel, [k])[k] == pytest.approx(prec, abs=1e-12)


def test_pr_curve_edges():
    ranked = np.tile(np.arange(4), (2, 1))
    allrel = np.ones((2, 4), dtype=bool)
    p, r = pr_curve(ranked, allrel)
    np.testing.assert_allclose(p, 1.0)
    np.testing.assert_allclose(r, [0.25, 0.5, 0.75, 1.0])
    rel = np.zeros((1, 8), dtype=bool)
    rel[0, 7] = True
    p, r = pr_curve(np.arange(4)[None], rel)
    assert not p.any() and not r.any()
    assert precision_at_n(np.arange(4)[None], rel, [1, 4]) == {1: 0.0, 4: 0.0}


@given(st.integers(0, 2**32 - 1))
def test_map_invariant_to_relabeling(seed):
    r = np.random.default_rng(seed)
    rel = r.random((4, 12)) < 0.4
    rel[:, 0] = True
    ranked = np.stack([r.permutation(12) for _ in range(4)])
    perm = r.permutation(12)
    inv = np.argsort(perm)
    # new id = perm[old id]
    rel2 = rel[:, inv]
    ranked2 = perm[ranked]
    for conv in ("paper", "standard"):
        a, b = map_at_n(ranked, rel, 6, conv), map_at_n(ranked2, rel2, 6, conv)
        assert a == pytest.approx(b) and 0 <= a <= 1


def test_relevance_from_labels():
    np.testing.assert_array_equal(relevance_from_labels(np.array([0, 1]), np.array([1, 0, 1])),
                                  [[False, True, False], [True, False, True]])
    multi = relevance_from_labels([np.array([0, 2])], [np.array([2]), np.array([1]), np.array([])])
    np.testing.assert_array_equal(multi, [[True, False, False]])


def test_result_and_metric_files(tmp_path, rng):
    ids = rng.integers(0, 100, (3, 5))
    scores = -np.sort(-rng.random((3, 5)), axis=1)
    write_results_csv(tmp_path / "r.csv", ids, scores)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "query_id,rank,db_id,score"
    q, i, s = read_results_csv(tmp_path / "r.csv")
    assert q == [0, 1, 2]
    np.testing.assert_array_equal(i, ids)
    np.testing.assert_array_equal(s, scores)
    write_metrics_json(tmp_path / "m.json", 0.5, {10: 0.25})
    assert json.loads((tmp_path / "m.json").read_text()) == {"map": 0.5, "precision_at": {"10": 0.25}}


def test_evaluate_end_to_end(books, rng):
    layer = identity(6)
    cn = books.normalized()
    centers = np.stack([np.r_[cn[0, c], cn[1, c]] for c in range(4)])
    labels = rng.integers(0, 4, 40)
    db = FeatureDataset(centers[labels] + 0.01 * rng.standard_normal((40, 6)), labels)
    q = FeatureDataset(centers[[0, 1, 2, 3]], np.arange(4))
    assert evaluate(layer, books, q, db, 40, "standard") == pytest.approx(1.0)
