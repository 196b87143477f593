import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from coqmem.errors import ConfigError, DataError
from coqmem.quantizer import (
    Codebooks,
    QuantizerConfig,
    normalize_segments,
    omega_c,
    one_hot,
    quantize_hard,
    quantize_soft,
    quantizer_backward,
    reconstruct_hard,
    reconstruct_soft,
    soft_assign,
)


def _rel_err(num, ana):
    return np.abs(num - ana).max() / max(np.abs(num).max(), 1e-300)


def test_normalize_segments_examples():
    np.testing.assert_allclose(normalize_segments([3.0, 4.0], 1), [[0.6, 0.8]])
    np.testing.assert_array_equal(normalize_segments([1.0, 0, 0, 2.0], 2), [[1, 0], [0, 1]])


def test_normalize_segments_unit_norms(rng):
    u = normalize_segments(rng.standard_normal(20), 4)
    np.testing.assert_allclose(np.linalg.norm(u, axis=-1), 1.0, atol=1e-7)


def test_zero_segment_is_reported():
    with pytest.raises(DataError, match="segment 1"):
        normalize_segments([1.0, 2.0, 0.0, 0.0], 2)


def test_soft_assign_examples():
    np.testing.assert_allclose(soft_assign([0.6, 0.8], np.tile([1.0, 2.0], (4, 1)), 10), 0.25)
    p = soft_assign([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 1.0)
    e = math.e
    np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], rtol=1e-15)
    np.testing.assert_allclose(p, [0.7311, 0.2689], atol=5e-5)


def test_soft_assign_tail_bound(rng):
    # gap >= 0.1 at alpha = 100 leaves at most (K - 1) e^-10 off the top
    K = 8
    for _ in range(50):
        c = rng.standard_normal((K, 5))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        z = c[0] + 0.3 * rng.standard_normal(5)
        z /= np.linalg.norm(z)
        s = np.sort(c @ z)
        if s[-1] - s[-2] < 0.1:
            continue
        assert soft_assign(z, c, 100.0).max() >= 1 - (K - 1) * math.exp(-10)


def test_soft_assign_overflow_safe():
    p = soft_assign([1.0, 0.0], [[1.0, 0.0], [-1.0, 0.0]], 1e6)
    np.testing.assert_array_equal(p, [1.0, 0.0])


def test_quantize_soft_matches_oracle(rng):
    for _ in range(100):
        M, K, d = rng.integers(1, 4), rng.choice([2, 4, 8]), rng.integers(1, 5)
        w = rng.standard_normal((M, K, d))
        z = rng.standard_normal(M * d)
        alpha = float(rng.choice([0.1, 1.0, 10.0, 100.0]))
        p, zh = quantize_soft(z, Codebooks(w), QuantizerConfig(alpha))
        po, zo = oracles.quantize_soft(z, w, alpha)
        np.testing.assert_allclose(p, po, atol=1e-12)
        np.testing.assert_allclose(zh, zo, atol=1e-12)


def test_quantize_soft_frozen_instance():
    # values from oracles.quantize_soft on this instance
    r = np.random.default_rng(2024)
    w = r.standard_normal((2, 4, 3))
    z = r.standard_normal(6)
    p, zh = quantize_soft(z, Codebooks(w), QuantizerConfig(10.0))
    np.testing.assert_allclose(p, [1.3595651155038849e-07, 9.9999770027987156e-01,
                                   3.3642851346720242e-07, 1.8273351035322027e-06,
                                   7.7426417639144379e-08, 9.9915633940241533e-01,
                                   8.2216389022828908e-04, 2.1419280938834018e-05], rtol=1e-12)
    np.testing.assert_allclose(zh, [-0.5723088012330926, -0.8190806271010395, 0.03951629510647443,
                                    0.48890438729673474, -0.8306624440235528, -0.2628045730536704],
                               rtol=1e-12)
    np.testing.assert_array_equal(quantize_hard(z, Codebooks(w)), [1, 1])
    assert omega_c(Codebooks(w)) == pytest.approx(0.18565887255704952, rel=1e-12)


def test_quantize_soft_near_codeword(rng):
    w = rng.standard_normal((1, 8, 6))
    cn = w / np.linalg.norm(w, axis=-1, keepdims=True)
    z = cn[0, 5]
    s = np.sort(cn[0] @ z)
    assert s[-1] - s[-2] >= 0.05
    _, zh = quantize_soft(z, Codebooks(w), QuantizerConfig(200.0))
    assert np.linalg.norm(zh - z) < 0.05


def test_identical_codewords_reconstruct_common_codeword():
    w = np.tile([[[0.0, 2.0]]], (1, 4, 1))
    p, zh = quantize_soft([1.0, 1.0], Codebooks(w), QuantizerConfig())
    np.testing.assert_allclose(p, 0.25)
    np.testing.assert_allclose(zh, [0.0, 1.0])


def test_hard_examples():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((1, 8, 4))
    assert quantize_hard(w[0, 3] * 2.5, Codebooks(w))[0] == 3
    flat = np.tile([[[1.0, 0.0]]], (1, 4, 1))
    assert quantize_hard([0.0, 1.0], Codebooks(flat))[0] == 0


def test_hard_matches_oracle_and_soft_argmax(rng):
    for _ in range(100):
        M, K, d = 3, 8, 4
        w = rng.standard_normal((M, K, d))
        z = rng.standard_normal((5, M * d))
        books = Codebooks(w)
        hard = quantize_hard(z, books)
        for row, code in zip(z, hard):
            assert list(code) == oracles.quantize_hard(row, w)
        for alpha in (0.1, 1.0, 10.0, 100.0):
            p, _ = quantize_soft(z, books, QuantizerConfig(alpha))
            np.testing.assert_array_equal(p.reshape(5, M, K).argmax(-1), hard)


def test_reconstructions(rng):
    w = rng.standard_normal((2, 4, 3))
    books = Codebooks(w)
    cn = books.normalized()
    code = np.zeros(8)
    code[2] = code[4 + 1] = 1
    np.testing.assert_array_equal(reconstruct_soft(code, books), np.r_[cn[0, 2], cn[1, 1]])
    np.testing.assert_allclose(reconstruct_soft(np.full(8, 0.25), books),
                               np.r_[cn[0].mean(0), cn[1].mean(0)], atol=1e-15)
    z = rng.standard_normal((10, 6))
    p, zh = quantize_soft(z, books, QuantizerConfig(4.0))
    np.testing.assert_allclose(reconstruct_soft(p, books), zh, atol=1e-12)

    np.testing.assert_array_equal(reconstruct_hard([0, 0], books)[:3], cn[0, 0])
    hard = rng.integers(0, 4, (20, 2))
    rh = reconstruct_hard(hard, books)
    np.testing.assert_array_equal(rh, reconstruct_soft(one_hot(hard, 4), books))
    np.testing.assert_allclose(np.linalg.norm(rh.reshape(20, 2, 3), axis=-1), 1.0, atol=1e-12)
    for c in hard[:5]:
        np.testing.assert_allclose(reconstruct_hard(c, books), oracles.reconstruct_hard(c, w),
                                   atol=1e-12)


def test_reconstruction_errors(rng):
    books = Codebooks(rng.standard_normal((2, 4, 3)))
    with pytest.raises(DataError, match="sums to"):
        reconstruct_soft(np.full(8, 0.3), books)
    with pytest.raises(DataError, match="out of range"):
        reconstruct_hard([0, 4], books)


def test_omega_examples(rng):
    assert omega_c(Codebooks(np.tile([[[1.0, 2.0, 3.0]]], (2, 4, 1)))) == pytest.approx(1.0)
    eye = np.tile(np.eye(4)[None] * 3.0, (2, 1, 1))
    assert omega_c(Codebooks(eye)) == pytest.approx(0.25)
    for _ in range(100):
        w = rng.standard_normal((rng.integers(1, 4), rng.choice([2, 4, 8]), rng.integers(1, 5)))
        assert omega_c(Codebooks(w)) == pytest.approx(oracles.omega_c(w), abs=1e-10)


def test_codebooks_validation(rng):
    with pytest.raises(DataError, match="codeword 1 of codebook 0"):
        Codebooks(np.array([[[1.0, 0.0], [0.0, 0.0]]]))
    with pytest.raises(ConfigError):
        Codebooks(np.ones((1, 1, 2)))
    with pytest.raises(ConfigError):
        QuantizerConfig(alpha=0)
    books = Codebooks.random(4, 256, 16, rng)
    assert books.bits == 32 and books.D == 64
    np.testing.assert_allclose(np.linalg.norm(books.weights, axis=-1), 1.0)


def test_backward_zero_upstream(rng):
    books = Codebooks(rng.standard_normal((2, 3, 4)))
    gz, gw = quantizer_backward(rng.standard_normal((3, 8)), books, QuantizerConfig(), np.zeros((3, 8)))
    assert not gz.any() and not gw.any()


def test_backward_finite_differences(rng):
    M, K, d, n = 2, 3, 4, 3
    w = rng.standard_normal((M, K, d))
    z = rng.standard_normal((n, M * d))
    up = rng.standard_normal((n, M * d))
    cfg = QuantizerConfig(3.0)
    gamma = 0.7

    def f_z(zz):
        return float((quantize_soft(zz, Codebooks(w), cfg)[1] * up).sum())

    def f_w(ww):
        b = Codebooks(ww)
        return float((quantize_soft(z, b, cfg)[1] * up).sum()) + gamma * omega_c(b)

    gz, gw = quantizer_backward(z, Codebooks(w), cfg, up, gamma)
    assert _rel_err(oracles.central_difference(f_z, z), gz) < 1e-5
    assert _rel_err(oracles.central_difference(f_w, w), gw) < 1e-5


def test_omega_gradient_vanishes_at_identical_codewords():
    w = np.tile([[[0.3, -1.0, 2.0]]], (2, 4, 1))
    books = Codebooks(w)
    z = np.ones((1, 6))
    _, gw = quantizer_backward(z, books, QuantizerConfig(), np.zeros((1, 6)), 1.0)
    np.testing.assert_allclose(gw, 0.0, atol=1e-14)
    num = oracles.central_difference(lambda ww: omega_c(Codebooks(ww)), w)
    np.testing.assert_allclose(num, 0.0, atol=1e-7)


@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(-50, 50).filter(lambda v: abs(v) > 1e-3)),
       st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_soft_blocks_are_distributions(z, alpha, seed):
    books = Codebooks(np.random.default_rng(seed).standard_normal((2, 4, 4)))
    p, zh = quantize_soft(z, books, QuantizerConfig(alpha))
    blocks = p.reshape(3, 2, 4)
    assert (blocks >= 0).all()
    np.testing.assert_allclose(blocks.sum(-1), 1.0, atol=1e-6)
    assert (np.linalg.norm(zh.reshape(3, 2, 4), axis=-1) <= 1 + 1e-12).all()
    np.testing.assert_array_equal(blocks.argmax(-1), quantize_hard(z, books))


@given(st.integers(0, 2**32 - 1))
def test_omega_bounds(seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((2, 4, 3))
    assert -1 <= omega_c(Codebooks(w)) <= 1
    pos = np.abs(w)
    assert omega_c(Codebooks(pos)) >= 1 / 4 - 1e-12


def test_alpha_limit_approaches_hard(rng):
    books = Codebooks(rng.standard_normal((2, 8, 4)))
    z = rng.standard_normal(8)
    hard = reconstruct_hard(quantize_hard(z, books), books)
    errs = [np.linalg.norm(quantize_soft(z, books, QuantizerConfig(a))[1] - hard)
            for a in (1, 10, 100, 1000, 10000)]
    assert errs[-1] < 1e-6
    assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))
