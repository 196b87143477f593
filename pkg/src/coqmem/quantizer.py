"""Trainable product quantization with alpha-softmax codeword attention.

Shapes used throughout: a batch of embeddings ``z`` is (n, D) with
D = M * d; codebook weights are (M, K, d); soft codes are (n, M * K);
hard codes are (n, M) integer indices. Single vectors (1-D inputs) are
accepted everywhere and give 1-D outputs.

Both embedding segments and codewords are L2-normalized before use, so the
stored weights may have any non-zero norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio
from .errors import ConfigError, DataError


@dataclass
class QuantizerConfig:
    alpha: float = 10.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


class Codebooks:
    """M codebooks of K codewords each, stored as an (M, K, d) array."""

    def __init__(self, weights):
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 3:
            raise ConfigError(f"codebook weights must be (M, K, d), got {w.shape}")
        M, K, d = w.shape
        if M < 1 or K < 2 or d < 1:
            raise ConfigError(f"need M >= 1, K >= 2, d >= 1; got {w.shape}")
        norms = np.linalg.norm(w, axis=-1)
        if (norms == 0).any():
            m, k = np.argwhere(norms == 0)[0]
            raise DataError(f"codeword {k} of codebook {m} has zero norm")
        self.weights = w

    @classmethod
    def random(cls, M: int, K: int, d: int, rng: np.random.Generator) -> "Codebooks":
        """Standard-normal rows, normalized to unit length."""
        w = rng.standard_normal((M, K, d))
        return cls(w / np.linalg.norm(w, axis=-1, keepdims=True))

    @property
    def M(self) -> int:
        return self.weights.shape[0]

    @property
    def K(self) -> int:
        return self.weights.shape[1]

    @property
    def d(self) -> int:
        return self.weights.shape[2]

    @property
    def D(self) -> int:
        return self.M * self.d

    @property
    def bits(self) -> float:
        return self.M * np.log2(self.K)

    def normalized(self) -> np.ndarray:
        return self.weights / np.linalg.norm(self.weights, axis=-1, keepdims=True)

    def copy(self) -> "Codebooks":
        return Codebooks(self.weights.copy())

    def save(self, path) -> None:
        dataio.write_codebooks(self.weights, path)

    @classmethod
    def load(cls, path) -> "Codebooks":
        return cls(dataio.load_codebooks(path))

    def __repr__(self):
        return f"Codebooks(M={self.M}, K={self.K}, d={self.d})"


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _segments(z: np.ndarray, M: int):
    n, D = z.shape
    if D % M:
        raise DataError(f"embedding width {D} is not divisible by M={M}")
    seg = z.reshape(n, M, D // M)
    norms = np.linalg.norm(seg, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    if zero.any():
        row, m = np.argwhere(zero)[0]
        raise DataError(f"segment {m} of row {row} has zero norm")
    return seg / norms, norms


def _seg_dot(a: np.ndarray, cn: np.ndarray) -> np.ndarray:
    """(n, M, d) x (M, K, d) -> (n, M, K) segment-wise dot products."""
    return np.matmul(a.swapaxes(0, 1), cn.swapaxes(1, 2)).swapaxes(0, 1)


def _mix(p: np.ndarray, cn: np.ndarray) -> np.ndarray:
    """(n, M, K) x (M, K, d) -> (n, M, d) weighted codeword sums."""
    return np.matmul(p.swapaxes(0, 1), cn).swapaxes(0, 1)


def _outer_sum(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(n, M, K) x (n, M, d) -> (M, K, d), summed over the batch."""
    return np.matmul(p.transpose(1, 2, 0), g.swapaxes(0, 1))


def normalize_segments(z, M: int) -> np.ndarray:
    """Split ``z`` into M segments and scale each to unit L2 norm.

    Returns an array of shape (M, d), or (n, M, d) for a batch.
    """
    zb, single = _batch(z)
    u, _ = _segments(zb, M)
    return u[0] if single else u


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def soft_assign(z_m, codebook, alpha: float) -> np.ndarray:
    """Attention weights of one unit segment over one (K, d) codebook."""
    c = np.asarray(codebook, dtype=np.float64)
    c = c / np.linalg.norm(c, axis=-1, keepdims=True)
    return _softmax(alpha * (c @ np.asarray(z_m, dtype=np.float64)))


def _attention(z: np.ndarray, books: Codebooks, alpha: float):
    u, norms = _segments(z, books.M)
    cn = books.normalized()
    scores = _seg_dot(u, cn)
    p = _softmax(alpha * scores)
    return u, norms, cn, p


def quantize_soft(z, books: Codebooks, cfg: QuantizerConfig):
    """Soft-quantize embeddings.

    Returns:
        (p, z_hat): soft codes of width M*K and reconstructions of width D.
    """
    zb, single = _batch(z)
    _, _, cn, p = _attention(zb, books, cfg.alpha)
    z_hat = _mix(p, cn).reshape(zb.shape[0], -1)
    p = p.reshape(zb.shape[0], -1)
    return (p[0], z_hat[0]) if single else (p, z_hat)


def quantize_hard(z, books: Codebooks) -> np.ndarray:
    """Index of the most similar codeword per segment (lowest index on ties)."""
    zb, single = _batch(z)
    u, _ = _segments(zb, books.M)
    scores = _seg_dot(u, books.normalized())
    codes = scores.argmax(axis=-1)
    return codes[0] if single else codes


def _check_soft_code(p: np.ndarray, books: Codebooks) -> np.ndarray:
    n = p.shape[0]
    if p.shape[1] != books.M * books.K:
        raise DataError(f"soft code width {p.shape[1]} != M*K = {books.M * books.K}")
    blocks = p.reshape(n, books.M, books.K)
    err = np.abs(blocks.sum(axis=-1) - 1.0)
    if (err > 1e-4).any():
        row, m = np.argwhere(err > 1e-4)[0]
        raise DataError(f"soft code row {row} block {m} sums to {blocks[row, m].sum():.6g}")
    return blocks


def reconstruct_soft(code, books: Codebooks) -> np.ndarray:
    """Mix current normalized codewords with stored attention weights."""
    pb, single = _batch(code)
    blocks = _check_soft_code(pb, books)
    out = _mix(blocks, books.normalized()).reshape(pb.shape[0], -1)
    return out[0] if single else out


def reconstruct_hard(code, books: Codebooks) -> np.ndarray:
    codes = np.asarray(code)
    single = codes.ndim == 1
    codes = np.atleast_2d(codes).astype(np.int64)
    if codes.shape[1] != books.M:
        raise DataError(f"hard code length {codes.shape[1]} != M = {books.M}")
    if codes.size and (codes.min() < 0 or codes.max() >= books.K):
        raise DataError(f"hard code index out of range [0, {books.K})")
    cn = books.normalized()
    out = cn[np.arange(books.M), codes].reshape(codes.shape[0], -1)
    return out[0] if single else out


def one_hot(codes, K: int) -> np.ndarray:
    """Soft-code form (width M*K) of hard codes."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    n, M = codes.shape
    out = np.zeros((n, M, K))
    np.put_along_axis(out, codes[..., None], 1.0, axis=-1)
    return out.reshape(n, M * K)


def omega_c(books: Codebooks) -> float:
    """Mean pairwise cosine between codewords of the same codebook."""
    cn = books.normalized()
    M, K, _ = cn.shape
    s = cn.sum(axis=1)
    return float((s * s).sum() / (M * K * K))


def normalization_backward(weights: np.ndarray, grad_normalized: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back onto the raw rows."""
    norms = np.linalg.norm(weights, axis=-1, keepdims=True)
    cn = weights / norms
    radial = (cn * grad_normalized).sum(axis=-1, keepdims=True)
    return (grad_normalized - cn * radial) / norms


def omega_c_grad_normalized(books: Codebooks) -> np.ndarray:
    """d(omega_c) / d(normalized codewords), shape (M, K, d)."""
    cn = books.normalized()
    M, K, _ = cn.shape
    s = cn.sum(axis=1, keepdims=True)
    return np.broadcast_to(2.0 * s / (M * K * K), cn.shape).copy()


def reconstruct_soft_backward(code, books: Codebooks, grad_out) -> np.ndarray:
    """Gradient w.r.t. codebook weights of ``reconstruct_soft(code, books)``.

    The stored codes are constants; only the codewords receive gradient.
    """
    pb, _ = _batch(code)
    blocks = pb.reshape(pb.shape[0], books.M, books.K)
    g = np.asarray(grad_out, dtype=np.float64).reshape(pb.shape[0], books.M, books.d)
    grad_cn = _outer_sum(blocks, g)
    return normalization_backward(books.weights, grad_cn)


def quantizer_backward(z, books: Codebooks, cfg: QuantizerConfig, grad_zhat, grad_omega=0.0):
    """Exact gradients of ``<grad_zhat, z_hat(z)> + grad_omega * omega_c``.

    Args:
        z: embeddings, (D,) or (n, D).
        books: codebooks used in the forward pass.
        cfg: quantizer settings (alpha).
        grad_zhat: upstream gradient w.r.t. the soft reconstruction, same
            shape as ``z``.
        grad_omega: upstream scalar gradient w.r.t. omega_c.

    Returns:
        (grad_z, grad_weights) with shapes of ``z`` and ``books.weights``.
    """
    zb, single = _batch(z)
    n = zb.shape[0]
    M, K, d = books.weights.shape
    u, norms, cn, p = _attention(zb, books, cfg.alpha)
    g = np.asarray(grad_zhat, dtype=np.float64).reshape(n, M, d)

    grad_p = _seg_dot(g, cn)
    grad_scores = cfg.alpha * p * (grad_p - (p * grad_p).sum(axis=-1, keepdims=True))
    grad_u = _mix(grad_scores, cn)
    grad_cn = _outer_sum(p, g) + _outer_sum(grad_scores, u)
    if grad_omega:
        grad_cn += grad_omega * omega_c_grad_normalized(books)

    radial = (u * grad_u).sum(axis=-1, keepdims=True)
    grad_z = ((grad_u - u * radial) / norms).reshape(n, M * d)
    grad_w = normalization_backward(books.weights, grad_cn)
    return (grad_z[0] if single else grad_z), grad_w
