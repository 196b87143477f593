"""Contrastive losses over soft-quantized reconstructions.

Rows of a batch come in view pairs: row ``2i`` and ``2i + 1`` are the two
views of item ``i`` and are each other's positive key. Every other batch
row, and every memory row, is a negative key. Similarities are raw dot
products of reconstructions (no renormalization).

The debiased loss corrects the negative mass for the prior probability
``rho_pos`` that a sampled negative is really a positive. That estimate can
go negative, so when ``rho_pos > 0`` it is floored at
``n_neg * exp(-1 / tau)`` before the log; the floored part then carries no
gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class ContrastiveBatch:
    embeddings: np.ndarray
    tau: float = 0.4
    rho_pos: float = 0.0

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2:
            raise DataError(f"embeddings must be 2-D, got shape {e.shape}")
        if e.shape[0] < 4 or e.shape[0] % 2:
            raise DataError(f"need an even number (>= 4) of rows, got {e.shape[0]}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.rho_pos < 1:
            raise ConfigError(f"rho_pos must be in [0, 1), got {self.rho_pos}")
        self.embeddings = e


@dataclass
class LossReport:
    """Loss value, its gradients, and per-query diagnostics.

    ``score_grads`` holds d(loss)/d(s_qk) for the batch columns followed by
    the memory columns, before any mean reduction is applied to it.
    """

    loss: float
    grad_embeddings: np.ndarray
    grad_memory: Optional[np.ndarray]
    per_query_scores: np.ndarray
    per_query_loss: np.ndarray
    probs: np.ndarray
    score_grads: np.ndarray
    floor_engaged: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def similarity(zq, zk) -> float:
    zq = np.asarray(zq, dtype=np.float64)
    zk = np.asarray(zk, dtype=np.float64)
    if zq.shape != zk.shape:
        raise DataError(f"shape mismatch {zq.shape} vs {zk.shape}")
    return float(zq @ zk)


def positive_index(n_rows: int) -> np.ndarray:
    return np.arange(n_rows) ^ 1


def _contrastive(emb, memory, tau, rho, reduction="sum") -> LossReport:
    n = emb.shape[0]
    if memory is None:
        memory = np.zeros((0, emb.shape[1]))
    memory = np.asarray(memory, dtype=np.float64)
    if memory.ndim != 2 or memory.shape[1] != emb.shape[1]:
        raise DataError(f"memory width {memory.shape[-1]} != embedding width {emb.shape[1]}")
    n_mem = memory.shape[0]
    rows = np.arange(n)
    pos = positive_index(n)

    scores = np.concatenate([emb @ emb.T, emb @ memory.T], axis=1)
    logits = scores / tau
    valid = np.ones_like(logits, dtype=bool)
    valid[rows, rows] = False
    shift = np.where(valid, logits, -np.inf).max(axis=1)

    e = np.exp(np.where(valid, logits - shift[:, None], -np.inf))
    e_pos = e[rows, pos]
    neg = e.copy()
    neg[rows, pos] = 0.0
    neg_sum = neg.sum(axis=1)
    n_neg = n - 2 + n_mem

    if rho > 0:
        mass = (neg_sum - n_neg * rho * e_pos) / (1.0 - rho)
        floor = n_neg * np.exp(-1.0 / tau - shift)
        engaged = mass < floor
        mass = np.where(engaged, floor, mass)
        if engaged.any():
            log.debug("negative-mass floor engaged for %d of %d queries", engaged.sum(), n)
    else:
        mass = neg_sum
        engaged = np.zeros(n, dtype=bool)

    denom = e_pos + mass
    per_query = -(logits[rows, pos] - shift) + np.log(denom)

    live = ~engaged
    g = np.where(live[:, None], neg / (tau * (1.0 - rho)), 0.0) / denom[:, None]
    g_pos = -1.0 / tau + e_pos / (tau * denom)
    g_pos -= np.where(live, n_neg * rho * e_pos / (tau * (1.0 - rho)), 0.0) / denom
    g[rows, pos] = g_pos

    weight = 1.0 / n if reduction == "mean" else 1.0
    gw = g * weight
    g_in, g_mem = gw[:, :n], gw[:, n:]
    grad_emb = (g_in + g_in.T) @ emb + g_mem @ memory
    grad_mem = g_mem.T @ emb

    probs = e / (e_pos + neg_sum)[:, None]
    return LossReport(
        loss=float(per_query.sum() * weight),
        grad_embeddings=grad_emb,
        grad_memory=grad_mem,
        per_query_scores=scores,
        per_query_loss=per_query,
        probs=probs,
        score_grads=g,
        floor_engaged=engaged,
    )


def vanilla_cl_loss(batch: ContrastiveBatch, reduction: str = "sum") -> LossReport:
    """InfoNCE summed (or averaged) over every row as query; ignores rho_pos."""
    rep = _contrastive(batch.embeddings, None, batch.tau, 0.0, reduction)
    rep.grad_memory = None
    return rep


def debiased_cl_loss(batch: ContrastiveBatch, reduction: str = "sum") -> LossReport:
    rep = _contrastive(batch.embeddings, None, batch.tau, batch.rho_pos, reduction)
    rep.grad_memory = None
    return rep


def memory_cl_loss(batch: ContrastiveBatch, memory_embeddings, reduction: str = "sum") -> LossReport:
    """Debiased loss with extra negatives reconstructed from the code memory."""
    return _contrastive(batch.embeddings, memory_embeddings, batch.tau, batch.rho_pos, reduction)


@dataclass
class NormOrderingReport:
    trials: int
    queries: int
    violations: int
    min_gap: float
    max_identity_error: float


def key_gradient_norms(batch: ContrastiveBatch):
    """Per-query norms of d L_CL(x_q) / d z_hat_k for the positive and each negative key.

    Returns:
        (pos_norms, neg_norms): shapes (2N,) and (2N, 2N - 2).
    """
    rep = vanilla_cl_loss(batch)
    emb = batch.embeddings
    n = emb.shape[0]
    qnorm = np.linalg.norm(emb, axis=1)
    # L_q depends on key row k only through s_qk = z_q . z_k
    mags = np.abs(rep.score_grads[:, :n]) * qnorm[:, None]
    pos = positive_index(n)
    rows = np.arange(n)
    pos_norms = mags[rows, pos]
    mask = np.ones((n, n), dtype=bool)
    mask[rows, rows] = False
    mask[rows, pos] = False
    neg_norms = mags[mask].reshape(n, n - 2)
    return pos_norms, neg_norms


def single_query_key_norms(zq, z_pos, z_negs, tau: float):
    """Key gradient norms for one query against explicit positive/negative keys.

    Covers the single-negative boundary case that a paired batch cannot
    express.
    """
    zq = np.asarray(zq, dtype=np.float64)
    keys = np.vstack([np.asarray(z_pos, dtype=np.float64)[None, :], np.atleast_2d(z_negs)])
    logits = keys @ zq / tau
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    qn = np.linalg.norm(zq)
    g_pos = -(1.0 / tau) * probs[1:].sum()
    g_neg = probs[1:] / tau
    return abs(g_pos) * qn, g_neg * qn


def check_proposition1(trials: int, rng: np.random.Generator, n_items: int = 8,
                       dim: int = 16, tau: float = 0.4, make_batch=None) -> NormOrderingReport:
    """Sweep random batches and check that the positive key gets the largest gradient.

    For every query the positive-key gradient norm must exceed each negative
    key's norm, which must be positive, and must equal the sum of the
    negative norms (to 1e-8 relative).
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    violations = 0
    queries = 0
    min_gap = np.inf
    max_err = 0.0
    for _ in range(trials):
        if make_batch is None:
            emb = rng.standard_normal((2 * n_items, dim)) / np.sqrt(dim)
            batch = ContrastiveBatch(emb, tau=tau)
        else:
            batch = make_batch(rng)
        pos_norms, neg_norms = key_gradient_norms(batch)
        queries += len(pos_norms)
        strict = (pos_norms[:, None] > neg_norms) & (neg_norms > 0)
        violations += int((~strict).sum())
        min_gap = min(min_gap, float((pos_norms[:, None] - neg_norms).min()))
        rel = np.abs(pos_norms - neg_norms.sum(axis=1)) / pos_norms
        max_err = max(max_err, float(rel.max()))
    return NormOrderingReport(trials, queries, violations, min_gap, max_err)
