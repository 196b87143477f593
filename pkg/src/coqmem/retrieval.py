"""Database encoding, asymmetric quantized similarity (AQS) search, and metrics.

Queries stay continuous; database items are stored as hard codes. For a
query, a lookup table ``xi[m, i]`` holds the cosine between query segment
``m`` and codeword ``i`` of codebook ``m``, and an item's score is the sum
of the table entries its code selects.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import dataio
from .errors import DataError
from .quantizer import Codebooks, normalize_segments, quantize_hard
from .trainer import EmbeddingLayer, embed

MAP_CONVENTIONS = ("paper", "standard")


@dataclass
class RetrievalIndex:
    books: Codebooks
    codes: np.ndarray  # (count, M), uint8 when K <= 256

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.shape[1] != self.books.M:
            raise DataError(f"codes must be (count, {self.books.M}), got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.books.K):
            raise DataError(f"code index out of range [0, {self.books.K})")
        self.codes = np.ascontiguousarray(codes.astype(dataio.code_dtype(self.books.K)))

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    def save_codes(self, path) -> None:
        dataio.write_codes(self.codes, self.books.K, path)

    @classmethod
    def from_files(cls, books: Codebooks, code_path) -> "RetrievalIndex":
        codes, K = dataio.load_codes(code_path)
        if K != books.K:
            raise DataError(f"code file K={K} does not match codebooks K={books.K}")
        return cls(books, codes)


@dataclass
class RankedResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.scores.tolist()))


def encode_database(vectors, layer: EmbeddingLayer, books: Codebooks) -> RetrievalIndex:
    z = embed(layer, np.atleast_2d(vectors))
    return RetrievalIndex(books, quantize_hard(z, books))


def build_lookup(zq, books: Codebooks) -> np.ndarray:
    """(M, K) table of cosines between query segments and codewords."""
    u = normalize_segments(zq, books.M)
    table = np.matmul(u[..., None, :], books.normalized().swapaxes(1, 2))[..., 0, :]
    return table


def aqs_score(table, code) -> float:
    table = np.asarray(table)
    code = np.asarray(code, dtype=np.int64)
    M, K = table.shape
    if code.shape != (M,):
        raise DataError(f"code must have length {M}, got shape {code.shape}")
    if code.min() < 0 or code.max() >= K:
        raise DataError(f"code index out of range [0, {K})")
    return float(table[np.arange(M), code].sum())


def aqs_scores(table, codes) -> np.ndarray:
    """Scores of every database code against one table."""
    table = np.asarray(table)
    acc = np.zeros(codes.shape[0])
    for m in range(table.shape[0]):
        acc += table[m, codes[:, m]]
    return acc


def _top(scores: np.ndarray, n: int) -> np.ndarray:
    # ascending id among equal scores: stable sort on the negated scores
    if n < len(scores):
        part = np.argpartition(-scores, n - 1)[:n]
        cutoff = scores[part].min()
        cand = np.flatnonzero(scores >= cutoff)
        order = cand[np.argsort(-scores[cand], kind="stable")]
        return order[:n]
    return np.argsort(-scores, kind="stable")


def search_topn(index: RetrievalIndex, layer: EmbeddingLayer, query, n: int) -> RankedResult:
    if n < 1:
        raise DataError("n must be >= 1")
    if index.count == 0:
        raise DataError("empty index")
    zq = embed(layer, np.asarray(query, dtype=np.float64))
    scores = aqs_scores(build_lookup(zq, index.books), index.codes)
    order = _top(scores, n)
    return RankedResult(order, scores[order])


def search_batch(index: RetrievalIndex, layer: EmbeddingLayer, queries, n: int):
    """Top-n ids and scores for each query row; arrays of shape (q, min(n, count))."""
    if n < 1:
        raise DataError("n must be >= 1")
    if index.count == 0:
        raise DataError("empty index")
    z = embed(layer, np.atleast_2d(queries))
    tables = build_lookup(z, index.books)
    k = min(n, index.count)
    ids = np.empty((len(z), k), dtype=np.int64)
    scores = np.empty((len(z), k))
    for q, table in enumerate(tables):
        s = aqs_scores(table, index.codes)
        order = _top(s, k)
        ids[q] = order
        scores[q] = s[order]
    return ids, scores


# ---------------------------------------------------------------- metrics


def relevance_from_labels(query_labels, db_labels) -> np.ndarray:
    """Boolean (q, count) matrix: item shares at least one label with the query.

    Both arguments are 1-D label arrays or sequences of label sets.
    """
    def as_sets(labels):
        if isinstance(labels, np.ndarray) and labels.ndim == 1:
            return None
        return [set(np.asarray(l).ravel().tolist()) for l in labels]

    qs, ds = as_sets(query_labels), as_sets(db_labels)
    if qs is None and ds is None:
        return np.asarray(query_labels)[:, None] == np.asarray(db_labels)[None, :]
    if qs is None:
        qs = [{int(l)} for l in query_labels]
    if ds is None:
        ds = [{int(l)} for l in db_labels]
    universe = sorted(set().union(*qs, *ds))
    pos = {l: i for i, l in enumerate(universe)}

    def encode(sets):
        out = np.zeros((len(sets), len(universe)), dtype=bool)
        for r, s in enumerate(sets):
            out[r, [pos[l] for l in s]] = True
        return out

    return (encode(qs).astype(np.int32) @ encode(ds).T.astype(np.int32)) > 0


@dataclass
class MetricReport:
    value: float
    per_query: np.ndarray
    excluded: list


def evaluate(layer: EmbeddingLayer, books: Codebooks, query: dataio.FeatureDataset,
             database: dataio.FeatureDataset, n: int, convention: str = "paper") -> float:
    """MAP@n of ``query`` against ``database`` with label-overlap relevance."""
    index = encode_database(database.vectors, layer, books)
    ids, _ = search_batch(index, layer, query.vectors, n)
    rel = relevance_from_labels(query.labels, database.labels)
    return map_at_n(ids, rel, n, convention)


def _hits(ranked_ids, relevance, n):
    ranked = np.asarray(ranked_ids)[:, :n]
    rel = np.asarray(relevance, dtype=bool)
    return np.take_along_axis(rel, ranked, axis=1), rel.sum(axis=1)


def average_precision(ranked_ids, relevance, n: int, convention: str = "paper") -> MetricReport:
    """Per-query truncated AP.

    ``paper`` divides the summed precision-at-hits by |R_q| (all relevant
    items); ``standard`` divides by min(n, |R_q|).
    """
    if convention not in MAP_CONVENTIONS:
        raise DataError(f"convention must be one of {MAP_CONVENTIONS}")
    hits, n_rel = _hits(ranked_ids, relevance, n)
    ranks = np.arange(1, hits.shape[1] + 1)
    prec = np.cumsum(hits, axis=1) / ranks
    num = (prec * hits).sum(axis=1)
    denom = n_rel if convention == "paper" else np.minimum(n, n_rel)
    excluded = np.flatnonzero(n_rel == 0).tolist()
    with np.errstate(invalid="ignore", divide="ignore"):
        ap = np.where(n_rel > 0, num / np.maximum(denom, 1), np.nan)
    return MetricReport(float(np.nanmean(ap)) if len(excluded) < len(ap) else float("nan"),
                        ap, excluded)


def map_at_n(ranked_ids, relevance, n: int, convention: str = "paper") -> float:
    """Mean over queries (with at least one relevant item) of truncated AP."""
    return average_precision(ranked_ids, relevance, n, convention).value


def precision_at_n(ranked_ids, relevance, grid: Iterable[int]) -> dict:
    """Mean Precision@k for each k in ``grid`` over queries with relevant items."""
    grid = list(grid)
    hits, n_rel = _hits(ranked_ids, relevance, max(grid))
    keep = n_rel > 0
    cum = np.cumsum(hits[keep], axis=1)
    return {k: float((cum[:, min(k, cum.shape[1]) - 1] / k).mean()) for k in grid}


def pr_curve(ranked_ids, relevance):
    """Mean precision and recall at every rank position of the returned lists."""
    hits, n_rel = _hits(ranked_ids, relevance, np.asarray(ranked_ids).shape[1])
    keep = n_rel > 0
    cum = np.cumsum(hits[keep], axis=1)
    ranks = np.arange(1, hits.shape[1] + 1)
    precision = (cum / ranks).mean(axis=0)
    recall = (cum / n_rel[keep][:, None]).mean(axis=0)
    return precision, recall


# ---------------------------------------------------------------- file outputs


def write_results_csv(path, ids, scores, query_ids: Sequence[int] | None = None) -> None:
    ids = np.asarray(ids)
    query_ids = range(len(ids)) if query_ids is None else query_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "db_id", "score"])
        for q, row_ids, row_scores in zip(query_ids, ids, scores):
            for r, (i, s) in enumerate(zip(row_ids, row_scores), start=1):
                w.writerow([q, r, int(i), repr(float(s))])


def read_results_csv(path):
    """Inverse of ``write_results_csv``; returns (query_ids, ids, scores)."""
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["query_id", "rank", "db_id", "score"]:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.setdefault(int(rec["query_id"]), []).append(
                (int(rec["rank"]), int(rec["db_id"]), float(rec["score"])))
    qids = sorted(rows)
    width = {len(v) for v in rows.values()}
    if len(width) > 1:
        raise DataError(f"{path}: ragged result lists")
    ids = np.array([[r[1] for r in sorted(rows[q])] for q in qids], dtype=np.int64)
    scores = np.array([[r[2] for r in sorted(rows[q])] for q in qids])
    return qids, ids, scores


def write_metrics_json(path, map_value: float, precision_at: dict, **extra) -> None:
    doc = {"map": map_value, "precision_at": {str(k): v for k, v in precision_at.items()}, **extra}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
