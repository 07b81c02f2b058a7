"""Exact cosine top-K search over a large gallery, plus Recall@K and AP.

The gallery is an L2-normalized float32 matrix scanned with blocked inner
products; scores are accumulated in float64 so rankings are reproducible
and exact ties resolve by the documented ascending-id rule. No
approximation anywhere: the top-K set always equals a naive full scan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, ShapeError

DEFAULT_BLOCK = 4096


@dataclass(frozen=True)
class GalleryIndex:
    """Immutable search index: normalized rows plus stable integer ids."""

    matrix: np.ndarray  # (n, dim) float32, rows L2-normalized
    ids: np.ndarray     # (n,) int64, unique

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class RankedList:
    """Search result: item ids with non-increasing similarity scores."""

    query_id: int
    item_ids: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True)
class MetricsReport:
    recall_at: dict[int, float]
    mean_ap: float
    query_count: int

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"recall@{k}", v) for k, v in sorted(self.recall_at.items())]
        out.append(("mAP", self.mean_ap))
        return out


def build_index(embeddings: Sequence[tuple[int, np.ndarray]]) -> GalleryIndex:
    """Normalize and stack embeddings in input order.

    Rejects duplicate ids, zero vectors, and dimension mismatches.
    """
    if not embeddings:
        raise InputError("cannot build an index from zero embeddings")
    ids = np.array([int(i) for i, _ in embeddings], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise InputError("duplicate item ids in gallery")
    dim = len(embeddings[0][1])
    matrix = np.empty((len(embeddings), dim), dtype=np.float32)
    for row, (item_id, vec) in enumerate(embeddings):
        vec = np.asarray(vec, dtype=np.float32).ravel()
        if vec.shape[0] != dim:
            raise InputError(f"embedding dim mismatch for id {item_id}: "
                             f"{vec.shape[0]} != {dim}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise InputError(f"zero vector for id {item_id}")
        matrix[row] = vec / norm
    return GalleryIndex(matrix=matrix, ids=ids)


def _normalize_query(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != dim:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {dim}")
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise InputError("zero query vector")
    return q / norm


def _row_topk(scores: np.ndarray, ids: np.ndarray, k: int):
    """Top-k per row by (score desc, id asc): stable sort on id, then on -score."""
    order = np.argsort(ids, axis=1, kind="stable")
    s = np.take_along_axis(scores, order, axis=1)
    i = np.take_along_axis(ids, order, axis=1)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(s, order, axis=1), np.take_along_axis(i, order, axis=1)


def top_k_batch(
    index: GalleryIndex,
    queries: np.ndarray,
    k: int,
    block_size: int = DEFAULT_BLOCK,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k for a batch of queries; returns (ids, scores), each (m, k).

    Scans the gallery in row blocks, keeping a running top-k per query.
    Within-block survivors are merged under the same (score desc, id asc)
    order used globally, so the result is identical to a full sort.
    """
    if queries.ndim != 2:
        raise ShapeError(f"queries must be (m, dim), got {queries.shape}")
    if not 1 <= k <= index.n:
        raise InputError(f"k={k} out of range [1, {index.n}]")
    qn = np.stack([_normalize_query(q, index.dim) for q in queries])
    m = qn.shape[0]
    best_scores = np.full((m, 0), -np.inf)
    best_ids = np.zeros((m, 0), dtype=np.int64)
    for start in range(0, index.n, block_size):
        block = index.matrix[start:start + block_size]
        scores = qn @ block.T.astype(np.float64)
        ids = np.broadcast_to(index.ids[start:start + block_size],
                              scores.shape)
        cand_scores = np.concatenate([best_scores, scores], axis=1)
        cand_ids = np.concatenate([best_ids, ids], axis=1)
        best_scores, best_ids = _row_topk(cand_scores, cand_ids,
                                          min(k, cand_scores.shape[1]))
    return best_ids, best_scores


def top_k(index: GalleryIndex, query: np.ndarray, k: int,
          block_size: int = DEFAULT_BLOCK, query_id: int = 0) -> RankedList:
    """Exact cosine top-k for one query; ties broken by ascending id."""
    ids, scores = top_k_batch(index, np.asarray(query)[None, :], k, block_size)
    return RankedList(query_id=query_id, item_ids=ids[0], scores=scores[0])


def recall_at_k(
    results: Sequence[RankedList],
    ground_truth: Mapping[int, set],
    k: int,
) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if not results:
        raise InputError("no results to score")
    hits = 0
    for r in results:
        if r.query_id not in ground_truth:
            raise InputError(f"query {r.query_id} missing from ground truth")
        relevant = ground_truth[r.query_id]
        if not relevant:
            raise InputError(f"query {r.query_id} has an empty relevant set")
        if relevant.intersection(r.item_ids[:k].tolist()):
            hits += 1
    return hits / len(results)


def average_precision(result: RankedList, relevant: set) -> float:
    """Mean of precision@rank over the ranks of the relevant items.

    ``result`` must rank the whole gallery so every relevant item has a rank.
    """
    if not relevant:
        raise InputError("relevant set is empty")
    rel_mask = np.isin(result.item_ids, list(relevant))
    found = int(rel_mask.sum())
    if found != len(relevant):
        raise InputError(f"{len(relevant) - found} relevant ids missing from "
                         "the ranked list; AP needs a full-gallery ranking")
    ranks = np.arange(1, len(result.item_ids) + 1)
    precision = np.cumsum(rel_mask) / ranks
    return float(precision[rel_mask].mean())


def evaluate(
    queries: Sequence[tuple[int, np.ndarray]],
    index: GalleryIndex,
    ground_truth: Mapping[int, set],
    ks: Sequence[int],
) -> MetricsReport:
    """Recall@K for each K plus mean AP over all queries (full ranking)."""
    if list(ks) != sorted(ks) or len(ks) == 0:
        raise InputError(f"ks must be non-empty and ascending, got {ks}")
    if max(ks) > index.n:
        raise InputError(f"max k {max(ks)} exceeds gallery size {index.n}")
    results = []
    aps = []
    for query_id, vec in queries:
        ranked = top_k(index, vec, index.n, query_id=query_id)
        results.append(ranked)
        if query_id not in ground_truth:
            raise InputError(f"query {query_id} missing from ground truth")
        aps.append(average_precision(ranked, ground_truth[query_id]))
    recalls = {int(k): recall_at_k(results, ground_truth, k) for k in ks}
    return MetricsReport(recall_at=recalls, mean_ap=float(np.mean(aps)),
                         query_count=len(results))


def report_to_csv(report: MetricsReport, path) -> None:
    """CSV rows ``metric,value``, one per Recall@K plus one for mAP."""
    with open(path, "w") as f:
        for name, value in report.rows():
            f.write(f"{name},{value:.6f}\n")


def format_report(report: MetricsReport) -> str:
    lines = [f"{'metric':<12} value", "-" * 19]
    for name, value in report.rows():
        lines.append(f"{name:<12} {value:.4f}")
    lines.append(f"({report.query_count} queries)")
    return "\n".join(lines)
