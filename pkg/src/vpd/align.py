"""Sequence alignment, nearest-neighbor classification, and retrieval.

The alignment cost is dynamic time warping with the slope-constrained
symmetric step pattern (P=2):

    g(i,j) = min( g(i-2,j-3) + 2 d(i-1,j-2) + 2 d(i,j-1) + d(i,j),
                  g(i-1,j-1) + 2 d(i,j),
                  g(i-3,j-2) + 2 d(i-2,j-1) + 2 d(i-1,j) + d(i,j) )

with g(1,1) = 2 d(1,1), d = pairwise L2 distance, and the final cost
normalized by N+M. Pairs with no feasible warping path (guaranteed when the
length ratio is outside [1/2, 2]) cost +infinity and sort last, so retrieval
over heterogeneous-length corpora always completes.

A faster drop-in kernel for batch pairwise costs can be installed with
``set_fast_kernel``; results must agree with the reference within 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AllInfeasible, DimensionMismatch, EmptySequence

FLIP_COMBINATIONS = ((False, False), (True, False), (False, True), (True, True))


def dtw_cost(a: np.ndarray, b: np.ndarray) -> float:
    """Length-normalized alignment cost between two feature sequences.

    Returns +infinity when the slope constraint admits no path. Raises
    EmptySequence / DimensionMismatch on malformed inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionMismatch("sequences must be 2-D (frames x dim)")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySequence("cannot align an empty sequence")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    n, m = a.shape[0], b.shape[0]
    # cheap infeasibility screen; the DP below reproduces it anyway
    if n > 2 * m or m > 2 * n:
        return float("inf")

    dist = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))

    # 1-indexed grid embedded at offset +2 so the recurrence may reach back
    # three rows/columns without bounds checks
    g = np.full((n + 3, m + 3), np.inf)
    d = np.full((n + 3, m + 3), np.inf)
    d[3:, 3:] = dist
    g[3, 3] = 2.0 * dist[0, 0]
    cols = np.arange(3, m + 3)
    for i in range(3, n + 3):
        b1 = g[i - 2, cols - 3] + 2.0 * d[i - 1, cols - 2] + 2.0 * d[i, cols - 1] + d[i, cols]
        b2 = g[i - 1, cols - 1] + 2.0 * d[i, cols]
        b3 = g[i - 3, cols - 2] + 2.0 * d[i - 2, cols - 1] + 2.0 * d[i - 1, cols] + d[i, cols]
        best = np.minimum(np.minimum(b1, b2), b3)
        if i == 3:
            best[0] = g[3, 3]
        g[i, 3:] = best
    return float(g[n + 2, m + 2] / (n + m))


# Optional accelerated kernel: (list of (n_i, d) float32 arrays, list of
# (m_j, d) float32 arrays) -> (len(a), len(b)) float64 cost matrix.
_fast_kernel: Callable[[list[np.ndarray], list[np.ndarray]], np.ndarray] | None = None


def set_fast_kernel(kernel: Callable | None) -> None:
    """Install (or clear) an accelerated batch pairwise-cost implementation."""
    global _fast_kernel
    _fast_kernel = kernel


def get_fast_kernel() -> Callable | None:
    return _fast_kernel


def batch_pairwise_costs(
    queries: Sequence[np.ndarray], index: Sequence[np.ndarray]
) -> np.ndarray:
    """All-pairs alignment costs; uses the installed fast kernel when present."""
    if _fast_kernel is not None:
        return np.asarray(_fast_kernel(list(queries), list(index)), dtype=np.float64)
    out = np.empty((len(queries), len(index)))
    for qi, q in enumerate(queries):
        for ii, seq in enumerate(index):
            out[qi, ii] = dtw_cost(q, seq)
    return out


def unit_normalize(sequence: np.ndarray) -> np.ndarray:
    """Scale each frame vector to unit length (zero frames are left zero)."""
    sequence = np.asarray(sequence, dtype=np.float64)
    norms = np.linalg.norm(sequence, axis=1, keepdims=True)
    return sequence / np.maximum(norms, 1e-12)


@dataclass(frozen=True)
class AlignmentQuery:
    """A unit-normalized query plus its horizontally-flipped variant."""

    features: np.ndarray
    flipped: np.ndarray

    def __post_init__(self):
        feats = unit_normalize(self.features)
        flip = unit_normalize(self.flipped)
        if feats.shape != flip.shape:
            raise DimensionMismatch("regular and flipped sequences must match in shape")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "flipped", flip)

    @classmethod
    def from_features(cls, features: np.ndarray, flipped: np.ndarray) -> "AlignmentQuery":
        return cls(features=features, flipped=flipped)

    def variant(self, use_flip: bool) -> np.ndarray:
        return self.flipped if use_flip else self.features


@dataclass(frozen=True)
class AlignmentResult:
    cost: float
    index: int
    label: object = None

    def __post_init__(self):
        if not (self.cost >= 0.0 or np.isinf(self.cost)):
            raise ValueError("alignment cost must be non-negative or +inf")


def min_cost_over_flips(query: AlignmentQuery, entry: AlignmentQuery) -> float:
    """Minimum alignment cost over the four flip combinations."""
    best = float("inf")
    for flip_q, flip_e in FLIP_COMBINATIONS:
        cost = dtw_cost(query.variant(flip_q), entry.variant(flip_e))
        if cost < best:
            best = cost
    return best


def nns_classify(query: AlignmentQuery, index: Sequence[tuple[AlignmentQuery, object]]):
    """Label of the lowest-cost index entry over all flip combinations.

    Ties break toward the earliest index entry. Raises AllInfeasible when no
    pairing admits a feasible path.
    """
    if not index:
        raise EmptySequence("index must be nonempty")
    best_cost = float("inf")
    best_label = None
    for entry, label in index:
        cost = min_cost_over_flips(query, entry)
        if cost < best_cost:
            best_cost = cost
            best_label = label
    if np.isinf(best_cost):
        raise AllInfeasible("no feasible alignment against any index entry")
    return best_label, best_cost


def retrieve(
    query: AlignmentQuery,
    corpus: Sequence[AlignmentQuery],
    k: int | None = None,
    exclude: int | None = None,
) -> list[AlignmentResult]:
    """Rank corpus entries by ascending alignment cost.

    ``exclude`` removes the query's own corpus position from the ranking.
    Infeasible entries rank last; equal costs keep corpus order.
    """
    results = []
    for idx, entry in enumerate(corpus):
        if idx == exclude:
            continue
        results.append(AlignmentResult(cost=min_cost_over_flips(query, entry), index=idx))
    results.sort(key=lambda r: (r.cost, r.index))
    if k is not None:
        results = results[:k]
    return results


def precision_at_k(
    rankings: Sequence[Sequence[object]],
    query_labels: Sequence[object],
    k_values: Sequence[int],
) -> dict[int, float]:
    """Mean fraction of same-label results within the top k, per k.

    Rankings shorter than k are treated as padded with irrelevant results.
    """
    out = {}
    for k in k_values:
        total = 0.0
        for ranked, label in zip(rankings, query_labels):
            hits = sum(1 for r in ranked[:k] if r == label)
            total += hits / k
        out[k] = total / len(rankings) if rankings else 0.0
    return out
