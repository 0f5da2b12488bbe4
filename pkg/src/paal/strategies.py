"""Sample-selection policies behind one dispatch surface.

The headline strategy turns predicted per-class accuracies into query
weights (mean negative log), clusters the pool by pooled features, and polls
the clusters round-robin for their highest-weight members. The rest are the
usual uncertainty/diversity baselines. All tie-breaks go to the lowest
sample id (and lowest cluster index) so selections are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kmeans import kmeans_fit
from .metrics import uncertainty_scores

STRATEGY_NAMES = (
    "random",
    "max_entropy",
    "least_conf",
    "margin",
    "var_ratio",
    "kmeans_diversity",
    "entropy_kmeans",
    "coreset",
    "paal_ap_only",
    "paal_full",
)

ENTROPY_KMEANS_CANDIDATE_FACTOR = 4

WEIGHT_CLIP_EPS = 1e-6


@dataclass
class QueryContext:
    """Everything a strategy may need about the current unlabeled pool.

    Per-sample arrays are aligned with ``ids``; strategies that need a field
    left as None raise.
    """
    ids: np.ndarray
    b: int
    seed: int
    probs: np.ndarray | None = None             # (n, C, H, W) posteriors
    features: np.ndarray | None = None          # (n, dim) pooled embeddings
    pred_acc: np.ndarray | None = None          # (n, C_fg) predicted accuracy
    labeled_features: np.ndarray | None = None  # (m, dim), coreset only

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.b > len(self.ids):
            raise ValueError(f"batch size {self.b} exceeds pool size {len(self.ids)}")


def query_weights(pred_acc: np.ndarray, eps: float = WEIGHT_CLIP_EPS) -> np.ndarray:
    """Mean negative log of predicted per-class accuracy, clipped to [eps, 1].

    Low predicted accuracy on any class drives the weight up; the log mean
    amplifies classes the model is expected to get badly wrong.
    """
    p = np.clip(np.asarray(pred_acc, dtype=np.float64), eps, 1.0)
    return (-np.log(p)).mean(axis=1)


def cluster_count(b: int) -> int:
    """Number of clusters for a query batch of size b: floor(log2(4b) + 1)."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    return max(1, (4 * b).bit_length())


def _top_by_score(ids: np.ndarray, scores: np.ndarray, b: int) -> np.ndarray:
    """Highest-score ids first; equal scores break toward the lower id."""
    order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
    return ids[order[:b]]


def weighted_polling(assignments: np.ndarray, weights: np.ndarray,
                     ids: np.ndarray, b: int) -> np.ndarray:
    """Round-robin the clusters, taking each one's heaviest unselected member.

    Clusters are visited in order of descending maximum member weight
    (ties: lower cluster index first); exhausted clusters are skipped until
    b samples are drawn.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if b > n:
        raise ValueError(f"cannot select {b} from {n} samples")
    weights = np.asarray(weights, dtype=np.float64)

    queues: dict[int, list[int]] = {}
    for cluster in np.unique(assignments):
        members = np.flatnonzero(assignments == cluster)
        order = np.lexsort((ids[members], -weights[members]))
        queues[int(cluster)] = list(members[order])
    visit = sorted(queues, key=lambda c: (-weights[queues[c][0]], c))

    selected: list[int] = []
    cursors = {c: 0 for c in visit}
    while len(selected) < b:
        progressed = False
        for c in visit:
            if len(selected) == b:
                break
            q = queues[c]
            if cursors[c] < len(q):
                selected.append(q[cursors[c]])
                cursors[c] += 1
                progressed = True
        if not progressed:
            raise RuntimeError("polling stalled before filling the batch")
    return ids[np.asarray(selected, dtype=np.int64)]


def coreset_select(labeled_features: np.ndarray, unlabeled_features: np.ndarray,
                   ids: np.ndarray, b: int) -> np.ndarray:
    """Greedy k-center: repeatedly take the point farthest from everything chosen."""
    ids = np.asarray(ids, dtype=np.int64)
    feats = np.asarray(unlabeled_features, dtype=np.float64)
    n = len(ids)
    if b > n:
        raise ValueError(f"cannot select {b} from {n} samples")
    labeled = np.asarray(labeled_features, dtype=np.float64).reshape(
        -1, feats.shape[1])

    if labeled.shape[0]:
        min_d = _min_dists(feats, labeled)
    else:
        # nothing labeled yet: anchor on the pool centroid
        min_d = _min_dists(feats, feats.mean(axis=0, keepdims=True))

    chosen: list[int] = []
    available = np.ones(n, dtype=bool)
    for _ in range(b):
        masked = np.where(available, min_d, -np.inf)
        best = masked.max()
        cand = np.flatnonzero((masked == best) & available)
        pick = cand[np.argmin(ids[cand])]
        chosen.append(int(pick))
        available[pick] = False
        min_d = np.minimum(min_d, _min_dists(feats, feats[pick:pick + 1]))
    return ids[np.asarray(chosen, dtype=np.int64)]


def _min_dists(points: np.ndarray, refs: np.ndarray) -> np.ndarray:
    best = np.full(points.shape[0], np.inf)
    for r in refs:
        diff = points - r
        best = np.minimum(best, np.einsum("nd,nd->n", diff, diff))
    return np.sqrt(best)


def _kmeans_diversity(features: np.ndarray, ids: np.ndarray, b: int,
                      seed: int) -> np.ndarray:
    """K-means with one cluster per slot, picking each cluster's most central member."""
    model = kmeans_fit(np.asarray(features, dtype=np.float64), b, seed)
    chosen: list[int] = []
    taken = np.zeros(len(ids), dtype=bool)
    for c in range(b):
        members = np.flatnonzero((model.assignments == c) & ~taken)
        if members.size == 0:
            continue
        diff = features[members] - model.centroids[c]
        d = np.einsum("nd,nd->n", diff.astype(np.float64), diff.astype(np.float64))
        order = np.lexsort((ids[members], d))
        pick = members[order[0]]
        chosen.append(int(pick))
        taken[pick] = True
    if len(chosen) < b:  # degenerate feature sets can empty clusters
        leftovers = np.flatnonzero(~taken)
        leftovers = leftovers[np.argsort(ids[leftovers])]
        chosen.extend(int(i) for i in leftovers[:b - len(chosen)])
    return ids[np.asarray(chosen, dtype=np.int64)]


def _require(ctx: QueryContext, field_name: str, strategy: str):
    value = getattr(ctx, field_name)
    if value is None:
        raise ValueError(f"strategy {strategy!r} requires QueryContext.{field_name}")
    return value


def select(strategy: str, ctx: QueryContext, with_info: bool = False):
    """Pick ``ctx.b`` distinct sample ids from the pool using ``strategy``.

    With ``with_info`` also returns per-selected-sample diagnostics:
    the score/weight that drove the choice and, for the polling strategy,
    the cluster each sample came from.
    """
    if strategy not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGY_NAMES)}")
    ids, b = ctx.ids, ctx.b
    info: dict[str, np.ndarray] = {}

    if strategy == "random":
        rng = np.random.default_rng(ctx.seed)
        selected = ids[rng.choice(len(ids), size=b, replace=False)]
    elif strategy in ("max_entropy", "least_conf", "margin", "var_ratio"):
        probs = _require(ctx, "probs", strategy)
        scores = uncertainty_scores(strategy, probs)
        selected = _top_by_score(ids, scores, b)
        info["weight"] = _lookup(ids, scores, selected)
    elif strategy == "kmeans_diversity":
        feats = _require(ctx, "features", strategy)
        selected = _kmeans_diversity(feats, ids, b, ctx.seed)
    elif strategy == "entropy_kmeans":
        probs = _require(ctx, "probs", strategy)
        feats = _require(ctx, "features", strategy)
        scores = uncertainty_scores("max_entropy", probs)
        n_cand = min(ENTROPY_KMEANS_CANDIDATE_FACTOR * b, len(ids))
        cand_ids = _top_by_score(ids, scores, n_cand)
        pos = _positions(ids, cand_ids)
        selected = _kmeans_diversity(feats[pos], ids[pos], b, ctx.seed)
        info["weight"] = _lookup(ids, scores, selected)
    elif strategy == "coreset":
        feats = _require(ctx, "features", strategy)
        labeled = _require(ctx, "labeled_features", strategy)
        selected = coreset_select(labeled, feats, ids, b)
    elif strategy == "paal_ap_only":
        pred = _require(ctx, "pred_acc", strategy)
        weights = query_weights(pred)
        selected = _top_by_score(ids, weights, b)
        info["weight"] = _lookup(ids, weights, selected)
    else:  # paal_full
        pred = _require(ctx, "pred_acc", strategy)
        feats = _require(ctx, "features", strategy)
        weights = query_weights(pred)
        k = min(cluster_count(b), len(ids))
        model = kmeans_fit(np.asarray(feats, dtype=np.float64), k, ctx.seed)
        selected = weighted_polling(model.assignments, weights, ids, b)
        info["weight"] = _lookup(ids, weights, selected)
        info["cluster"] = _lookup(ids, model.assignments, selected)

    if with_info:
        return selected, info
    return selected


def _positions(ids: np.ndarray, wanted: np.ndarray) -> np.ndarray:
    index = {int(s): i for i, s in enumerate(ids)}
    return np.asarray([index[int(s)] for s in wanted], dtype=np.int64)


def _lookup(ids: np.ndarray, values: np.ndarray, selected: np.ndarray) -> np.ndarray:
    return values[_positions(ids, selected)]
