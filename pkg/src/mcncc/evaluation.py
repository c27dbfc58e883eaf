"""Retrieval metrics and diagnostic protocols.

Average precision, precision/recall sweeps, and the cumulative match
characteristic are all rank-based: any strictly monotone transform of
the scores leaves them unchanged.  Ties are resolved once, when the
ranked list is built (stable order by item id), so every metric is
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .correlate import AlignmentConfig, CorrelationScorer, score_database
from .errors import ProtocolError
from .tensor import FeatureMap, extract_patch


@dataclass(frozen=True)
class RankedList:
    """Items sorted by descending score with per-item relevance flags."""

    ids: tuple
    scores: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        relevance = np.asarray(self.relevance, dtype=bool)
        ids = tuple(self.ids)
        if len(ids) == 0:
            raise ProtocolError("ranked list must contain at least one item")
        if scores.shape != (len(ids),) or relevance.shape != (len(ids),):
            raise ProtocolError("ids, scores, and relevance must have equal length")
        if np.any(np.diff(scores) > 0):
            raise ProtocolError("scores must be non-increasing")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "relevance", relevance)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_scores(cls, ids: Sequence, scores: Sequence[float], relevant_ids) -> "RankedList":
        """Sort descending by score; ties fall back to id order."""
        relevant = set(relevant_ids)
        order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), str(ids[i])))
        return cls(
            ids=tuple(ids[i] for i in order),
            scores=np.array([float(scores[i]) for i in order]),
            relevance=np.array([ids[i] in relevant for i in order], dtype=bool),
        )

    def rank_of_first_relevant(self) -> int:
        hits = np.flatnonzero(self.relevance)
        if hits.size == 0:
            raise ProtocolError("ranked list contains no relevant item")
        return int(hits[0]) + 1


@dataclass(frozen=True)
class CmcCurve:
    """Recall as a function of database items reviewed; monotone in k."""

    recall_at_k: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.recall_at_k, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ProtocolError("CMC curve must be a nonempty vector")
        if np.any(np.diff(arr) < 0) or arr.min() < 0 or arr.max() > 1:
            raise ProtocolError("CMC curve must be non-decreasing within [0, 1]")
        object.__setattr__(self, "recall_at_k", arr)

    def at(self, k: int) -> float:
        return float(self.recall_at_k[k - 1])


def average_precision(ranked: RankedList) -> float:
    """Mean over relevant items of (relevant seen so far) / rank."""
    rel = ranked.relevance
    if not rel.any():
        raise ProtocolError("average precision undefined without relevant items")
    ranks = np.flatnonzero(rel) + 1
    hits = np.arange(1, ranks.size + 1)
    return float(np.mean(hits / ranks))


def pr_curve(ranked: RankedList) -> list[tuple[float, float]]:
    """(recall, precision) at each threshold between distinct scores."""
    rel = ranked.relevance
    if not rel.any():
        raise ProtocolError("precision/recall undefined without relevant items")
    total = int(rel.sum())
    cum = np.cumsum(rel)
    # Last index of each distinct-score block = everything at or above
    # that threshold.
    scores = ranked.scores
    block_ends = np.flatnonzero(np.diff(scores) != 0)
    cuts = np.concatenate([block_ends, [len(scores) - 1]])
    points = []
    for k in cuts:
        taken = k + 1
        points.append((float(cum[k] / total), float(cum[k] / taken)))
    return points


def cmc(ranks_of_true_match: Sequence[int], db_size: int) -> CmcCurve:
    """Fraction of queries whose true match appears within the top k."""
    ranks = np.asarray(list(ranks_of_true_match), dtype=np.int64)
    if ranks.size == 0:
        raise ProtocolError("need at least one query rank")
    if ranks.min() < 1 or ranks.max() > db_size:
        raise ProtocolError(
            f"ranks must lie in [1, {db_size}], got [{ranks.min()}, {ranks.max()}]"
        )
    ks = np.arange(1, db_size + 1)
    curve = (ranks[None, :] <= ks[:, None]).mean(axis=1)
    return CmcCurve(recall_at_k=curve)


# Query-area bins: fraction of the ground-truth impression the query covers.
OCCLUSION_BINS = (
    ("full", 0.875, 1.0, True),
    ("three_quarter", 0.625, 0.875, False),
    ("half", 0.375, 0.625, False),
    ("quarter", 0.0, 0.375, False),
)


def occlusion_bin(ratio: float) -> str:
    if not 0.0 <= ratio <= 1.0:
        raise ProtocolError(f"area ratio must lie in [0, 1], got {ratio}")
    for name, lo, hi, closed_hi in OCCLUSION_BINS:
        if lo <= ratio and (ratio <= hi if closed_hi else ratio < hi):
            return name
    raise ProtocolError(f"no occlusion bin for ratio {ratio}")  # pragma: no cover


def occlusion_binned_report(
    ranks: Sequence[int], area_ratios: Sequence[float], db_size: int
) -> dict:
    """Per-bin correct-match percentage at 1% and 10% of the database.

    Empty bins are absent from the result rather than reported as zero.
    """
    if len(ranks) != len(area_ratios):
        raise ProtocolError("ranks and area ratios must pair up")
    k1 = max(1, math.ceil(0.01 * db_size))
    k10 = max(1, math.ceil(0.10 * db_size))
    groups: dict[str, list[int]] = {}
    for rank, ratio in zip(ranks, area_ratios):
        groups.setdefault(occlusion_bin(ratio), []).append(rank)
    report = {}
    for name, _, _, _ in OCCLUSION_BINS:
        if name not in groups:
            continue
        rs = np.asarray(groups[name])
        report[name] = {
            "count": int(rs.size),
            "recall_at_1pct": float(100.0 * (rs <= k1).mean()),
            "recall_at_10pct": float(100.0 * (rs <= k10).mean()),
        }
    return report


class ChannelStatsReport(NamedTuple):
    channel_order: np.ndarray  # channel indices sorted by std of means, ascending
    std_of_means: np.ndarray  # sorted ascending, aligned with channel_order
    scatter: np.ndarray  # (n_patches, C, 2) of per-patch (mean, std)


def channel_stats_report(patches: Iterable[FeatureMap]) -> ChannelStatsReport:
    """How much per-patch channel statistics wander across a dataset.

    For each channel, the standard deviation (over patches) of the
    per-patch channel mean; channels where this is large are the ones
    local normalization treats very differently from global.
    """
    means = []
    stds = []
    channels = None
    for patch in patches:
        if channels is None:
            channels = patch.channels
        elif patch.channels != channels:
            raise ProtocolError("patches disagree in channel count")
        sel = patch.values[:, patch.valid_mask()]
        means.append(sel.mean(axis=1))
        stds.append(sel.std(axis=1))
    if len(means) < 2:
        raise ProtocolError("need at least 2 patches for a channel report")
    mean_mat = np.stack(means)  # (n_patches, C)
    std_mat = np.stack(stds)
    spread = mean_mat.std(axis=0)
    order = np.argsort(spread, kind="stable")
    scatter = np.stack([mean_mat, std_mat], axis=2)
    return ChannelStatsReport(
        channel_order=order, std_of_means=spread[order], scatter=scatter
    )


class RetrievalItem(NamedTuple):
    """One database or query entry of a retrieval run."""

    item_id: str
    group_id: str
    fmap: FeatureMap
    area_ratio: float | None = None


class QueryResult(NamedTuple):
    query_id: str
    source_id: str
    ranked: RankedList
    ap: float
    best_pose: tuple  # (dy, dx, angle) of the top-ranked item
    rank_of_match: int


class RetrievalReport(NamedTuple):
    mean_ap: float
    results: list


def rank_database(
    query: FeatureMap,
    database: Sequence[RetrievalItem],
    cfg: AlignmentConfig,
    scorer: CorrelationScorer,
    relevant_groups: set,
    exclude_ids: set | frozenset = frozenset(),
    workers: int = 1,
) -> tuple[RankedList, dict]:
    """Score one query against a database and rank the results."""
    exclude = {i for i, item in enumerate(database) if item.item_id in exclude_ids}
    scored = score_database(
        query, [it.fmap for it in database], cfg, scorer, exclude=exclude, workers=workers
    )
    ids = [database[i].item_id for i, _ in scored]
    scores = [m.score for _, m in scored]
    poses = {database[i].item_id: (m.dy, m.dx, m.angle) for i, m in scored}
    relevant = {
        database[i].item_id for i, _ in scored if database[i].group_id in relevant_groups
    }
    ranked = RankedList.from_scores(ids, scores, relevant)
    return ranked, poses


def retrieval_run(
    queries: Sequence[RetrievalItem],
    database: Sequence[RetrievalItem],
    cfg: AlignmentConfig,
    scorer: CorrelationScorer,
    exclude_self: bool = True,
    workers: int = 1,
) -> RetrievalReport:
    """Rank the database for every query; mean AP over queries.

    A query's own id is dropped from the database when present (the
    self-match).  Relevance is same-group membership.
    """
    results = []
    for q in queries:
        exclude = {q.item_id} if exclude_self else frozenset()
        ranked, poses = rank_database(
            q.fmap, database, cfg, scorer, {q.group_id}, exclude_ids=exclude, workers=workers
        )
        ap = average_precision(ranked)
        top_id = ranked.ids[0]
        results.append(
            QueryResult(
                query_id=q.item_id,
                source_id=q.item_id,
                ranked=ranked,
                ap=ap,
                best_pose=poses[top_id],
                rank_of_match=ranked.rank_of_first_relevant(),
            )
        )
    if not results:
        raise ProtocolError("retrieval run needs at least one query")
    return RetrievalReport(
        mean_ap=float(np.mean([r.ap for r in results])), results=results
    )


def patch_retrieval_protocol(
    database: Sequence[RetrievalItem],
    patch_size: int,
    n_queries: int,
    scorer: CorrelationScorer,
    seed: int,
    stride: int = 1,
    workers: int = 1,
) -> RetrievalReport:
    """Partial-view retrieval: random query windows against full items.

    Queries are sampled (seeded, without replacement per source item)
    from database items whose group has at least two members, searched
    under translation only, and scored with the source item excluded.
    """
    if n_queries < 1:
        raise ProtocolError("n_queries must be at least 1")
    group_sizes: dict[str, int] = {}
    for item in database:
        group_sizes[item.group_id] = group_sizes.get(item.group_id, 0) + 1
    eligible = [
        (i, item)
        for i, item in enumerate(database)
        if group_sizes[item.group_id] >= 2
        and item.fmap.height >= patch_size
        and item.fmap.width >= patch_size
    ]
    if not eligible:
        raise ProtocolError(
            "no eligible query sources: need groups with >= 2 members and "
            f"maps of at least {patch_size}x{patch_size}"
        )

    rng = np.random.default_rng(seed)
    used: dict[int, set] = {}
    cfg = AlignmentConfig(translation_stride=stride, min_overlap_fraction=1.0)
    results = []
    for qi in range(n_queries):
        src_idx, src = eligible[int(rng.integers(len(eligible)))]
        taken = used.setdefault(src_idx, set())
        for _ in range(1000):
            top = int(rng.integers(src.fmap.height - patch_size + 1))
            left = int(rng.integers(src.fmap.width - patch_size + 1))
            if (top, left) not in taken:
                taken.add((top, left))
                break
        else:  # pragma: no cover - pathological saturation
            raise ProtocolError(f"could not sample a fresh window from {src.item_id}")
        patch = extract_patch(src.fmap, top, left, patch_size, patch_size)
        ranked, poses = rank_database(
            patch,
            database,
            cfg,
            scorer,
            {src.group_id},
            exclude_ids={src.item_id},
            workers=workers,
        )
        ap = average_precision(ranked)
        results.append(
            QueryResult(
                query_id=f"{src.item_id}#q{qi}@{top},{left}",
                source_id=src.item_id,
                ranked=ranked,
                ap=ap,
                best_pose=poses[ranked.ids[0]],
                rank_of_match=ranked.rank_of_first_relevant(),
            )
        )
    return RetrievalReport(
        mean_ap=float(np.mean([r.ap for r in results])), results=results
    )
