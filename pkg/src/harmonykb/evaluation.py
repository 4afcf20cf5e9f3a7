"""Filtered entity-reconstruction ranking, aggregate metrics, semantic
neighbourhoods in type and token space, and the optimisation-effect studies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import KnownTripletIndex, Triplet
from .model import Model, triplet_embeddings, triplet_scores, triplet_type_scores

__all__ = [
    "Query",
    "QueryRecord",
    "RankingMetrics",
    "NeighborhoodReport",
    "DensityReport",
    "OptEffectReport",
    "rank_query",
    "rank_split",
    "evaluate_split",
    "type_embedding",
    "token_embedding",
    "neighbors",
    "neighborhood_density_study",
    "spearman",
    "optimization_effect_study",
]

SIDES = ("left", "right")
HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class Query:
    """A triplet with one entity slot designated for reconstruction."""

    known: Triplet
    missing_side: str  # "left" or "right"

    def __post_init__(self):
        if self.missing_side not in SIDES:
            raise ValueError(f"missing_side must be one of {SIDES}, got {self.missing_side!r}")

    @property
    def true_entity(self) -> int:
        return self.known.left if self.missing_side == "left" else self.known.right


@dataclass
class QueryRecord:
    index: int  # position of the source triplet within its split
    side: str
    rank: int
    delta_h: float | None = None


@dataclass
class RankingMetrics:
    mean_rank: float
    mrr: float
    hits: dict[int, float]
    n_queries: int

    def as_row(self) -> str:
        return "\t".join(
            [f"{self.mean_rank:.4f}", f"{self.mrr:.6f}"]
            + [f"{self.hits[n]:.6f}" for n in HITS_AT]
            + [str(self.n_queries)]
        )


@dataclass
class NeighborhoodReport:
    query: Triplet
    missing_side: str
    space: str
    neighbors: list[tuple[str, float, bool]]  # (entity name, distance, is known fact)
    k: int
    truncated: bool = False


@dataclass
class DensityReport:
    delta_density_pos: float
    delta_density_neg: float
    t_pos: float
    t_neg: float
    n_queries_pos: int
    n_queries_neg: int


@dataclass
class OptEffectReport:
    rho_rank: float | None
    rho_mrr_all: float | None
    rho_mrr_changed: float | None
    mean_delta_h: float
    # per query: (triplet index, side, delta_h, rank with optimisation, rank without)
    rows: list[tuple[int, str, float, int, int]] = field(default_factory=list)
    conditions: list[str] = field(default_factory=list)


def _candidate_triplets(q: Query, n_entities: int):
    ids = np.arange(n_entities)
    if q.missing_side == "left":
        lefts, rels, rights = ids, np.full(n_entities, q.known.rel), np.full(n_entities, q.known.right)
    else:
        lefts, rels, rights = np.full(n_entities, q.known.left), np.full(n_entities, q.known.rel), ids
    return ids, lefts, rels, rights


def _keep_mask(q: Query, n_entities: int, known: KnownTripletIndex) -> np.ndarray:
    """True for candidates that survive filtering: the true answer, plus every
    completion not already known to be a fact."""
    if q.missing_side == "left":
        known_ids = known.known_lefts(q.known.rel, q.known.right)
    else:
        known_ids = known.known_rights(q.known.left, q.known.rel)
    keep = np.ones(n_entities, dtype=bool)
    keep[known_ids] = False
    keep[q.true_entity] = True
    return keep


def _rank_from_scores(scores: np.ndarray, keep: np.ndarray, true_id: int) -> int:
    """Filtered rank with fractional (average) tie handling, floored."""
    true_score = scores[true_id]
    kept = scores[keep]
    greater = int(np.sum(kept > true_score))
    equal = int(np.sum(kept == true_score)) - 1  # the true candidate itself ties
    return 1 + greater + equal // 2


def rank_query(q: Query, model: Model, known: KnownTripletIndex) -> int:
    """Filtered rank of the true completion among all candidate entities."""
    true_id = q.true_entity
    if not (0 <= true_id < model.n_entities):
        raise RuntimeError(f"true entity {true_id} outside the candidate enumeration")
    ids, lefts, rels, rights = _candidate_triplets(q, model.n_entities)
    scores = triplet_scores(model, lefts, rels, rights)
    return _rank_from_scores(scores, _keep_mask(q, model.n_entities, known), true_id)


def _query_score_rows(queries: list[Query], model: Model, score_fn, chunk: int = 200_000):
    """Score every (query, candidate-entity) pair; one row per query.

    Queries are batched so each underlying scoring call composes a large flat
    block of triplets rather than one small block per query.
    """
    n_e = model.n_entities
    rows_per_chunk = max(1, chunk // n_e)
    out = np.empty((len(queries), n_e))
    ids = np.arange(n_e)
    for lo in range(0, len(queries), rows_per_chunk):
        batch = queries[lo:lo + rows_per_chunk]
        lefts = np.empty((len(batch), n_e), dtype=np.intp)
        rels = np.empty((len(batch), n_e), dtype=np.intp)
        rights = np.empty((len(batch), n_e), dtype=np.intp)
        for i, q in enumerate(batch):
            rels[i] = q.known.rel
            if q.missing_side == "left":
                lefts[i] = ids
                rights[i] = q.known.right
            else:
                lefts[i] = q.known.left
                rights[i] = ids
        scores = score_fn(model, lefts.ravel(), rels.ravel(), rights.ravel())
        out[lo:lo + len(batch)] = np.asarray(scores).reshape(len(batch), n_e)
    return out


def rank_split(split: list[Triplet], model: Model, known: KnownTripletIndex) -> list[QueryRecord]:
    """Filtered ranks for both reconstruction queries of every triplet."""
    queries = [Query(t, side) for t in split for side in SIDES]
    rows = _query_score_rows(queries, model, triplet_scores)
    records = []
    for pos, q in enumerate(queries):
        rank = _rank_from_scores(rows[pos], _keep_mask(q, model.n_entities, known), q.true_entity)
        records.append(QueryRecord(index=pos // 2, side=q.missing_side, rank=rank))
    return records


def metrics_from_ranks(ranks) -> RankingMetrics:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no queries to aggregate")
    return RankingMetrics(
        mean_rank=float(np.mean(ranks)),
        mrr=float(np.mean(1.0 / ranks)),
        hits={n: float(np.mean(ranks <= n)) for n in HITS_AT},
        n_queries=int(ranks.size),
    )


def evaluate_split(split: list[Triplet], model: Model, known: KnownTripletIndex) -> RankingMetrics:
    """MR, MRR and Hits@{1,3,10} over both queries of every split triplet."""
    if not split:
        raise ValueError("empty split")
    return metrics_from_ranks([r.rank for r in rank_split(split, model, known)])


def type_embedding(t: Triplet, model: Model) -> np.ndarray:
    """Compositional embedding of a triplet (the pre-optimisation space)."""
    return triplet_embeddings(model, [t.left], [t.rel], [t.right], space="type")[0]


def token_embedding(t: Triplet, model: Model) -> np.ndarray:
    """Harmony-optimised embedding; equals the type embedding when no
    optimisation happens (infinite faithfulness or a baseline model)."""
    return triplet_embeddings(model, [t.left], [t.rel], [t.right], space="token")[0]


def neighbors(
    q: Query,
    model: Model,
    known: KnownTripletIndex,
    k: int,
    space: str = "token",
    candidates=None,
) -> NeighborhoodReport:
    """The k nearest candidate completions by Euclidean distance.

    Every candidate entity is substituted into the missing slot, embedded in
    the requested space, and compared with the queried triplet's embedding in
    that same space.  Ties break by ascending entity id; each neighbour is
    flagged against the known-triplet index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    true_id = q.true_entity
    if candidates is None:
        candidates = [i for i in range(model.n_entities) if i != true_id]
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.intp)
    if cand.size and np.any(cand == true_id):
        raise ValueError("candidate set must exclude the queried entity")

    # The anchor is embedded in the same batched call as the candidates, so a
    # candidate composing identically to the queried entity lands at an exact
    # distance of zero (batched kernels are not bit-stable across shapes).
    if q.missing_side == "left":
        lefts = np.concatenate(([q.known.left], cand))
        rights = np.full(cand.size + 1, q.known.right)
    else:
        lefts = np.full(cand.size + 1, q.known.left)
        rights = np.concatenate(([q.known.right], cand))
    rels = np.full(cand.size + 1, q.known.rel)
    embs = triplet_embeddings(model, lefts, rels, rights, space=space)
    target, embs = embs[0], embs[1:]
    dists = np.sqrt(np.sum((embs - target) ** 2, axis=-1))

    order = np.lexsort((cand, dists))[:k]
    rows = []
    for pos in order:
        eid = int(cand[pos])
        completed = (
            Triplet(eid, q.known.rel, q.known.right)
            if q.missing_side == "left"
            else Triplet(q.known.left, q.known.rel, eid)
        )
        rows.append((model.vocab.entity_names[eid], float(dists[pos]), completed in known))
    return NeighborhoodReport(
        query=q.known,
        missing_side=q.missing_side,
        space=space,
        neighbors=rows,
        k=k,
        truncated=len(rows) < k,
    )


def _paired_t(deltas: np.ndarray) -> float:
    n = deltas.size
    sd = float(np.std(deltas, ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        return float("nan")
    return float(np.mean(deltas) / (sd / np.sqrt(n)))


def neighborhood_density_study(
    labeled: list[tuple[Triplet, str]],
    model: Model,
    known: KnownTripletIndex,
    k: int = 5,
) -> DensityReport:
    """Change in known-fact density of the top-k neighbourhood when moving
    from type to token space, split by positive/negative label.

    Labels are "pos"/"neg"; each triplet contributes a left and a right
    query.  Density is the fraction of the k nearest completions that are
    known facts.
    """
    deltas: dict[str, list[float]] = {"pos": [], "neg": []}
    for t, label in labeled:
        if label not in deltas:
            raise ValueError(f"label must be 'pos' or 'neg', got {label!r}")
        for side in SIDES:
            q = Query(t, side)
            dens = {}
            for space in ("type", "token"):
                report = neighbors(q, model, known, k=k, space=space)
                flags = [flag for (_, _, flag) in report.neighbors]
                dens[space] = sum(flags) / len(flags) if flags else 0.0
            deltas[label].append(dens["token"] - dens["type"])
    if not deltas["pos"] or not deltas["neg"]:
        raise ValueError("labeled set must contain both positive and negative triplets")
    pos = np.asarray(deltas["pos"])
    neg = np.asarray(deltas["neg"])
    return DensityReport(
        delta_density_pos=float(np.mean(pos)),
        delta_density_neg=float(np.mean(neg)),
        t_pos=_paired_t(pos),
        t_neg=_paired_t(neg),
        n_queries_pos=pos.size,
        n_queries_neg=neg.size,
    )


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    """Average (fractional) ranks, 1-based, with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D sequences")
    if xs.size < 2:
        raise ValueError("need at least two observations")
    rx = _fractional_ranks(xs)
    ry = _fractional_ranks(ys)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    vx = float(sx @ sx)
    vy = float(sy @ sy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("degenerate ranking: zero rank variance")
    return float((sx @ sy) / np.sqrt(vx * vy))


def optimization_effect_study(
    split: list[Triplet], model: Model, known: KnownTripletIndex
) -> OptEffectReport:
    """Correlate each query's harmony gain from optimisation with its change
    in filtered rank when scoring with vs without the hidden-state step."""
    if model.kind.is_baseline or model.lam is None:
        raise ValueError("optimisation-effect study requires a finite-lam harmonic model")

    trip = np.asarray(split, dtype=np.intp)
    token_true = triplet_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
    type_true = triplet_type_scores(model, trip[:, 0], trip[:, 1], trip[:, 2])
    deltas = np.asarray(token_true) - np.asarray(type_true)

    queries = [Query(t, side) for t in split for side in SIDES]
    token_rows = _query_score_rows(queries, model, triplet_scores)
    type_rows = _query_score_rows(queries, model, triplet_type_scores)

    rows: list[tuple[int, str, float, int, int]] = []
    for pos, q in enumerate(queries):
        idx = pos // 2
        keep = _keep_mask(q, model.n_entities, known)
        rank_token = _rank_from_scores(token_rows[pos], keep, q.true_entity)
        rank_type = _rank_from_scores(type_rows[pos], keep, q.true_entity)
        rows.append((idx, q.missing_side, float(deltas[idx]), rank_token, rank_type))

    dh = np.array([r[2] for r in rows])
    d_rank = np.array([float(r[3] - r[4]) for r in rows])
    d_mrr = np.array([1.0 / r[3] - 1.0 / r[4] for r in rows])
    changed = d_rank != 0.0

    conditions: list[str] = []

    def _try_spearman(xs, ys, label):
        try:
            return spearman(xs, ys)
        except ValueError as exc:
            conditions.append(f"{label}: {exc}")
            return None

    rho_rank = _try_spearman(dh, d_rank, "rank correlation")
    rho_mrr_all = _try_spearman(dh, d_mrr, "mrr correlation")
    if int(np.sum(changed)) >= 2:
        rho_mrr_changed = _try_spearman(dh[changed], d_mrr[changed], "changed-rank mrr correlation")
    else:
        rho_mrr_changed = None
        conditions.append("changed-rank mrr correlation: fewer than two rank-changing queries")

    return OptEffectReport(
        rho_rank=rho_rank,
        rho_mrr_all=rho_mrr_all,
        rho_mrr_changed=rho_mrr_changed,
        mean_delta_h=float(np.mean(dh)),
        rows=rows,
        conditions=conditions,
    )
