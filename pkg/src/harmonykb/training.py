"""Negative sampling, ranking losses, Adam with projection constraints, and
the end-to-end training loop.

Each epoch is a pure function of (parameters at the epoch boundary, epoch
index, config): shuffling and corruption streams are seeded per epoch and per
batch, the optimiser moments start fresh each epoch, and parameters are
rounded to checkpoint (single) precision at every epoch boundary.  Training
can therefore resume bit-exactly from any saved epoch checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .composition import ModelKind, compose, compose_backprop, hidden_dim
from .data import DatasetSplits, Triplet, build_filter_index
from .evaluation import RankingMetrics, evaluate_split
from .harmony import HarmonyParams, constrain_params, harmony_type, mu
from .model import Model, quantize_f32

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochStats",
    "TrainResult",
    "sample_negatives",
    "loss_log_softmax",
    "loss_linear_margin",
    "adam_step",
    "normalize_embeddings",
    "init_model",
    "train",
]

# Seed-stream tags, so initialisation, shuffling, and corruption never collide.
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_NEGATIVE = 2

LOG_HEADER = "epoch\ttrain_loss\tval_mr\tval_mrr\tval_hits1\tval_hits3\tval_hits10\tseconds"


@dataclass
class TrainConfig:
    batch_size: int = 512
    negatives: int = 500
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    margin: float = 1.0
    loss_kind: str = "logsoftmax"  # or "margin"
    seed: int = 0
    max_epochs: int = 50
    patience: int = 3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_kind not in ("logsoftmax", "margin"):
            raise ValueError(f"loss_kind must be 'logsoftmax' or 'margin', got {self.loss_kind!r}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            v={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
        )


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    metrics: RankingMetrics | None
    seconds: float

    def log_line(self) -> str:
        if self.metrics is None:
            vals = ["nan"] * 5
        else:
            m = self.metrics
            vals = [
                f"{m.mean_rank:.4f}",
                f"{m.mrr:.6f}",
                f"{m.hits[1]:.6f}",
                f"{m.hits[3]:.6f}",
                f"{m.hits[10]:.6f}",
            ]
        return "\t".join([str(self.epoch), f"{self.train_loss:.6f}", *vals, f"{self.seconds:.2f}"])


@dataclass
class TrainResult:
    best: Model
    last: Model
    history: list[EpochStats]
    best_epoch: int


def _corrupt_entities(lefts, rights, n_entities, n_per, rng):
    """Vectorised corruption: per slot, flip a coin for the side and draw a
    uniform replacement different from the original entity."""
    lefts = np.asarray(lefts, dtype=np.int64)
    rights = np.asarray(rights, dtype=np.int64)
    sides = rng.integers(0, 2, size=(lefts.size, n_per))
    originals = np.where(sides == 0, lefts[:, None], rights[:, None])
    repl = rng.integers(0, n_entities - 1, size=(lefts.size, n_per))
    repl = repl + (repl >= originals)
    neg_lefts = np.where(sides == 0, repl, lefts[:, None])
    neg_rights = np.where(sides == 1, repl, rights[:, None])
    return neg_lefts, neg_rights


def sample_negatives(t: Triplet, n_entities: int, n: int, rng: np.random.Generator) -> list[Triplet]:
    """n corruptions of `t`: one entity slot (chosen uniformly) is replaced by
    a uniform entity id different from the original; the relation is kept."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n_entities < 2:
        raise ValueError("need at least 2 entities to corrupt a triplet")
    neg_lefts, neg_rights = _corrupt_entities([t.left], [t.right], n_entities, n, rng)
    return [Triplet(int(l), t.rel, int(r)) for l, r in zip(neg_lefts[0], neg_rights[0])]


def _log_softmax_rows(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise -log softmax of column 0 against the remaining columns."""
    pos = scores[:, 0]
    negs = scores[:, 1:]
    m_neg = np.max(negs, axis=1)
    lse_neg = m_neg + np.log(np.sum(np.exp(negs - m_neg[:, None]), axis=1))
    loss = np.logaddexp(0.0, lse_neg - pos)
    shift = np.max(scores, axis=1, keepdims=True)
    p = np.exp(scores - shift)
    p /= np.sum(p, axis=1, keepdims=True)
    d = p.copy()
    d[:, 0] -= 1.0
    return loss, d


def _margin_rows(scores: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise linear margin loss, averaged over each row's negatives."""
    n = scores.shape[1] - 1
    gaps = margin - scores[:, :1] + scores[:, 1:]
    active = gaps > 0.0
    loss = np.sum(np.where(active, gaps, 0.0), axis=1) / n
    d = np.zeros_like(scores)
    d[:, 1:] = active / n
    d[:, 0] = -np.sum(active, axis=1) / n
    return loss, d


def loss_log_softmax(score_pos: float, scores_neg) -> tuple[float, float, np.ndarray]:
    """Log-softmax ranking loss of one positive against its negative samples.

    Returns (loss, d loss/d score_pos, d loss/d scores_neg); the gradients are
    the softmax residuals and sum to zero.
    """
    scores_neg = np.atleast_1d(np.asarray(scores_neg, dtype=np.float64))
    if scores_neg.size < 1:
        raise ValueError("at least one negative score is required")
    if not np.isfinite(score_pos) or not np.all(np.isfinite(scores_neg)):
        raise ValueError("non-finite score")
    row = np.concatenate(([score_pos], scores_neg))[None, :]
    loss, d = _log_softmax_rows(row)
    return float(loss[0]), float(d[0, 0]), d[0, 1:].copy()


def loss_linear_margin(
    score_pos: float, score_neg: float, margin: float
) -> tuple[float, float, float]:
    """Hinge on the score gap; a tie at exactly zero counts as inactive."""
    gap = margin - score_pos + score_neg
    if gap > 0.0:
        return float(gap), -1.0, 1.0
    return 0.0, 0.0, 0.0


def normalize_embeddings(table: np.ndarray) -> np.ndarray:
    """Rescale every row to unit Euclidean norm."""
    table = np.asarray(table, dtype=np.float64)
    norms = np.linalg.norm(table, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize an all-zero embedding row")
    return table / norms


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lam: float | None = None,
    eps: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, then the feasibility projections.

    Embedding tables ("entities", "relations") are row-renormalised and the
    harmony weights ("W") are symmetrised and rescaled inside the norm bound
    for `lam` after the raw update.
    """
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, value in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for tensor {key!r}")
        m = b1 * state.m[key] + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[key] = np.asarray(value, dtype=np.float64) - cfg.learning_rate * m_hat / (
            np.sqrt(v_hat) + cfg.adam_eps
        )
        new_m[key] = m
        new_v[key] = v
    for key in ("entities", "relations"):
        if key in new_params:
            new_params[key] = normalize_embeddings(new_params[key])
    if "W" in new_params:
        b = new_params.get("b", np.zeros(new_params["W"].shape[0]))
        projected = constrain_params(HarmonyParams(W=new_params["W"], b=b, lam=lam, eps=eps))
        new_params["W"] = projected.W
    return new_params, AdamState(new_m, new_v, t)


def init_model(
    kind: ModelKind,
    d_entity: int,
    d_relation: int,
    lam: float | None,
    vocab,
    seed: int,
) -> Model:
    """Fresh model: embeddings uniform on the unit sphere, W = 0, b = 0.

    Zero weights make the initial harmonic model coincide with its
    compositional baseline (mu(x) = x, all scores zero), a clean start.
    """
    kind = ModelKind(kind)
    if kind.is_baseline and lam is not None:
        raise ValueError("baseline models take no faithfulness strength")
    d_hidden = hidden_dim(kind, d_entity, d_relation)
    rng = np.random.default_rng([seed, _STREAM_INIT])
    entities = quantize_f32(normalize_embeddings(rng.standard_normal((vocab.n_entities, d_entity))))
    relations = quantize_f32(
        normalize_embeddings(rng.standard_normal((vocab.n_relations, d_relation)))
    )
    return Model(
        kind=kind,
        d_entity=d_entity,
        d_relation=d_relation,
        d_hidden=d_hidden,
        lam=None if kind.is_baseline else lam,
        entities=entities,
        relations=relations,
        W=np.zeros((d_hidden, d_hidden)),
        b=np.zeros(d_hidden),
        vocab=vocab,
        step=0,
    )


def _batch_loss_and_grads(model: Model, lefts, rels, rights, neg_lefts, neg_rights, cfg):
    """Mean loss over the batch plus gradients for every parameter tensor.

    Column 0 of each row holds the positive; scores flow through the model's
    scoring mode and the configured loss, and dL/dx is pulled back through the
    composition onto the embedding tables.
    """
    n_batch, n_neg = neg_lefts.shape
    all_lefts = np.concatenate([lefts[:, None], neg_lefts], axis=1).reshape(-1)
    all_rights = np.concatenate([rights[:, None], neg_rights], axis=1).reshape(-1)
    all_rels = np.repeat(rels, n_neg + 1)

    e_l = model.entities[all_lefts]
    r = model.relations[all_rels]
    e_r = model.entities[all_rights]
    x = compose(model.kind, e_l, r, e_r)

    if model.kind.is_baseline:
        s = np.sum(x, axis=-1)
        ds_dx = np.ones_like(x)
        hidden = None
    elif model.lam is None:
        p = model.harmony_params()
        s = np.asarray(harmony_type(x, p))
        ds_dx = x @ p.W + 0.5 * p.b
        hidden = x
    else:
        p = model.harmony_params()
        opt = mu(x, p)
        m = p.b + 2.0 * p.lam * x
        s = -0.5 * p.lam * np.einsum("ti,ti->t", x, x) + 0.25 * np.einsum("ti,ti->t", m, opt)
        ds_dx = p.lam * (opt - x)
        hidden = opt

    scores = s.reshape(n_batch, n_neg + 1)
    if cfg.loss_kind == "logsoftmax":
        losses, dscores = _log_softmax_rows(scores)
    else:
        losses, dscores = _margin_rows(scores, cfg.margin)
    weight = (dscores / n_batch).reshape(-1)

    dx = ds_dx * weight[:, None]
    g_el, g_r, g_er = compose_backprop(model.kind, e_l, r, e_r, dx)
    g_ent = np.zeros_like(model.entities)
    np.add.at(g_ent, all_lefts, g_el)
    np.add.at(g_ent, all_rights, g_er)
    g_rel = np.zeros_like(model.relations)
    np.add.at(g_rel, all_rels, g_r)

    grads = {"entities": g_ent, "relations": g_rel}
    if hidden is not None:
        grads["W"] = 0.5 * (hidden * weight[:, None]).T @ hidden
        grads["b"] = 0.5 * hidden.T @ weight
    return float(np.mean(losses)), grads


def _model_params(model: Model) -> dict[str, np.ndarray]:
    params = {"entities": model.entities, "relations": model.relations}
    if not model.kind.is_baseline:
        params["W"] = model.W
        params["b"] = model.b
    return params


def _with_params(model: Model, params: dict[str, np.ndarray], step: int) -> Model:
    return replace(
        model,
        entities=params["entities"],
        relations=params["relations"],
        W=params.get("W", model.W),
        b=params.get("b", model.b),
        step=step,
    )


def train(
    splits: DatasetSplits,
    kind: ModelKind,
    d_entity: int,
    d_relation: int,
    lam: float | None,
    cfg: TrainConfig,
    start_model: Model | None = None,
    start_epoch: int = 0,
    log=None,
) -> TrainResult:
    """Train a model on `splits.train`, early-stopping on validation MRR.

    Every positive in a shuffled mini-batch is scored against `cfg.negatives`
    corruptions; the model returned in `best` is the quantised state of the
    epoch with the highest filtered validation MRR (the last epoch when there
    is no validation split).  Passing `start_model`/`start_epoch` resumes a
    run from a saved epoch boundary, reproducing the uninterrupted run
    exactly.
    """
    if not splits.train:
        raise ValueError("empty train split")
    known = build_filter_index(splits)
    if start_model is not None:
        model = start_model.copy()
    else:
        model = init_model(kind, d_entity, d_relation, lam, splits.vocab, cfg.seed)

    triples = np.asarray(splits.train, dtype=np.int64)
    lefts_all, rels_all, rights_all = triples[:, 0], triples[:, 1], triples[:, 2]

    if log:
        log.write(LOG_HEADER + "\n")
    history: list[EpochStats] = []
    best = model.quantized()
    best_mrr = -np.inf
    best_epoch = start_epoch - 1
    stale = 0
    for epoch in range(start_epoch, cfg.max_epochs):
        t_start = time.perf_counter()
        shuffle_rng = np.random.default_rng([cfg.seed, _STREAM_SHUFFLE, epoch])
        perm = shuffle_rng.permutation(triples.shape[0])
        params = _model_params(model)
        state = AdamState.for_params(params)
        losses = []
        for batch_idx, lo in enumerate(range(0, perm.size, cfg.batch_size)):
            sel = perm[lo:lo + cfg.batch_size]
            batch_rng = np.random.default_rng([cfg.seed, _STREAM_NEGATIVE, epoch, batch_idx])
            neg_lefts, neg_rights = _corrupt_entities(
                lefts_all[sel], rights_all[sel], model.n_entities, cfg.negatives, batch_rng
            )
            loss, grads = _batch_loss_and_grads(
                model, lefts_all[sel], rels_all[sel], rights_all[sel], neg_lefts, neg_rights, cfg
            )
            params, state = adam_step(params, grads, state, cfg, lam=model.lam)
            model = _with_params(model, params, model.step + 1)
            losses.append(loss)
        model = model.quantized()

        metrics = evaluate_split(splits.valid, model, known) if splits.valid else None
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            metrics=metrics,
            seconds=time.perf_counter() - t_start,
        )
        history.append(stats)
        if log:
            log.write(stats.log_line() + "\n")
            log.flush()

        if metrics is None:
            best, best_epoch = model, epoch
        elif metrics.mrr > best_mrr:
            best_mrr, best, best_epoch = metrics.mrr, model, epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainResult(best=best, last=model, history=history, best_epoch=best_epoch)
