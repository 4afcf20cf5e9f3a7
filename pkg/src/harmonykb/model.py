"""Model state (embedding tables + harmony parameters) and scoring dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .composition import ModelKind, check_dims, compose
from .data import Vocab
from .harmony import HarmonyParams, harmony_type, mu, score

__all__ = ["Model", "quantize_f32", "triplet_scores", "triplet_type_scores", "triplet_embeddings"]


def quantize_f32(a: np.ndarray) -> np.ndarray:
    """Round doubles onto the single-precision grid (the checkpoint precision)."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class Model:
    """A trained (or initial) scoring model.

    Arrays are double precision internally; checkpoints store them in single
    precision, and training quantises at epoch boundaries so that a saved and
    reloaded model is bit-identical to the live one.

    Treat the arrays as immutable: scoring memoises the harmony parameters
    (and with them the negative-definite factorisation), so parameter changes
    must construct a fresh Model (`dataclasses.replace`), never write through
    the existing arrays.  That is also what makes a model safe to share
    across concurrent readers.
    """

    kind: ModelKind
    d_entity: int
    d_relation: int
    d_hidden: int
    lam: float | None  # None selects the infinite-faithfulness mode
    entities: np.ndarray  # (n_entities, d_entity)
    relations: np.ndarray  # (n_relations, d_relation)
    W: np.ndarray  # (d_hidden, d_hidden), symmetric
    b: np.ndarray  # (d_hidden,)
    vocab: Vocab
    step: int = 0
    _params: HarmonyParams | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        check_dims(self.kind, self.d_entity, self.d_relation, self.d_hidden)
        if self.kind.is_baseline and self.lam is not None:
            raise ValueError("baseline models carry no faithfulness strength")
        if self.entities.shape != (self.vocab.n_entities, self.d_entity):
            raise ValueError(
                f"entity table shape {self.entities.shape} != "
                f"({self.vocab.n_entities}, {self.d_entity})"
            )
        if self.relations.shape != (self.vocab.n_relations, self.d_relation):
            raise ValueError(
                f"relation table shape {self.relations.shape} != "
                f"({self.vocab.n_relations}, {self.d_relation})"
            )
        if self.W.shape != (self.d_hidden, self.d_hidden):
            raise ValueError(f"W shape {self.W.shape} != ({self.d_hidden}, {self.d_hidden})")
        if self.b.shape != (self.d_hidden,):
            raise ValueError(f"b shape {self.b.shape} != ({self.d_hidden},)")

    @property
    def n_entities(self) -> int:
        return self.vocab.n_entities

    @property
    def n_relations(self) -> int:
        return self.vocab.n_relations

    def harmony_params(self) -> HarmonyParams:
        # Memoised so the negative-definite factorisation is shared across
        # scoring calls; parameter updates build fresh Model instances, which
        # resets the cache.
        if self._params is None:
            self._params = HarmonyParams(W=self.W, b=self.b, lam=self.lam)
        return self._params

    def copy(self) -> "Model":
        return replace(
            self,
            entities=self.entities.copy(),
            relations=self.relations.copy(),
            W=self.W.copy(),
            b=self.b.copy(),
        )

    def quantized(self) -> "Model":
        return replace(
            self,
            entities=quantize_f32(self.entities),
            relations=quantize_f32(self.relations),
            W=quantize_f32(self.W),
            b=quantize_f32(self.b),
        )


def _gather(model: Model, lefts, rels, rights):
    lefts = np.asarray(lefts, dtype=np.intp)
    rels = np.asarray(rels, dtype=np.intp)
    rights = np.asarray(rights, dtype=np.intp)
    return model.entities[lefts], model.relations[rels], model.entities[rights]


def triplet_scores(model: Model, lefts, rels, rights) -> np.ndarray:
    """Operational scores for id triplets (vectorised).

    Baselines sum the composed embedding (their bilinear score); harmonic
    models score the optimal hidden state, or the core harmony of x itself in
    the infinite-faithfulness mode.
    """
    e_l, r, e_r = _gather(model, lefts, rels, rights)
    x = compose(model.kind, e_l, r, e_r)
    if model.kind.is_baseline:
        return np.sum(x, axis=-1)
    return np.asarray(score(x, model.harmony_params()))


def triplet_type_scores(model: Model, lefts, rels, rights) -> np.ndarray:
    """Scores with the hidden-state optimisation switched off.

    For a finite-lam harmonic model this evaluates the core harmony of the
    compositional embedding under the same W, b; for every other model it
    coincides with `triplet_scores`.
    """
    if model.kind.is_baseline or model.lam is None:
        return triplet_scores(model, lefts, rels, rights)
    e_l, r, e_r = _gather(model, lefts, rels, rights)
    x = compose(model.kind, e_l, r, e_r)
    return np.asarray(harmony_type(x, model.harmony_params()))


def triplet_embeddings(model: Model, lefts, rels, rights, space: str = "type") -> np.ndarray:
    """Triplet embeddings in the requested space.

    "type" is the compositional embedding x; "token" is the harmony-optimal
    hidden state mu(x), which collapses to x whenever no optimisation happens
    (infinite lam or a baseline model).
    """
    if space not in ("type", "token"):
        raise ValueError(f"space must be 'type' or 'token', got {space!r}")
    e_l, r, e_r = _gather(model, lefts, rels, rights)
    x = compose(model.kind, e_l, r, e_r)
    if space == "type" or model.kind.is_baseline or model.lam is None:
        return x
    return mu(x, model.harmony_params())
