"""Dataset ingestion, vocabulary management, filtered-evaluation index, and
block-structured synthetic knowledge-base generation for desk-scale tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

__all__ = [
    "Triplet",
    "Vocab",
    "DatasetSplits",
    "KnownTripletIndex",
    "SyntheticTruth",
    "load_tsv",
    "write_tsv",
    "build_filter_index",
    "generate_synthetic_kb",
]

# Fraction of ordered block pairs made compatible per synthetic relation.
_COMPAT_FRACTION = 0.2


class Triplet(NamedTuple):
    """One knowledge-base fact: (head entity id, relation id, tail entity id)."""

    left: int
    rel: int
    right: int


class Vocab:
    """Bijective id <-> name maps for entities and relations."""

    def __init__(self):
        self.entity_names: list[str] = []
        self.relation_names: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        """Id for `name`, assigning the next id on first encounter."""
        if not name:
            raise ValueError("empty entity name")
        eid = self._entity_ids.get(name)
        if eid is None:
            eid = len(self.entity_names)
            self._entity_ids[name] = eid
            self.entity_names.append(name)
        return eid

    def relation_id(self, name: str) -> int:
        if not name:
            raise ValueError("empty relation name")
        rid = self._relation_ids.get(name)
        if rid is None:
            rid = len(self.relation_names)
            self._relation_ids[name] = rid
            self.relation_names.append(name)
        return rid

    def lookup_entity(self, name: str) -> int:
        """Id for an existing entity name; KeyError if unknown."""
        return self._entity_ids[name]

    def lookup_relation(self, name: str) -> int:
        return self._relation_ids[name]

    @classmethod
    def from_names(cls, entity_names: Iterable[str], relation_names: Iterable[str]) -> "Vocab":
        vocab = cls()
        for name in entity_names:
            vocab.entity_id(name)
        for name in relation_names:
            vocab.relation_id(name)
        return vocab

    def copy(self) -> "Vocab":
        return Vocab.from_names(self.entity_names, self.relation_names)


@dataclass
class SyntheticTruth:
    """Ground-truth generative structure of a synthetic KB, kept for oracles."""

    n_blocks: int
    noise: float
    seed: int
    compatible: list[set[tuple[int, int]]]  # per relation: ordered block pairs

    def block(self, entity: int) -> int:
        return entity % self.n_blocks

    def is_structural_fact(self, t: Triplet) -> bool:
        return (self.block(t.left), self.block(t.right)) in self.compatible[t.rel]


@dataclass
class DatasetSplits:
    """Train/valid/test triplet lists sharing one vocabulary."""

    train: list[Triplet]
    valid: list[Triplet]
    test: list[Triplet]
    vocab: Vocab
    truth: SyntheticTruth | None = field(default=None, repr=False)

    def __post_init__(self):
        for name, split in (("train", self.train), ("valid", self.valid), ("test", self.test)):
            if len(set(split)) != len(split):
                raise ValueError(f"duplicate triplets in {name} split")

    def all_triplets(self) -> list[Triplet]:
        return self.train + self.valid + self.test


class KnownTripletIndex:
    """Membership set over every triplet known true in any split."""

    def __init__(self, triplets: Iterable[Triplet]):
        self._known = frozenset(Triplet(*t) for t in triplets)
        self._lefts_by_context: dict[tuple[int, int], np.ndarray] | None = None
        self._rights_by_context: dict[tuple[int, int], np.ndarray] | None = None

    def __contains__(self, t) -> bool:
        return Triplet(*t) in self._known

    def __len__(self) -> int:
        return len(self._known)

    def _build_contexts(self) -> None:
        lefts: dict[tuple[int, int], list[int]] = {}
        rights: dict[tuple[int, int], list[int]] = {}
        for t in self._known:
            lefts.setdefault((t.rel, t.right), []).append(t.left)
            rights.setdefault((t.left, t.rel), []).append(t.right)
        self._lefts_by_context = {k: np.sort(np.asarray(v)) for k, v in lefts.items()}
        self._rights_by_context = {k: np.sort(np.asarray(v)) for k, v in rights.items()}

    def known_lefts(self, rel: int, right: int) -> np.ndarray:
        """All head entities known to complete ( . , rel, right)."""
        if self._lefts_by_context is None:
            self._build_contexts()
        return self._lefts_by_context.get((rel, right), _EMPTY_IDS)

    def known_rights(self, left: int, rel: int) -> np.ndarray:
        """All tail entities known to complete (left, rel, . )."""
        if self._rights_by_context is None:
            self._build_contexts()
        return self._rights_by_context.get((left, rel), _EMPTY_IDS)


_EMPTY_IDS = np.empty(0, dtype=np.int64)


def build_filter_index(splits: DatasetSplits) -> KnownTripletIndex:
    """Index of all true triplets across splits, for filtered ranking."""
    return KnownTripletIndex(splits.all_triplets())


def load_tsv(path: str | Path, vocab: Vocab | None = None) -> tuple[list[Triplet], Vocab]:
    """Read "head<TAB>relation<TAB>tail" lines into triplets.

    Ids are assigned in first-encounter order.  Passing an existing `vocab`
    extends it with unseen names instead of starting fresh.  Duplicate lines
    within one file are rejected.
    """
    path = Path(path)
    if vocab is None:
        vocab = Vocab()
    triplets: list[Triplet] = []
    seen: set[Triplet] = set()
    with path.open("r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            head, rel, tail = fields
            t = Triplet(vocab.entity_id(head), vocab.relation_id(rel), vocab.entity_id(tail))
            if t in seen:
                raise ValueError(f"{path}:{lineno}: duplicate triplet {line!r}")
            seen.add(t)
            triplets.append(t)
    return triplets, vocab


def write_tsv(path: str | Path, triplets: Iterable[Triplet], vocab: Vocab) -> None:
    """Write triplets as "head<TAB>relation<TAB>tail" lines (LF endings)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            fh.write(
                f"{vocab.entity_names[t.left]}\t{vocab.relation_names[t.rel]}\t"
                f"{vocab.entity_names[t.right]}\n"
            )


def _compatible_pairs(rng: np.random.Generator, n_blocks: int) -> set[tuple[int, int]]:
    """Nonempty random set of ordered block pairs defining one relation."""
    n_pairs = n_blocks * n_blocks
    k = max(1, round(_COMPAT_FRACTION * n_pairs))
    chosen = rng.choice(n_pairs, size=k, replace=False)
    return {(int(p) // n_blocks, int(p) % n_blocks) for p in chosen}


def generate_synthetic_kb(
    n_entities: int,
    n_relations: int,
    n_blocks: int,
    noise: float,
    seed: int,
) -> DatasetSplits:
    """Deterministic block-structured KB with an 80/10/10 split.

    Entities are assigned round-robin to blocks; each relation is a random
    nonempty set of compatible ordered block pairs; (e, r, e') is a fact iff
    the block pair of (e, e') is compatible for r.  Each fact is then dropped
    with probability `noise`, modelling KB incompleteness.  The remainder of
    the 80/10/10 split goes to the test split.
    """
    if n_blocks > n_entities:
        raise ValueError("n_blocks must not exceed n_entities")
    if not (0.0 <= noise < 0.5):
        raise ValueError("noise must lie in [0, 0.5)")
    if n_entities < 1 or n_relations < 1 or n_blocks < 1:
        raise ValueError("n_entities, n_relations, n_blocks must be positive")

    rng = np.random.default_rng(seed)
    compatible = [_compatible_pairs(rng, n_blocks) for _ in range(n_relations)]
    truth = SyntheticTruth(n_blocks=n_blocks, noise=noise, seed=seed, compatible=compatible)

    facts: list[Triplet] = []
    for rel in range(n_relations):
        for left in range(n_entities):
            for right in range(n_entities):
                t = Triplet(left, rel, right)
                if not truth.is_structural_fact(t):
                    continue
                if noise > 0.0 and rng.random() < noise:
                    continue
                facts.append(t)
    if not facts:
        raise ValueError("degenerate configuration: no facts generated")

    order = rng.permutation(len(facts))
    facts = [facts[i] for i in order]
    n_train = math.floor(0.8 * len(facts))
    n_valid = math.floor(0.1 * len(facts))

    vocab = Vocab.from_names(
        (f"e{i}" for i in range(n_entities)),
        (f"r{j}" for j in range(n_relations)),
    )
    return DatasetSplits(
        train=facts[:n_train],
        valid=facts[n_train:n_train + n_valid],
        test=facts[n_train + n_valid:],
        vocab=vocab,
        truth=truth,
    )
