"""Bit-exact binary checkpoint format.

Layout (all integers little-endian):

    magic "GGRF" | u32 version=1 | u8 model kind | u8 lam-mode (0 finite,
    1 infinite) | f64 lam (ignored when infinite) | u32 d_entity, d_relation,
    d_hidden, n_entities, n_relations | u64 step | entity table f32 row-major
    | relation table f32 | W f32 | b f32 | vocab (u32 byte-length + UTF-8,
    entities then relations)

Arrays are stored in single precision; metadata round-trips exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .composition import ModelKind
from .data import Vocab
from .model import Model

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"GGRF"
VERSION = 1

_HEADER = struct.Struct("<4sIBBdIIIIIQ")


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Serialise `model`; arrays are written in single precision."""
    if not np.array_equal(model.W, model.W.T):
        raise CheckpointError("refusing to save asymmetric W")
    lam_mode = 1 if model.lam is None else 0
    lam_value = 0.0 if model.lam is None else float(model.lam)
    blob = bytearray()
    blob += _HEADER.pack(
        MAGIC,
        VERSION,
        int(model.kind),
        lam_mode,
        lam_value,
        model.d_entity,
        model.d_relation,
        model.d_hidden,
        model.n_entities,
        model.n_relations,
        model.step,
    )
    for arr in (model.entities, model.relations, model.W, model.b):
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    for name in (*model.vocab.entity_names, *model.vocab.relation_names):
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
    Path(path).write_bytes(bytes(blob))


def _take_f32(data: bytes, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    nbytes = 4 * count
    if offset + nbytes > len(data):
        raise CheckpointError("size mismatch: file truncated inside an array block")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.astype(np.float64).reshape(shape), offset + nbytes


def load_checkpoint(path: str | Path) -> Model:
    """Deserialise a checkpoint, validating magic, sizes, and W symmetry."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("size mismatch: file shorter than header")
    (
        magic,
        version,
        kind_byte,
        lam_mode,
        lam_value,
        d_entity,
        d_relation,
        d_hidden,
        n_entities,
        n_relations,
        step,
    ) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    try:
        kind = ModelKind(kind_byte)
    except ValueError:
        raise CheckpointError(f"unknown model kind byte {kind_byte}") from None
    if lam_mode not in (0, 1):
        raise CheckpointError(f"invalid lam-mode byte {lam_mode}")
    lam = None if lam_mode == 1 else float(lam_value)

    offset = _HEADER.size
    entities, offset = _take_f32(data, offset, (n_entities, d_entity))
    relations, offset = _take_f32(data, offset, (n_relations, d_relation))
    w, offset = _take_f32(data, offset, (d_hidden, d_hidden))
    b, offset = _take_f32(data, offset, (d_hidden,))
    if not np.array_equal(w, w.T):
        raise CheckpointError("asymmetric W in checkpoint")

    names: list[str] = []
    for _ in range(n_entities + n_relations):
        if offset + 4 > len(data):
            raise CheckpointError("size mismatch: file truncated inside the vocabulary")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + length > len(data):
            raise CheckpointError("size mismatch: file truncated inside the vocabulary")
        names.append(data[offset:offset + length].decode("utf-8"))
        offset += length
    if offset != len(data):
        raise CheckpointError("size mismatch: trailing bytes after the vocabulary")

    vocab = Vocab.from_names(names[:n_entities], names[n_entities:])
    return Model(
        kind=kind,
        d_entity=d_entity,
        d_relation=d_relation,
        d_hidden=d_hidden,
        lam=lam,
        entities=entities,
        relations=relations,
        W=w,
        b=b,
        vocab=vocab,
        step=step,
    )
