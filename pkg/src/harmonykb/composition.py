"""Compositional triplet embeddings, the plain bilinear baseline scorers, and
the adjoint (backward) maps from embedding-space gradients to the constituents.

Every function is vectorised: entity/relation arguments of shape (..., d) are
processed along the last axis, so a whole batch composes in one call.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from .fourier import circ_convolve, circ_correlate

__all__ = [
    "ModelKind",
    "hidden_dim",
    "check_dims",
    "compose",
    "compose_backprop",
    "score_baseline_distmult",
    "score_baseline_hole",
]


class ModelKind(IntEnum):
    """Model families; integer values match the checkpoint wire format."""

    DISTMULT = 0   # baseline, scored as e_l' diag(r) e_r
    HOLE = 1       # baseline, scored as r' (e_l corr e_r)
    HDISTMULT = 2  # harmony-scored elementwise product
    HHOLE = 3      # harmony-scored correlation binding
    HTPR = 4       # harmony-scored full three-way tensor product

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            valid = ", ".join(k.name.lower() for k in cls)
            raise ValueError(f"unknown model kind {name!r} (expected one of: {valid})") from None

    @property
    def is_baseline(self) -> bool:
        return self in (ModelKind.DISTMULT, ModelKind.HOLE)

    @property
    def uses_correlation(self) -> bool:
        return self in (ModelKind.HOLE, ModelKind.HHOLE)


def hidden_dim(kind: ModelKind, d_entity: int, d_relation: int) -> int:
    """Dimension of the composed embedding for the given constituent dims."""
    if kind is ModelKind.HTPR:
        return d_entity * d_entity * d_relation
    return d_entity


def check_dims(kind: ModelKind, d_entity: int, d_relation: int, d_hidden: int) -> None:
    """Validate the dimensional coupling each composition requires."""
    if kind is ModelKind.HTPR:
        if d_hidden != d_entity * d_entity * d_relation:
            raise ValueError(
                f"htpr requires d_hidden == d_entity^2 * d_relation "
                f"({d_entity}^2 * {d_relation} = {d_entity * d_entity * d_relation}, "
                f"got {d_hidden})"
            )
    else:
        if not (d_entity == d_relation == d_hidden):
            raise ValueError(
                f"{kind.name.lower()} requires d_entity == d_relation == d_hidden, "
                f"got ({d_entity}, {d_relation}, {d_hidden})"
            )


def _as_batch(v: np.ndarray) -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return v[None, :], True
    return v, False


def compose(kind: ModelKind, e_l: np.ndarray, r: np.ndarray, e_r: np.ndarray) -> np.ndarray:
    """Compositional embedding x of the triplet (e_l, r, e_r).

    Elementwise product for the DistMult family, relation-masked circular
    correlation for the HolE family, and the flattened three-way tensor
    product (left-major layout) for HTPR.  Baseline kinds compose exactly like
    their harmony-scored twins.
    """
    e_l, squeeze = _as_batch(e_l)
    r, _ = _as_batch(r)
    e_r, _ = _as_batch(e_r)
    if e_l.shape[-1] != e_r.shape[-1]:
        raise ValueError(f"entity dims differ: {e_l.shape[-1]} vs {e_r.shape[-1]}")

    if kind is ModelKind.HTPR:
        x = np.einsum("...i,...j,...k->...ijk", e_l, r, e_r)
        x = x.reshape(*x.shape[:-3], -1)
    elif kind.uses_correlation:
        if r.shape[-1] != e_l.shape[-1]:
            raise ValueError(f"relation dim {r.shape[-1]} != entity dim {e_l.shape[-1]}")
        x = r * circ_correlate(e_l, e_r)
    else:
        if r.shape[-1] != e_l.shape[-1]:
            raise ValueError(f"relation dim {r.shape[-1]} != entity dim {e_l.shape[-1]}")
        x = e_l * r * e_r
    return x[0] if squeeze else x


def compose_backprop(
    kind: ModelKind,
    e_l: np.ndarray,
    r: np.ndarray,
    e_r: np.ndarray,
    grad_x: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain-rule pullback of dL/dx onto (dL/de_l, dL/dr, dL/de_r).

    For the correlation binding, the adjoint with respect to the left entity
    is itself a circular correlation and with respect to the right entity a
    circular convolution; both are evaluated in the frequency domain.
    """
    e_l, squeeze = _as_batch(e_l)
    r, _ = _as_batch(r)
    e_r, _ = _as_batch(e_r)
    grad_x, _ = _as_batch(grad_x)

    if kind is ModelKind.HTPR:
        d_e, d_r = e_l.shape[-1], r.shape[-1]
        if grad_x.shape[-1] != d_e * d_r * d_e:
            raise ValueError(
                f"grad dim {grad_x.shape[-1]} != d_entity^2 * d_relation = {d_e * d_r * d_e}"
            )
        g = grad_x.reshape(*grad_x.shape[:-1], d_e, d_r, d_e)
        g_el = np.einsum("...ijk,...j,...k->...i", g, r, e_r)
        g_r = np.einsum("...ijk,...i,...k->...j", g, e_l, e_r)
        g_er = np.einsum("...ijk,...i,...j->...k", g, e_l, r)
    elif kind.uses_correlation:
        if grad_x.shape[-1] != e_l.shape[-1]:
            raise ValueError(f"grad dim {grad_x.shape[-1]} != entity dim {e_l.shape[-1]}")
        g_r = circ_correlate(e_l, e_r) * grad_x
        g_c = r * grad_x
        g_el = circ_correlate(g_c, e_r)
        g_er = circ_convolve(g_c, e_l)
    else:
        if grad_x.shape[-1] != e_l.shape[-1]:
            raise ValueError(f"grad dim {grad_x.shape[-1]} != entity dim {e_l.shape[-1]}")
        g_el = r * e_r * grad_x
        g_r = e_l * e_r * grad_x
        g_er = e_l * r * grad_x

    if squeeze:
        return g_el[0], g_r[0], g_er[0]
    return g_el, g_r, g_er


def score_baseline_distmult(e_l: np.ndarray, r: np.ndarray, e_r: np.ndarray) -> np.ndarray:
    """Trilinear baseline score sum_i e_l[i] r[i] e_r[i]; scalar for 1-D inputs."""
    x = compose(ModelKind.HDISTMULT, e_l, r, e_r)
    out = np.sum(x, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def score_baseline_hole(e_l: np.ndarray, r: np.ndarray, e_r: np.ndarray) -> np.ndarray:
    """Correlation baseline score r' (e_l corr e_r); scalar for 1-D inputs."""
    x = compose(ModelKind.HHOLE, e_l, r, e_r)
    out = np.sum(x, axis=-1)
    return float(out) if np.ndim(out) == 0 else out
