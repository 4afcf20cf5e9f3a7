"""Discrete Fourier transforms and circular correlation.

The transform is an iterative radix-2 Cooley-Tukey FFT for power-of-two
lengths with a Bluestein (chirp-z) fallback for every other length, so
embedding dimensions are not restricted.  All routines are vectorised over
leading axes: inputs of shape (..., d) are transformed along the last axis.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "fft",
    "ifft",
    "circ_correlate",
    "circ_correlate_naive",
    "circ_convolve",
]

# Largest tolerated imaginary residue when casting an inverse transform of
# real data back to the reals.
_IMAG_TOL = 1e-9


# Per-length tables (bit-reversal permutation, per-stage twiddles, Bluestein
# chirps) are cached: scoring touches many small transforms of one length.
_REV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[int, list[np.ndarray]] = {}
_BLUESTEIN_CACHE: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}
_DFT_MATRIX_CACHE: dict[int, np.ndarray] = {}

# Below this length a cached dense DFT matrix (one BLAS matmul over the whole
# batch) beats the staged butterflies; the radix-2/Bluestein paths take over
# for longer transforms.
_MATMUL_MAX = 32


def _dft_matrix(n: int) -> np.ndarray:
    m = _DFT_MATRIX_CACHE.get(n)
    if m is None:
        jk = np.outer(np.arange(n), np.arange(n))
        m = np.exp((-2j * np.pi / n) * jk)
        _DFT_MATRIX_CACHE[n] = m
    return m


def _bit_reverse_indices(n: int) -> np.ndarray:
    """Bit-reversal permutation for power-of-two n."""
    rev = _REV_CACHE.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.intp)
        for i in range(1, n):
            rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
        _REV_CACHE[n] = rev
    return rev


def _stage_twiddles(n: int) -> list[np.ndarray]:
    stages = _TWIDDLE_CACHE.get(n)
    if stages is None:
        stages = []
        m = 2
        while m <= n:
            stages.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
            m <<= 1
        _TWIDDLE_CACHE[n] = stages
    return stages


def _fft_pow2(a: np.ndarray) -> np.ndarray:
    """Radix-2 DIT FFT along the last axis; length must be a power of two."""
    n = a.shape[-1]
    out = a[..., _bit_reverse_indices(n)].astype(np.complex128)
    for twiddle in _stage_twiddles(n):
        m = 2 * twiddle.size
        half = twiddle.size
        blocks = out.reshape(*out.shape[:-1], n // m, m)
        lo = blocks[..., :half].copy()  # the in-place butterfly below aliases this slice
        hi = blocks[..., half:] * twiddle
        blocks[..., :half] = lo + hi
        blocks[..., half:] = lo - hi
    return out


def _fft_bluestein(a: np.ndarray) -> np.ndarray:
    """Arbitrary-length FFT via the chirp-z reduction to a padded radix-2 FFT."""
    n = a.shape[-1]
    cached = _BLUESTEIN_CACHE.get(n)
    if cached is None:
        m = 1 << (2 * n - 1).bit_length()
        k = np.arange(n)
        chirp = np.exp(-1j * np.pi * k * k / n)
        bb = np.zeros(m, dtype=np.complex128)
        bb[:n] = np.conj(chirp)
        if n > 1:
            bb[-(n - 1):] = np.conj(chirp[1:])[::-1]
        cached = (chirp, _fft_pow2(bb), m)
        _BLUESTEIN_CACHE[n] = cached
    chirp, bb_hat, m = cached

    aa = np.zeros(a.shape[:-1] + (m,), dtype=np.complex128)
    aa[..., :n] = a * chirp
    conv = _ifft_pow2(_fft_pow2(aa) * bb_hat)
    return conv[..., :n] * chirp


def _ifft_pow2(a: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(a))) / a.shape[-1]


def fft(a: np.ndarray) -> np.ndarray:
    """DFT along the last axis of `a` (any length >= 1)."""
    a = np.asarray(a)
    n = a.shape[-1]
    if n < 1:
        raise ValueError("fft requires length >= 1")
    if a.dtype != np.complex128:
        # Mixed real/complex matmul falls off the fast BLAS path.
        a = a.astype(np.complex128)
    if n <= _MATMUL_MAX:
        return a @ _dft_matrix(n)
    if n & (n - 1) == 0:
        return _fft_pow2(a)
    return _fft_bluestein(a)


def ifft(a: np.ndarray) -> np.ndarray:
    """Inverse DFT along the last axis of `a`."""
    a = np.asarray(a)
    return np.conj(fft(np.conj(a))) / a.shape[-1]


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    if a.shape[-1] < 1:
        raise ValueError("vectors must have dimension >= 1")
    return a, b


def circ_correlate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular correlation (a * b)_k = sum_i a_i b_{(i+k) mod d}, via FFT.

    Accepts single vectors or batches with shape (..., d); correlation is
    taken along the last axis.  The inverse transform's imaginary residue is
    asserted below 1e-9 before it is discarded.
    """
    a, b = _check_pair(a, b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input to circ_correlate")
    out = ifft(np.conj(fft(a)) * fft(b))
    residue = np.max(np.abs(out.imag))
    if residue >= _IMAG_TOL:
        raise ValueError(f"imaginary residue {residue:.3e} exceeds {_IMAG_TOL}")
    return np.ascontiguousarray(out.real)


def circ_correlate_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct O(d^2) circular correlation; oracle for `circ_correlate`."""
    a, b = _check_pair(a, b)
    d = a.shape[-1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    for k in range(d):
        out[..., k] = np.sum(a * np.roll(b, -k, axis=-1), axis=-1)
    return out


def circ_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular convolution (a o b)_k = sum_i a_i b_{(k-i) mod d}, via FFT."""
    a, b = _check_pair(a, b)
    out = ifft(fft(a) * fft(b))
    residue = np.max(np.abs(out.imag))
    if residue >= _IMAG_TOL:
        raise ValueError(f"imaginary residue {residue:.3e} exceeds {_IMAG_TOL}")
    return np.ascontiguousarray(out.real)
