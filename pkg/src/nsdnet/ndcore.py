"""Minimal dense numerical kernel: validated float64 matrices, the handful of
reductions the mask machinery needs, and a seeded deterministic PRNG.

Matrices are plain ``numpy.ndarray`` objects (float64, 2-D, row-major).
External data enters through :func:`as_matrix`, which rejects NaN/Inf.

The PRNG is SplitMix64 run in counter mode: the k-th output of a stream
seeded with ``s`` is ``mix64((s + k * GOLDEN) mod 2^64)`` where ``mix64`` is
the SplitMix64 finalizer and ``GOLDEN = 0x9E3779B97F4A7C15``.  Because each
output depends only on the seed and the draw index, scalar draws and
vectorized block draws produce the same stream, and the generator is trivial
to reproduce in any language with 64-bit integers.  A golden stream for seed
42 is frozen in the test suite.
"""

from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; message names both."""


class NonFiniteError(ValueError):
    """External data contained NaN or Inf."""


class EmptySubsetError(ValueError):
    """A row subset that must be non-empty was empty."""


def as_matrix(data):
    """Validate external data as a finite float64 2-D array and return it."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains NaN or Inf entries")
    return m


def matmul(a, b):
    """Matrix product a @ b with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def argsort_rows_by_key(keys):
    """Stable permutation p with keys[p] non-decreasing.

    Equal keys keep their original relative order, so grouping rows by class
    never depends on sort internals.  Empty input gives an empty permutation.
    """
    keys = np.asarray(keys)
    if keys.ndim != 1:
        raise ShapeMismatchError(f"keys must be 1-D, got shape {keys.shape}")
    return np.argsort(keys, kind="stable")


def row_mean(m, row_subset):
    """Per-column mean of the selected rows.

    Computed as pivot + mean(rows - pivot) with the first selected row as
    pivot, so a constant matrix averages to the constant exactly.  Raises
    EmptySubsetError for an empty subset: callers must decide what an absent
    class means, the kernel will not invent a value.
    """
    m = np.asarray(m, dtype=np.float64)
    idx = np.asarray(row_subset, dtype=np.intp)
    if idx.size == 0:
        raise EmptySubsetError("row_mean over an empty row subset")
    if idx.min() < 0 or idx.max() >= m.shape[0]:
        raise IndexError(
            f"row subset out of range for matrix with {m.shape[0]} rows")
    rows = m[idx]
    pivot = rows[0]
    return pivot + (rows - pivot).sum(axis=0) / idx.size


def top_k_indices(values, k):
    """Indices of the k largest values, ranked; ties go to the lower index.

    The tie rule makes selection deterministic: with equal values the lower
    index is ranked first (and therefore dropped first by mask builders).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeMismatchError(f"values must be 1-D, got {values.shape}")
    if not 0 <= k <= values.size:
        raise ValueError(f"k={k} out of range for {values.size} values")
    order = np.argsort(-values, kind="stable")
    return order[:k]


def _mix64(z):
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def derive(seed, label):
    """Derive an independent sub-seed from (seed, label).

    label is FNV-1a hashed, xor-folded into the seed, and finalized with the
    SplitMix64 mixer.  Used to give every consumer of randomness (init,
    dropout, splits, ...) its own stream from one experiment seed.
    """
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _M64
    return _mix64((_mix64(seed & _M64) ^ h) & _M64)


class Rng:
    """SplitMix64 counter-mode generator (see module docstring).

    Identical seeds give identical streams; block draws consume the same
    counter positions as the equivalent sequence of scalar draws.
    """

    def __init__(self, seed):
        self._counter = int(seed) & _M64

    def next_u64(self):
        self._counter = (self._counter + _GOLDEN) & _M64
        return _mix64(self._counter)

    def next_uniform(self):
        """One double in [0, 1) built from the top 53 bits of a u64 draw."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def _block_u64(self, n):
        ks = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        ks += np.uint64(self._counter)
        self._counter = (self._counter + n * _GOLDEN) & _M64
        z = ks
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniforms(self, shape):
        """Array of doubles in [0, 1); consumes one draw per element."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._block_u64(n) >> np.uint64(11)) * 2.0 ** -53
        return u.reshape(shape)

    def normals(self, shape):
        """Standard normals via Box-Muller; consumes 2*ceil(n/2) draws."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = self.uniforms(pairs)
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # log(1-u1), u1 < 1 so arg > 0
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def permutation(self, n):
        """Deterministic permutation of range(n): stable argsort of u64 keys."""
        if n == 0:
            return np.empty(0, dtype=np.intp)
        return np.argsort(self._block_u64(n), kind="stable")

    def shuffled(self, values):
        """Copy of values with rows in a seeded random order."""
        values = np.asarray(values)
        return values[self.permutation(values.shape[0])]
