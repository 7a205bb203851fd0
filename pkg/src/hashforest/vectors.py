"""Sparse vectors, sign-projection hash families and compound keys."""

from __future__ import annotations

import math
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

U64 = (1 << 64) - 1
KEY_WORD_BITS = 32


class InvalidVector(ValueError):
    """Raised for malformed vectors or dimensionality mismatches."""


class SparseVector:
    """A data point: dimensionality plus its non-zero coordinates.

    ``indices`` are strictly increasing ``uint32`` dimensions and ``values``
    the matching non-zero ``float64`` entries. Both arrays are read-only.
    """

    def __init__(self, id: int, dim: int, indices, values) -> None:
        id = int(id)
        dim = int(dim)
        if not 0 <= id <= U64:
            raise InvalidVector(f"id {id} outside unsigned 64-bit range")
        if not 0 <= dim < (1 << 32):
            raise InvalidVector(f"dim {dim} outside unsigned 32-bit range")
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        val = np.asarray(values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise InvalidVector("indices and values differ in length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= dim:
                raise InvalidVector(f"index out of range for dim {dim}")
            if idx.size > 1 and not np.all(np.diff(idx) > 0):
                raise InvalidVector("indices must be strictly increasing")
            if np.any(val == 0.0):
                raise InvalidVector("zero entries must be omitted")
            if not np.all(np.isfinite(val)):
                raise InvalidVector("values must be finite")
        idx = idx.astype(np.uint32)
        idx.flags.writeable = False
        val.flags.writeable = False
        self.id = id
        self.dim = dim
        self.indices = idx
        self.values = val

    @classmethod
    def from_dense(cls, id: int, array) -> "SparseVector":
        arr = np.asarray(array, dtype=np.float64).reshape(-1)
        nz = np.flatnonzero(arr)
        return cls(id, arr.size, nz, arr[nz])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    @cached_property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    @cached_property
    def unit_values(self) -> np.ndarray:
        n = self.norm
        if n == 0.0:
            raise InvalidVector(f"vector {self.id} has zero norm")
        return self.values / n

    def with_id(self, id: int) -> "SparseVector":
        return SparseVector(id, self.dim, self.indices, self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.id == other.id
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.id, self.dim, self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"SparseVector(id={self.id}, dim={self.dim}, nnz={self.nnz})"


def _key_weights(n_bits: int) -> np.ndarray:
    return (np.uint64(1) << (np.uint64(KEY_WORD_BITS - 1) - np.arange(n_bits, dtype=np.uint64)))


class SignProjectionFamily:
    """``n_bits`` random hyperplanes through the origin, derived from ``seed``.

    Each projection is a unit vector; bit ``i`` of a key is 1 when the vector
    lies on the non-negative side of hyperplane ``i``.
    """

    def __init__(self, seed: int, dim: int, n_bits: int) -> None:
        if not 1 <= n_bits <= KEY_WORD_BITS:
            raise ValueError(f"key length must be in [1, {KEY_WORD_BITS}], got {n_bits}")
        if dim < 1:
            raise ValueError("dim must be positive")
        self.seed = int(seed)
        self.dim = int(dim)
        self.n_bits = int(n_bits)
        rng = np.random.default_rng(self.seed)
        proj = rng.standard_normal((self.n_bits, self.dim))
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
        proj.flags.writeable = False
        self.projections = proj
        self._weights = _key_weights(self.n_bits)

    @classmethod
    def from_projections(cls, projections, seed: int = 0) -> "SignProjectionFamily":
        """Family over explicit hyperplane normals (rows are normalised)."""
        proj = np.array(projections, dtype=np.float64, ndmin=2)
        fam = cls.__new__(cls)
        if not 1 <= proj.shape[0] <= KEY_WORD_BITS:
            raise ValueError(f"key length must be in [1, {KEY_WORD_BITS}]")
        fam.seed, fam.dim, fam.n_bits = int(seed), proj.shape[1], proj.shape[0]
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
        proj.flags.writeable = False
        fam.projections = proj
        fam._weights = _key_weights(fam.n_bits)
        return fam

    def key(self, v: SparseVector) -> int:
        return compute_key(v, self)


def pack_bits(bits: np.ndarray) -> int:
    """Pack a boolean vector into a top-aligned 32-bit key (bit 0 = MSB)."""
    w = _key_weights(len(bits))
    return int(np.sum(w[np.asarray(bits, dtype=bool)]))


def compute_key(v: SparseVector, fam: SignProjectionFamily) -> int:
    if v.dim != fam.dim:
        raise InvalidVector(f"vector dim {v.dim} != family dim {fam.dim}")
    # sign(0) counts as positive so keys stay deterministic
    dots = fam.projections[:, v.indices] @ v.values
    return int(np.sum(fam._weights[dots >= 0.0]))


def key_bits(key: int, n_bits: int) -> list[int]:
    return [(key >> (KEY_WORD_BITS - 1 - i)) & 1 for i in range(n_bits)]


def llcp(k1: int, k2: int, n_bits: int = KEY_WORD_BITS) -> int:
    """Length of the longest common prefix of two compound keys."""
    diff = (k1 ^ k2) & 0xFFFFFFFF
    if diff == 0:
        return n_bits
    return min(KEY_WORD_BITS - diff.bit_length(), n_bits)


def key_distance(k1: int, k2: int, n_bits: int = KEY_WORD_BITS):
    """``1 / llcp``; ``math.inf`` when the keys differ in their first bit."""
    common = llcp(k1, k2, n_bits)
    if common == 0:
        return math.inf
    return Fraction(1, common)


def angular_distance(u: SparseVector, v: SparseVector) -> float:
    """Angle between ``u`` and ``v`` divided by pi, in ``[0, 1]``.

    Uses ``2 * atan2(|u' - v'|, |u' + v'|)`` on the normalised vectors, which
    stays accurate near 0 and 1 where ``arccos`` of a dot product does not.
    """
    if u.dim != v.dim:
        raise InvalidVector(f"dimension mismatch: {u.dim} != {v.dim}")
    ua, va = u.unit_values, v.unit_values
    if np.array_equal(u.indices, v.indices):
        diff = ua - va
        summ = ua + va
    else:
        union = np.union1d(u.indices, v.indices)
        a = np.zeros(union.size)
        b = np.zeros(union.size)
        a[np.searchsorted(union, u.indices)] = ua
        b[np.searchsorted(union, v.indices)] = va
        diff = a - b
        summ = a + b
    theta = 2.0 * math.atan2(math.sqrt(np.dot(diff, diff)), math.sqrt(np.dot(summ, summ)))
    return min(max(theta / math.pi, 0.0), 1.0)


_C1 = 0x87C37B91114253D5
_C2 = 0x4CF5AD432745937F


def _rotl64(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & U64


def fmix64(k: int) -> int:
    k ^= k >> 33
    k = (k * 0xFF51AFD7ED558CCD) & U64
    k ^= k >> 33
    k = (k * 0xC4CEB9FE1A85EC53) & U64
    k ^= k >> 33
    return k


def id_hash(id: int, seed: int = 0) -> int:
    """MurmurHash3-style 64-bit hash of a record id (one 8-byte block)."""
    k = (int(id) & U64) * _C1 & U64
    k = _rotl64(k, 31) * _C2 & U64
    h = (int(seed) & U64) ^ k
    h = (_rotl64(h, 27) * 5 + 0x52DCE729) & U64
    h ^= 8
    return fmix64(h)


class KeyHasher:
    """All ``L`` table families stacked so one product yields every key."""

    def __init__(self, families: Sequence[SignProjectionFamily]) -> None:
        if not families:
            raise ValueError("at least one family required")
        dims = {f.dim for f in families}
        bits = {f.n_bits for f in families}
        if len(dims) != 1 or len(bits) != 1:
            raise ValueError("families must share dim and key length")
        self.families = list(families)
        self.dim = dims.pop()
        self.n_bits = bits.pop()
        self._stack = np.vstack([f.projections for f in families])
        self._weights = _key_weights(self.n_bits)

    def keys(self, v: SparseVector) -> np.ndarray:
        if v.dim != self.dim:
            raise InvalidVector(f"vector dim {v.dim} != hasher dim {self.dim}")
        dots = self._stack[:, v.indices] @ v.values
        bits = (dots >= 0.0).reshape(len(self.families), self.n_bits)
        return bits.astype(np.uint64) @ self._weights
