"""Dense float64 array substrate.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1-3.
The helpers here add the shape checking and the tie-breaking rules the
layers rely on, plus a counter-based random stream.
"""
from __future__ import annotations

import hashlib

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim > 3:
        raise DimensionError(f"rank {a.ndim} > 3 not supported, shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` elementwise.

    ``b`` may be a scalar, a tensor of the same shape, or a rank-1 tensor
    matching the last axis of ``a`` (bias broadcast). ``exp`` and ``max0``
    are unary and ignore ``b``.
    """
    a = np.asarray(a, dtype=DTYPE)
    if op == "exp":
        return np.exp(a)
    if op == "max0":
        return np.maximum(a, 0.0)
    if op == "scale":
        if not np.isscalar(b):
            raise DimensionError("scale expects a scalar factor")
        return a * float(b)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _BINARY[op](a, float(b))
    b = np.asarray(b, dtype=DTYPE)
    if b.shape != a.shape and not (b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return _BINARY[op](a, b)


def reduce(op: str, a, axis: int) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    if op == "sum":
        return a.sum(axis=axis)
    if op == "mean":
        return a.mean(axis=axis)
    if op == "max":
        return a.max(axis=axis)
    if op == "argmax":
        # numpy returns the first occurrence, i.e. lowest index on ties
        return np.argmax(a, axis=axis)
    raise ValueError(f"unknown reduction {op!r}")


class Rng:
    """Seeded random stream backed by the Philox counter-based generator.

    ``fork(*keys)`` derives an independent child stream from the seed and a
    key path, so callers can address a stream by (purpose, step) without
    depending on how many draws happened elsewhere.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def gaussian(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        return draw(self, ("gaussian", mean, std), shape)

    def uniform(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        return draw(self, ("uniform", lo, hi), shape)

    def bernoulli(self, shape, p) -> np.ndarray:
        return draw(self, ("bernoulli", p), shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)


def _key_to_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("rng keys must be non-negative")
        return int(k)
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.blake2b(str(k).encode("utf-8"), digest_size=8).digest(), "little")


def draw(rng: Rng, dist: tuple, shape) -> np.ndarray:
    """Draw a float64 tensor from ``dist``.

    ``dist`` is one of ``("gaussian", mean, std)``, ``("uniform", lo, hi)``
    or ``("bernoulli", p)``.
    """
    kind = dist[0]
    g = rng.generator
    if kind == "gaussian":
        _, mean, std = dist
        if not std > 0:
            raise ValueError(f"gaussian std must be > 0, got {std}")
        return mean + std * g.standard_normal(shape)
    if kind == "uniform":
        _, lo, hi = dist
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got {lo}, {hi}")
        return g.uniform(lo, hi, shape)
    if kind == "bernoulli":
        p = dist[1]
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli p must lie in [0, 1], got {p}")
        return (g.random(shape) < p).astype(DTYPE)
    raise ValueError(f"unknown distribution {kind!r}")
