"""Dense 5-D tensors in (n, c, t, h, w) layout and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects with ``ndim == 5``. Storage is
float32 unless a caller explicitly works in float64 (gradient checking).
Layout is C-order, so the flat offset of ``(n, c, t, h, w)`` is::

    (((n * C + c) * T + t) * H + h) * W + w
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

DTYPE = np.float32

# Largest element count we allow: the platform's maximal index.
_MAX_ELEMENTS = np.iinfo(np.intp).max


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or disagree."""


class Shape5(NamedTuple):
    n: int
    c: int
    t: int
    h: int
    w: int

    @classmethod
    def of(cls, shape) -> "Shape5":
        """Validate ``shape`` and return it as a :class:`Shape5`."""
        if len(shape) != 5:
            raise ShapeError(f"expected 5 extents, got {tuple(shape)}")
        dims = tuple(int(d) for d in shape)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all extents must be >= 1, got {dims}")
        count = 1
        for d in dims:
            count *= d
            if count > _MAX_ELEMENTS:
                raise ShapeError(f"element count of {dims} overflows the address space")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.n * self.c * self.t * self.h * self.w


def offset(shape, index) -> int:
    """Row-major flat offset of a 5-D index."""
    s = Shape5.of(shape)
    off = 0
    for i, extent in zip(index, s):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of range for {tuple(s)}")
        off = off * extent + int(i)
    return off


def index(shape, flat: int) -> tuple[int, int, int, int, int]:
    """Inverse of :func:`offset`."""
    s = Shape5.of(shape)
    if not 0 <= flat < s.size:
        raise IndexError(f"offset {flat} out of range for {tuple(s)}")
    out = []
    for extent in reversed(s):
        flat, r = divmod(flat, extent)
        out.append(r)
    return tuple(reversed(out))


def tensor_new(shape, fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    s = Shape5.of(shape)
    return np.full(tuple(s), fill, dtype=dtype)


def check5(x: np.ndarray, name: str = "input") -> Shape5:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{name} must be a 5-D array, got {getattr(x, 'shape', type(x))}")
    return Shape5.of(x.shape)


class Rng:
    """Seeded random stream backed by the Philox counter-based generator.

    ``Rng(seed).split(k)`` derives a reproducible substream that does not
    overlap with the parent or with other stream ids.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, stream_id: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(stream_id),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def seeded_normal(shape, rng: Rng, std: float = 1.0, dtype=DTYPE) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    s = Shape5.of(shape)
    return (rng.generator.standard_normal(tuple(s)) * std).astype(dtype)


def map_zip(a: np.ndarray, b: np.ndarray | None, f: Callable) -> np.ndarray:
    """Apply ``f`` elementwise to ``a`` (and ``b``). Never broadcasts."""
    if b is None:
        out = f(a)
    else:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        out = f(a, b)
    out = np.asarray(out, dtype=a.dtype)
    if out.shape != a.shape:
        raise ShapeError(f"elementwise function changed shape {a.shape} -> {out.shape}")
    return out


def relu_mask(x: np.ndarray) -> np.ndarray:
    """Entries ReLU passes through. NaN passes, so divergence stays visible."""
    return (x > 0) | np.isnan(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.where(relu_mask(x), x, 0).astype(x.dtype, copy=False)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return map_zip(a, b, np.add)
