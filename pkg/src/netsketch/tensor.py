"""Dense and bit-packed tensor value types.

Entries are linearized channel-major, then row, then column, i.e. the
C-order flattening of an array of shape ``(c, w, h)``. Binary tensors pack
one bit per entry (1 encodes +1, 0 encodes -1) into little-endian uint64
words; padding bits past ``t`` are always zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WORD_BITS = 64


@dataclass(frozen=True)
class Shape:
    c: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("c", "w", "h"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"shape dimension {name} must be a positive integer, got {v!r}")

    @property
    def t(self) -> int:
        return self.c * self.w * self.h

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.c, self.w, self.h)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class RealTensor:
    """Immutable real-valued tensor of shape ``(c, w, h)`` in double precision."""

    __slots__ = ("shape", "data")

    def __init__(self, shape: Shape, data):
        arr = np.array(data, dtype=np.float64).reshape(-1)
        if arr.size != shape.t:
            raise ValueError(f"expected {shape.t} values for {shape}, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", _readonly(arr))

    def __setattr__(self, name, value):
        raise AttributeError("RealTensor is immutable")

    @classmethod
    def from_array(cls, arr) -> "RealTensor":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            return cls(Shape(arr.size, 1, 1), arr)
        if arr.ndim != 3:
            raise ValueError(f"expected a 1-D or 3-D array, got {arr.ndim}-D")
        return cls(Shape(*arr.shape), arr)

    @classmethod
    def zeros(cls, shape: Shape) -> "RealTensor":
        return cls(shape, np.zeros(shape.t))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape.dims)

    def __len__(self):
        return self.shape.t

    def __eq__(self, other):
        if not isinstance(other, RealTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def __repr__(self):
        return f"RealTensor({self.shape}, {self.data.tolist()!r})"


class BinaryTensor:
    """Immutable {+1, -1} tensor stored as packed uint64 words."""

    __slots__ = ("shape", "words")

    def __init__(self, shape: Shape, words):
        words = np.array(words, dtype=np.uint64).reshape(-1)
        n_words = -(-shape.t // WORD_BITS)
        if words.size != n_words:
            raise ValueError(f"expected {n_words} words for t={shape.t}, got {words.size}")
        tail = shape.t % WORD_BITS
        if tail:
            # canonical zero padding keeps word equality and popcount valid
            words[-1] &= np.uint64((1 << tail) - 1)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", _readonly(words))

    def __setattr__(self, name, value):
        raise AttributeError("BinaryTensor is immutable")

    @classmethod
    def from_bits(cls, shape: Shape, bits) -> "BinaryTensor":
        """Pack a boolean sequence (True is +1) of length ``t``."""
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        if bits.size != shape.t:
            raise ValueError(f"expected {shape.t} bits, got {bits.size}")
        n_words = -(-shape.t // WORD_BITS)
        packed = np.packbits(bits, bitorder="little")
        buf = np.zeros(n_words * 8, dtype=np.uint8)
        buf[: packed.size] = packed
        return cls(shape, buf.view("<u8").astype(np.uint64))

    @classmethod
    def from_signs(cls, shape: Shape, signs) -> "BinaryTensor":
        signs = np.asarray(signs).reshape(-1)
        if not np.all((signs == 1) | (signs == -1)):
            raise ValueError("binary tensor entries must be +1 or -1")
        return cls.from_bits(shape, signs > 0)

    @classmethod
    def ones(cls, shape: Shape) -> "BinaryTensor":
        return cls.from_bits(shape, np.ones(shape.t, dtype=bool))

    def bits(self) -> np.ndarray:
        raw = np.unpackbits(self.words.astype("<u8").view(np.uint8), bitorder="little")
        return raw[: self.shape.t].astype(bool)

    def signs(self) -> np.ndarray:
        """Entries as an int8 array of +1/-1."""
        return np.where(self.bits(), 1, -1).astype(np.int8)

    def dense(self) -> RealTensor:
        return RealTensor(self.shape, self.signs())

    def negate(self) -> "BinaryTensor":
        return BinaryTensor(self.shape, ~self.words)

    def __invert__(self):
        return self.negate()

    def to_bytes(self) -> bytes:
        """``t`` bits, little-endian bit order, zero-padded to a byte boundary."""
        n_bytes = -(-self.shape.t // 8)
        return self.words.astype("<u8").tobytes()[:n_bytes]

    @classmethod
    def from_bytes(cls, shape: Shape, raw: bytes) -> "BinaryTensor":
        n_words = -(-shape.t // WORD_BITS)
        buf = np.zeros(n_words * 8, dtype=np.uint8)
        buf[: len(raw)] = np.frombuffer(raw, dtype=np.uint8)
        return cls(shape, buf.view("<u8").astype(np.uint64))

    def __len__(self):
        return self.shape.t

    def __eq__(self, other):
        if not isinstance(other, BinaryTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.shape, self.words.tobytes()))

    def __repr__(self):
        s = "".join("+" if b else "-" for b in self.bits()[:64])
        more = "..." if self.shape.t > 64 else ""
        return f"BinaryTensor({self.shape}, {s}{more})"


@dataclass(frozen=True)
class Sketch:
    """Scaled binary expansion ``sum_j scales[j] * basis[j]`` of one filter.

    ``residual_norms_sq[j]`` is the squared norm of the residual after ``j``
    terms, so it has one more entry than ``basis``. ``stop_reason`` is set
    when the expansion ended before the requested number of terms.
    """

    shape: Shape
    basis: tuple[BinaryTensor, ...]
    scales: tuple[float, ...]
    residual_norms_sq: tuple[float, ...]
    method: str = "direct"
    stop_reason: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "scales", tuple(float(a) for a in self.scales))
        object.__setattr__(self, "residual_norms_sq", tuple(float(e) for e in self.residual_norms_sq))
        if self.method not in ("direct", "refined"):
            raise ValueError(f"unknown sketch method {self.method!r}")
        if len(self.basis) != len(self.scales):
            raise ValueError("basis and scales must have equal length")
        if len(self.residual_norms_sq) != len(self.basis) + 1:
            raise ValueError("residual history must have m + 1 entries")
        for b in self.basis:
            if b.shape != self.shape:
                raise ValueError(f"basis tensor shape {b.shape} does not match {self.shape}")

    @property
    def m(self) -> int:
        return len(self.basis)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def sign_tensor(W: RealTensor) -> BinaryTensor:
    """Elementwise sign; exact zeros map to +1."""
    return BinaryTensor.from_bits(W.shape, W.data >= 0)


def inner_product(A: RealTensor, B: BinaryTensor) -> float:
    _check_same_shape(A, B)
    bits = B.bits()
    return float(A.data[bits].sum() - A.data[~bits].sum())


def binary_inner_product(B0: BinaryTensor, B1: BinaryTensor) -> int:
    """Integer inner product ``t - 2 * hamming``, via XOR and popcount."""
    _check_same_shape(B0, B1)
    hamming = int(np.bitwise_count(B0.words ^ B1.words).sum())
    return B0.shape.t - 2 * hamming


def frobenius_norm_sq(W: RealTensor) -> float:
    return float(np.dot(W.data, W.data))


def reconstruct(s: Sketch) -> RealTensor:
    out = np.zeros(s.shape.t)
    for a, b in zip(s.scales, s.basis):
        out += a * b.signs()
    return RealTensor(s.shape, out)


def sign_matrix(tensors: Sequence[BinaryTensor]) -> np.ndarray:
    """Stack binary tensors as rows of a ``(k, t)`` float64 matrix of +/-1."""
    return np.stack([b.signs() for b in tensors]).astype(np.float64)
