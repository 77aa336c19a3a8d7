"""Binary containers for weights (NSKW) and sketches (NSKT), plus ``.npy`` import.

All integers and floats are little-endian.

NSKW::

    b"NSKW\\0"  u16 version  u32 layer_count
    per layer: u32 name_len, name (UTF-8), u32 n, c, w, h, spatial_s,
               n*t float64 values (filter-major, then the tensor linearization)

NSKT::

    b"NSKT\\0"  u16 version  u32 layer_count
    per layer: u32 name_len, name, u32 n, c, w, h, spatial_s, u32 m,
               u8 method (0 direct, 1 refined), u32 pool_size, u8 index_width,
               n * u32 term counts, n * u8 stop codes,
               pool: pool_size patterns of t bits each, zero-padded to a byte,
               indices: sum(counts) values of index_width bits, packed
                        LSB-first and zero-padded to a byte,
               sum(counts) float64 scales,
               sum(counts + 1) float64 residual norms
    u32 CRC32 of every preceding byte

The pool holds each distinct binary pattern of a layer once, in order of
first appearance; index_width is ceil(log2(pool_size)).
"""
from __future__ import annotations

import io
import math
import struct
import tokenize
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np
import numpy.lib.format as npformat

from .tensor import BinaryTensor, RealTensor, Shape, Sketch

NSKW_MAGIC = b"NSKW\0"
NSKT_MAGIC = b"NSKT\0"
NPY_MAGIC = b"\x93NUMPY"
FORMAT_VERSION = 1

METHOD_CODES = {"direct": 0, "refined": 1}
STOP_CODES = {None: 0, "zero residual": 1, "degenerate basis": 2}


class FormatError(ValueError):
    """Base class for unreadable or invalid files."""


class MalformedHeaderError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Declared shape or dtype is unsupported or disagrees with the data."""


class NonFiniteError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    n: int
    shape: Shape
    spatial_s: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("filter count must be >= 1")
        if self.spatial_s < 1:
            raise ValueError("spatial_s must be >= 1")


WeightLayer = tuple[LayerSpec, list[RealTensor]]
SketchLayer = tuple[LayerSpec, list[Sketch]]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"unexpected end of file at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def name(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError(f"layer name is not valid UTF-8: {exc}") from None

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_layer_spec(r: _Reader) -> LayerSpec:
    name = r.name()
    n, c, w, h, s = r.unpack("5I")
    try:
        return LayerSpec(name, n, Shape(c, w, h), s)
    except ValueError as exc:
        raise MalformedHeaderError(f"layer {name!r}: {exc}") from None


def _layer_spec_bytes(spec: LayerSpec) -> bytes:
    return _pack_name(spec.name) + struct.pack("<5I", spec.n, *spec.shape.dims, spec.spatial_s)


# --- weights -----------------------------------------------------------------

def encode_weights(layers: Sequence[WeightLayer]) -> bytes:
    out = io.BytesIO()
    out.write(NSKW_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(layers)))
    for spec, filters in layers:
        if len(filters) != spec.n:
            raise ValueError(f"layer {spec.name!r} declares {spec.n} filters, got {len(filters)}")
        out.write(_layer_spec_bytes(spec))
        for W in filters:
            if W.shape != spec.shape:
                raise ValueError(f"filter shape {W.shape} does not match layer shape {spec.shape}")
            out.write(W.data.astype("<f8").tobytes())
    return out.getvalue()


def decode_weights(buf: bytes) -> list[WeightLayer]:
    r = _Reader(buf)
    if r.take(len(NSKW_MAGIC)) != NSKW_MAGIC:
        raise MalformedHeaderError("not an NSKW file")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported NSKW version {version}")
    layers = []
    for _ in range(r.u32()):
        spec = _read_layer_spec(r)
        values = r.f64(spec.n * spec.shape.t)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"layer {spec.name!r} contains non-finite values")
        rows = values.reshape(spec.n, spec.shape.t)
        layers.append((spec, [RealTensor(spec.shape, row) for row in rows]))
    if not r.done():
        raise MalformedHeaderError("trailing bytes after last layer")
    return layers


def save_weights(path, layers: Sequence[WeightLayer]) -> None:
    Path(path).write_bytes(encode_weights(layers))


def load_weights(path) -> list[WeightLayer]:
    return decode_weights(Path(path).read_bytes())


# --- external .npy arrays ----------------------------------------------------

def _read_npy(fp: BinaryIO, name: str) -> WeightLayer:
    try:
        version = npformat.read_magic(fp)
        if version == (1, 0):
            shape, fortran_order, dtype = npformat.read_array_header_1_0(fp)
        elif version in ((2, 0), (3, 0)):
            shape, fortran_order, dtype = npformat.read_array_header_2_0(fp)
        else:
            raise MalformedHeaderError(f"unsupported npy version {version}")
    except FormatError:
        raise
    except (ValueError, SyntaxError, struct.error, tokenize.TokenError) as exc:
        raise MalformedHeaderError(f"malformed npy header: {exc}") from None
    if fortran_order:
        raise ShapeMismatchError("fortran-ordered arrays are not supported")
    if dtype.kind != "f" or dtype.itemsize not in (4, 8):
        raise ShapeMismatchError(f"expected float32 or float64 data, got {dtype}")
    if len(shape) != 4:
        raise ShapeMismatchError(f"expected a 4-D (n, c, w, h) array, got shape {shape}")
    if min(shape) < 1:
        raise ShapeMismatchError(f"array has an empty dimension: {shape}")
    count = math.prod(shape)
    raw = fp.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise TruncatedFileError(f"npy data shorter than declared shape {shape}")
    if fp.read(1):
        raise ShapeMismatchError(f"npy data longer than declared shape {shape}")
    arr = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"array {name!r} contains non-finite values")
    n, c, w, h = shape
    spec = LayerSpec(name, n, Shape(c, w, h))
    return spec, [RealTensor(spec.shape, f) for f in arr]


def load_array_file(path) -> list[WeightLayer]:
    """Read weights from an NSKW container or a 4-D ``.npy`` array.

    A ``.npy`` file yields a single layer named after the file stem with
    ``spatial_s = 1``.
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf.startswith(NSKW_MAGIC):
        return decode_weights(buf)
    if buf.startswith(NPY_MAGIC):
        return [_read_npy(io.BytesIO(buf), path.stem)]
    raise MalformedHeaderError(f"{path}: neither an NSKW nor an npy file")


def save_npy(path, filters: Sequence[RealTensor]) -> None:
    """Write a layer as a 4-D float64 ``.npy`` array (mainly for tests and examples)."""
    arr = np.stack([W.to_array() for W in filters])
    with open(path, "wb") as fp:
        npformat.write_array(fp, arr, version=(1, 0))


# --- sketches ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerStorage:
    name: str
    t: int
    n: int
    m: int
    terms: int
    pool_size: int
    index_width: int
    pool_bits: int
    index_bits: int
    scale_bits: int
    overhead_bits: int
    ideal_bits: int

    @property
    def dedup_ratio(self) -> float:
        return self.terms / self.pool_size if self.pool_size else 1.0

    @property
    def total_bits(self) -> int:
        return self.pool_bits + self.index_bits + self.scale_bits + self.overhead_bits

    @property
    def full_precision_bits(self) -> int:
        return 32 * self.t * self.n

    @property
    def compression_factor(self) -> float:
        """``32t / (32m + tm)``: 32-bit weights versus m binary tensors plus m 32-bit scales."""
        return 32 * self.t / ((32 + self.t) * self.m) if self.m else math.inf


@dataclass(frozen=True)
class StorageReport:
    layers: list[LayerStorage]
    header_bits: int
    file_bits: int


def _index_width(pool_size: int) -> int:
    return max(pool_size - 1, 0).bit_length()


def _pack_indices(values: np.ndarray, width: int) -> bytes:
    if width == 0 or values.size == 0:
        return b""
    bits = ((values[:, None] >> np.arange(width)) & 1).astype(bool).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_indices(raw: bytes, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[: count * width]
    bits = bits.reshape(count, width).astype(np.int64)
    return (bits << np.arange(width)).sum(axis=1)


def _encode_sketch_layer(spec: LayerSpec, sketches: Sequence[Sketch]) -> tuple[bytes, LayerStorage]:
    if len(sketches) != spec.n:
        raise ValueError(f"layer {spec.name!r} declares {spec.n} filters, got {len(sketches)}")
    methods = {s.method for s in sketches}
    if len(methods) != 1:
        raise ValueError("all sketches of a layer must use one method")
    m = max(s.m for s in sketches)
    pool: dict[BinaryTensor, int] = {}
    indices = []
    for s in sketches:
        if s.shape != spec.shape:
            raise ValueError(f"sketch shape {s.shape} does not match layer shape {spec.shape}")
        for b in s.basis:
            indices.append(pool.setdefault(b, len(pool)))
    width = _index_width(len(pool))
    counts = [s.m for s in sketches]
    head = _layer_spec_bytes(spec) + struct.pack(
        "<IBIB", m, METHOD_CODES[methods.pop()], len(pool), width)
    head += struct.pack(f"<{spec.n}I", *counts)
    head += struct.pack(f"<{spec.n}B", *(STOP_CODES[s.stop_reason] for s in sketches))
    pool_bytes = b"".join(b.to_bytes() for b in pool)
    index_bytes = _pack_indices(np.array(indices, dtype=np.int64), width)
    scales = np.array([a for s in sketches for a in s.scales], dtype="<f8").tobytes()
    history = np.array([e for s in sketches for e in s.residual_norms_sq], dtype="<f8").tobytes()
    body = head + pool_bytes + index_bytes + scales + history
    storage = LayerStorage(
        name=spec.name, t=spec.shape.t, n=spec.n, m=m, terms=len(indices),
        pool_size=len(pool), index_width=width,
        pool_bits=8 * len(pool_bytes), index_bits=8 * len(index_bytes),
        scale_bits=8 * len(scales), overhead_bits=8 * (len(head) + len(history)),
        ideal_bits=(32 * m + spec.shape.t * m) * spec.n,
    )
    return body, storage


def encode_sketches(layers: Sequence[SketchLayer]) -> tuple[bytes, StorageReport]:
    head = NSKT_MAGIC + struct.pack("<HI", FORMAT_VERSION, len(layers))
    parts, storage = [head], []
    for spec, sketches in layers:
        body, st = _encode_sketch_layer(spec, sketches)
        parts.append(body)
        storage.append(st)
    payload = b"".join(parts)
    out = payload + struct.pack("<I", zlib.crc32(payload))
    return out, StorageReport(storage, 8 * (len(head) + 4), 8 * len(out))


def _decode_sketch_layer(r: _Reader) -> tuple[SketchLayer, LayerStorage]:
    start = r.pos
    spec = _read_layer_spec(r)
    m, method_code, pool_size, width = r.unpack("IBIB")
    methods = {v: k for k, v in METHOD_CODES.items()}
    stops = {v: k for k, v in STOP_CODES.items()}
    if method_code not in methods:
        raise MalformedHeaderError(f"unknown method code {method_code}")
    if width != _index_width(pool_size):
        raise MalformedHeaderError(f"index width {width} inconsistent with pool size {pool_size}")
    counts = r.unpack(f"{spec.n}I")
    stop_codes = r.unpack(f"{spec.n}B")
    for c, code in zip(counts, stop_codes):
        if code not in stops:
            raise MalformedHeaderError(f"unknown stop code {code}")
        if c > m or (c < m and code == 0):
            raise MalformedHeaderError(f"term count {c} does not match declared m={m}")
    head_len = r.pos - start
    nbytes = -(-spec.shape.t // 8)
    pool = [BinaryTensor.from_bytes(spec.shape, r.take(nbytes)) for _ in range(pool_size)]
    if len(set(pool)) != len(pool):
        raise MalformedHeaderError("pool contains duplicate patterns")
    terms = sum(counts)
    index_raw = r.take(-(-terms * width // 8))
    indices = _unpack_indices(index_raw, terms, width)
    if terms and (indices.max() >= pool_size):
        raise MalformedHeaderError("basis index out of range")
    scales = r.f64(terms)
    history = r.f64(terms + spec.n)
    sketches, pos, hpos = [], 0, 0
    for c, code in zip(counts, stop_codes):
        sketches.append(Sketch(
            spec.shape,
            [pool[i] for i in indices[pos:pos + c]],
            scales[pos:pos + c].tolist(),
            history[hpos:hpos + c + 1].tolist(),
            methods[method_code],
            stops[code],
        ))
        pos += c
        hpos += c + 1
    storage = LayerStorage(
        name=spec.name, t=spec.shape.t, n=spec.n, m=m, terms=terms,
        pool_size=pool_size, index_width=width,
        pool_bits=8 * nbytes * pool_size, index_bits=8 * len(index_raw),
        scale_bits=64 * terms, overhead_bits=8 * (head_len + 8 * (terms + spec.n)),
        ideal_bits=(32 * m + spec.shape.t * m) * spec.n,
    )
    return (spec, sketches), storage


def decode_sketches(buf: bytes) -> tuple[list[SketchLayer], StorageReport]:
    min_len = len(NSKT_MAGIC) + 6 + 4
    if len(buf) < min_len:
        raise TruncatedFileError("file too short to be an NSKT container")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("CRC32 mismatch: file is corrupted or truncated")
    r = _Reader(payload)
    if r.take(len(NSKT_MAGIC)) != NSKT_MAGIC:
        raise MalformedHeaderError("not an NSKT file")
    version = r.u16()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported NSKT version {version}")
    layers, storage = [], []
    for _ in range(r.u32()):
        layer, st = _decode_sketch_layer(r)
        layers.append(layer)
        storage.append(st)
    if not r.done():
        raise MalformedHeaderError("trailing bytes after last layer")
    return layers, StorageReport(storage, 8 * (len(NSKT_MAGIC) + 6 + 4), 8 * len(buf))


def save_sketch(path, layers: Sequence[SketchLayer]) -> StorageReport:
    buf, report = encode_sketches(layers)
    Path(path).write_bytes(buf)
    return report


def load_sketch(path) -> list[SketchLayer]:
    return decode_sketches(Path(path).read_bytes())[0]


def sketch_file_info(path) -> tuple[list[SketchLayer], StorageReport]:
    return decode_sketches(Path(path).read_bytes())


def generate_synthetic(shape: Shape, n: int, distribution: str = "gaussian",
                       seed: int | None = 0) -> list[RealTensor]:
    """Random filters: standard normal or uniform on [-1, 1] entries."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        data = rng.standard_normal((n, shape.t))
    elif distribution == "uniform":
        data = rng.uniform(-1.0, 1.0, size=(n, shape.t))
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return [RealTensor(shape, row) for row in data]
