"""Block floating point numerics.

A block of values shares one exponent ``e_s = floor(log2(max |x_i|))``; each
element stores a signed mantissa ``m_i`` of ``w`` bits (sign included) so that
``x_i ~= m_i * 2**(e_s - (w - 2))``.  Mantissas are rounded half-to-even and
clamped symmetrically to ``+-(2**(w-1) - 1)``.

Scalar helpers (:func:`decompose_float`, :func:`shared_exponent`,
:func:`quantize_block`, :func:`block_dot`) operate on single blocks.  Tensors
are handled in bulk by :func:`block_tensor`, which keeps mantissas and
exponents in dense arrays rather than one Python object per block.
"""
from __future__ import annotations

import enum
import functools
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "EXPONENT_MIN",
    "EXPONENT_MAX",
    "ZERO_EXPONENT",
    "MantissaWidth",
    "Format",
    "FloatDecomposition",
    "ZseStats",
    "BfpBlock",
    "BfpTensor",
    "decompose_float",
    "shared_exponent",
    "quantize_block",
    "dequantize_block",
    "block_dot",
    "block_shape_for",
    "block_tensor",
    "fake_quantize",
]

# 8-bit shared exponent field: -127 is reserved for all-zero blocks.
EXPONENT_MIN = -126
EXPONENT_MAX = 127
ZERO_EXPONENT = -127


class MantissaWidth(enum.IntEnum):
    """Total sign+mantissa bits of one block element."""

    W4 = 4
    W8 = 8
    W16 = 16

    @property
    def max_mantissa(self) -> int:
        return (1 << (int(self) - 1)) - 1

    @property
    def frac_bits(self) -> int:
        # bits below the leading one of the largest element
        return int(self) - 2

    @classmethod
    def coerce(cls, value) -> "MantissaWidth":
        if isinstance(value, Format):
            return value.width
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise ValueError(f"mantissa width must be one of 4, 8, 16; got {value!r}") from None


class Format(enum.Enum):
    """Named BFP formats (8-bit shared exponent + mantissa width)."""

    FB12 = 4
    FB16 = 8
    FB24 = 16

    @property
    def width(self) -> MantissaWidth:
        return MantissaWidth(self.value)

    @classmethod
    def coerce(cls, value) -> "Format":
        if isinstance(value, Format):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown format {value!r}; expected FB12, FB16 or FB24") from None
        return cls(int(MantissaWidth.coerce(value)))


@dataclass(frozen=True)
class FloatDecomposition:
    sign: int
    mantissa: float
    exponent: int

    def value(self) -> float:
        return self.sign * math.ldexp(self.mantissa, self.exponent)


@dataclass(frozen=True)
class ZseStats:
    """Zero-setting-error counts: nonzero inputs whose mantissa became 0."""

    total_elements: int = 0
    zse_count: int = 0

    def __post_init__(self):
        if not 0 <= self.zse_count <= self.total_elements:
            raise ValueError("zse_count must lie in [0, total_elements]")

    @property
    def ratio(self) -> float:
        return self.zse_count / self.total_elements if self.total_elements else 0.0

    def __add__(self, other: "ZseStats") -> "ZseStats":
        return ZseStats(self.total_elements + other.total_elements, self.zse_count + other.zse_count)


@dataclass(frozen=True)
class BfpBlock:
    shared_exponent: int
    mantissas: tuple[int, ...]
    width: MantissaWidth
    logical_len: int = -1

    def __post_init__(self):
        object.__setattr__(self, "width", MantissaWidth.coerce(self.width))
        object.__setattr__(self, "mantissas", tuple(int(m) for m in self.mantissas))
        if self.logical_len < 0:
            object.__setattr__(self, "logical_len", len(self.mantissas))
        if self.logical_len > len(self.mantissas):
            raise ValueError("logical_len exceeds stored mantissas")
        limit = self.width.max_mantissa
        if any(abs(m) > limit for m in self.mantissas):
            raise ValueError(f"mantissa out of range for width {int(self.width)}")
        if any(self.mantissas[self.logical_len:]):
            raise ValueError("padding mantissas must be zero")
        if self.shared_exponent == ZERO_EXPONENT:
            if any(self.mantissas):
                raise ValueError("all-zero sentinel exponent with nonzero mantissas")
        elif not EXPONENT_MIN <= self.shared_exponent <= EXPONENT_MAX:
            raise ValueError(f"shared exponent {self.shared_exponent} outside 8-bit range")

    @property
    def is_zero(self) -> bool:
        return self.shared_exponent == ZERO_EXPONENT

    @property
    def scale_exponent(self) -> int:
        """Power of two carried by one mantissa LSB."""
        return self.shared_exponent - self.width.frac_bits


def decompose_float(x: float) -> FloatDecomposition:
    """Split a finite nonzero ``x`` into sign, mantissa in [1, 2) and exponent."""
    x = float(x)
    if x == 0.0 or not math.isfinite(x):
        raise ValueError(f"decompose_float needs a finite nonzero value, got {x!r}")
    frac, exp = math.frexp(abs(x))  # frac in [0.5, 1)
    return FloatDecomposition(-1 if x < 0 else 1, frac * 2.0, exp - 1)


def _round_half_even(x: float) -> int:
    return int(round(x))


def shared_exponent(values: Sequence[float]) -> int:
    """``floor(log2(max |x|))`` via exponent extraction; :data:`ZERO_EXPONENT` for all zeros.

    Magnitudes below the 8-bit range are pinned to :data:`EXPONENT_MIN`.
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError("shared_exponent of an empty block")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("non-finite value in block")
    peak = max(abs(v) for v in values)
    if peak == 0.0:
        return ZERO_EXPONENT
    e = decompose_float(peak).exponent
    if e > EXPONENT_MAX:
        raise OverflowError(f"block exponent {e} exceeds the 8-bit shared exponent range")
    return max(e, EXPONENT_MIN)


def quantize_block(values: Sequence[float], width) -> tuple[BfpBlock, ZseStats]:
    """Convert one block to BFP, counting zero-setting errors."""
    width = MantissaWidth.coerce(width)
    values = [float(v) for v in values]
    e_s = shared_exponent(values)
    if e_s == ZERO_EXPONENT:
        return BfpBlock(ZERO_EXPONENT, (0,) * len(values), width), ZseStats(len(values), 0)
    shift = width.frac_bits - e_s
    limit = width.max_mantissa
    mantissas = []
    zse = 0
    for v in values:
        m = _round_half_even(math.ldexp(v, shift))
        m = max(-limit, min(limit, m))
        if m == 0 and v != 0.0:
            zse += 1
        mantissas.append(m)
    if not any(mantissas):
        # every element underflowed: keep the sentinel invariant
        return BfpBlock(ZERO_EXPONENT, tuple(mantissas), width), ZseStats(len(values), zse)
    return BfpBlock(e_s, tuple(mantissas), width), ZseStats(len(values), zse)


def dequantize_block(block: BfpBlock) -> list[float]:
    if block.is_zero:
        return [0.0] * block.logical_len
    scale = block.scale_exponent
    return [math.ldexp(float(m), scale) for m in block.mantissas[: block.logical_len]]


def block_dot(a: BfpBlock, b: BfpBlock) -> float:
    """Dot product with exact integer accumulation, scaled once at the end."""
    if a.logical_len != b.logical_len:
        raise ValueError(f"block length mismatch: {a.logical_len} vs {b.logical_len}")
    if a.is_zero or b.is_zero:
        return 0.0
    acc = sum(x * y for x, y in zip(a.mantissas[: a.logical_len], b.mantissas[: b.logical_len]))
    return math.ldexp(float(acc), a.scale_exponent + b.scale_exponent)


# Minimum blocking unit per (kernel size, format): (kh, kw, channels).
_BLOCK_SHAPES = {
    1: {Format.FB12: (1, 1, 216), Format.FB16: (1, 1, 108), Format.FB24: (1, 1, 54)},
    3: {Format.FB12: (3, 3, 24), Format.FB16: (3, 3, 12), Format.FB24: (3, 3, 6)},
    5: {Format.FB12: (5, 5, 8), Format.FB16: (5, 5, 4), Format.FB24: (5, 5, 2)},
    7: {Format.FB12: (7, 7, 4), Format.FB16: (7, 7, 2), Format.FB24: (7, 7, 1)},
}


def block_shape_for(layer_kind, fmt) -> tuple[int, int, int]:
    """Table of minimum shared-exponent block shapes, keyed by kernel size.

    ``layer_kind`` may be a :class:`flexblock.layers.LayerKind` or its string
    value.  Depthwise kinds reuse the rule of the matching dense kernel size.
    """
    from .layers import LayerKind

    kind = LayerKind.coerce(layer_kind)
    return _BLOCK_SHAPES[kind.kernel][Format.coerce(fmt)]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True, eq=False)
class BfpTensor:
    """A tensor partitioned into BFP blocks.

    ``layout`` is ``"activation"`` for ``(N, C, H, W)`` data tiled into
    ``kh x kw`` spatial tiles by ``c`` channels, or ``"weight"`` for
    ``(C_out, C_in, kh, kw)`` kernels grouped by ``c`` input channels per
    output channel.  ``exponents`` has one entry per block and ``mantissas``
    is ``(n_blocks, block_len)``; ``valid`` marks non-padding elements.
    """

    shape: tuple[int, ...]
    block_shape: tuple[int, int, int]
    width: MantissaWidth
    layout: str
    exponents: np.ndarray
    mantissas: np.ndarray
    valid: np.ndarray
    zse: ZseStats = field(default_factory=ZseStats)

    @property
    def n_blocks(self) -> int:
        return int(self.exponents.shape[0])

    @property
    def logical_lens(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    @property
    def blocks(self) -> Iterator[BfpBlock]:
        """Yield each block as a :class:`BfpBlock` with valid elements first."""
        for e, m, v in zip(self.exponents, self.mantissas, self.valid):
            vals = m[v].tolist()
            n = len(vals)
            vals += [0] * (m.shape[0] - n)
            yield BfpBlock(int(e), tuple(vals), self.width, n)

    def dequantize(self) -> np.ndarray:
        scale = np.where(self.exponents == ZERO_EXPONENT, 0, self.exponents - self.width.frac_bits)
        flat = np.ldexp(self.mantissas.astype(np.float64), scale[:, None].astype(np.int32))
        return _unblock(flat, self.shape, self.block_shape, self.layout)

    def to_bytes(self) -> bytes:
        """Canonical little-endian serialization (see README, "BfpTensor file")."""
        buf = io.BytesIO()
        buf.write(_BFPT_MAGIC)
        layout_code = _LAYOUTS.index(self.layout)
        buf.write(struct.pack("<BBBB", _BFPT_VERSION, int(self.width), layout_code, len(self.shape)))
        buf.write(struct.pack(f"<{len(self.shape)}Q", *self.shape))
        buf.write(struct.pack("<3I", *self.block_shape))
        buf.write(struct.pack("<QQ", self.zse.total_elements, self.zse.zse_count))
        buf.write(struct.pack("<Q", self.n_blocks))
        buf.write(self.exponents.astype("<i1").tobytes())
        mant_dtype = "<i2" if self.width == MantissaWidth.W16 else "<i1"
        buf.write(self.mantissas.astype(mant_dtype).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BfpTensor":
        view = memoryview(data)
        if bytes(view[:4]) != _BFPT_MAGIC:
            raise ValueError("not a BfpTensor stream (bad magic)")
        version, width, layout_code, ndim = struct.unpack_from("<BBBB", view, 4)
        if version != _BFPT_VERSION:
            raise ValueError(f"unsupported BfpTensor version {version}")
        off = 8
        shape = struct.unpack_from(f"<{ndim}Q", view, off)
        off += 8 * ndim
        block_shape = struct.unpack_from("<3I", view, off)
        off += 12
        total, zse = struct.unpack_from("<QQ", view, off)
        off += 16
        (n_blocks,) = struct.unpack_from("<Q", view, off)
        off += 8
        exponents = np.frombuffer(view, dtype="<i1", count=n_blocks, offset=off).astype(np.int64)
        off += n_blocks
        block_len = block_shape[0] * block_shape[1] * block_shape[2]
        mant_dtype = "<i2" if width == 16 else "<i1"
        mantissas = np.frombuffer(view, dtype=mant_dtype, count=n_blocks * block_len, offset=off)
        layout = _LAYOUTS[layout_code]
        valid = _valid_mask(tuple(shape), tuple(block_shape), layout)
        return cls(
            shape=tuple(int(s) for s in shape),
            block_shape=tuple(int(b) for b in block_shape),
            width=MantissaWidth(width),
            layout=layout,
            exponents=exponents,
            mantissas=mantissas.astype(np.int64).reshape(n_blocks, block_len),
            valid=valid,
            zse=ZseStats(int(total), int(zse)),
        )


_BFPT_MAGIC = b"BFPT"
_BFPT_VERSION = 1
_LAYOUTS = ("activation", "weight")


def _as_nchw(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) == 4:
        return shape  # type: ignore[return-value]
    if len(shape) == 3:
        return (1, *shape)  # type: ignore[return-value]
    if len(shape) == 2:
        return (shape[0], shape[1], 1, 1)
    if len(shape) == 1:
        return (1, shape[0], 1, 1)
    raise ValueError(f"cannot block a tensor of rank {len(shape)}")


def _to_blocks(x: np.ndarray, block_shape, layout: str) -> np.ndarray:
    """Pad and reshape into ``(n_blocks, kh*kw*c)``."""
    kh, kw, c = block_shape
    if layout == "activation":
        n, ch, h, w = _as_nchw(x.shape)
        x = x.reshape(n, ch, h, w)
    elif layout == "weight":
        if x.ndim != 4:
            raise ValueError(f"weight tensors must be (C_out, C_in, kh, kw), got shape {x.shape}")
        n, ch, h, w = x.shape
    else:
        raise ValueError(f"unknown layout {layout!r}")
    cg, hg, wg = _ceil_div(ch, c), _ceil_div(h, kh), _ceil_div(w, kw)
    if (cg * c, hg * kh, wg * kw) != (ch, h, w):
        padded = np.zeros((n, cg * c, hg * kh, wg * kw), dtype=x.dtype)
        padded[:, :ch, :h, :w] = x
        x = padded
    x = x.reshape(n, cg, c, hg, kh, wg, kw).transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(-1, c * kh * kw)


def _unblock(flat: np.ndarray, shape, block_shape, layout: str) -> np.ndarray:
    kh, kw, c = block_shape
    if layout == "activation":
        n, ch, h, w = _as_nchw(tuple(shape))
    else:
        n, ch, h, w = shape
    cg, hg, wg = _ceil_div(ch, c), _ceil_div(h, kh), _ceil_div(w, kw)
    x = flat.reshape(n, cg, hg, wg, c, kh, kw).transpose(0, 1, 4, 2, 5, 3, 6)
    x = x.reshape(n, cg * c, hg * kh, wg * kw)[:, :ch, :h, :w]
    return np.ascontiguousarray(x).reshape(shape)


@functools.lru_cache(maxsize=256)
def _valid_mask(shape, block_shape, layout: str) -> np.ndarray:
    mask = _to_blocks(np.ones(shape, dtype=bool), block_shape, layout)
    mask.setflags(write=False)
    return mask


def _quantize_rows(rows: np.ndarray, width: MantissaWidth):
    """Vectorized :func:`quantize_block` over the rows of a 2-D array."""
    if not np.all(np.isfinite(rows)):
        raise ValueError("non-finite value in tensor")
    peak = np.max(np.abs(rows), axis=1) if rows.shape[1] else np.zeros(rows.shape[0])
    _, exp = np.frexp(peak)
    e_s = exp.astype(np.int64) - 1
    if np.any((peak > 0) & (e_s > EXPONENT_MAX)):
        raise OverflowError("block exponent exceeds the 8-bit shared exponent range")
    e_s = np.maximum(e_s, EXPONENT_MIN)
    shift = (width.frac_bits - e_s).astype(np.int32)
    limit = width.max_mantissa
    m = np.clip(np.rint(np.ldexp(rows, shift[:, None])), -limit, limit).astype(np.int64)
    zse = int(np.count_nonzero((m == 0) & (rows != 0)))
    nonzero = np.any(m != 0, axis=1)
    e_s = np.where(nonzero, e_s, ZERO_EXPONENT)
    return e_s, m, zse


def block_tensor(data, layer_kind, fmt, layout: str = "activation", block_shape=None) -> BfpTensor:
    """Partition ``data`` into blocks for ``layer_kind`` at ``fmt`` and quantize.

    Trailing partial blocks are zero-padded; padding is excluded from
    ``logical_lens`` and from the ZSE denominator.  ``block_shape`` overrides
    the per-layer rule.
    """
    from .layers import LayerKind

    fmt = Format.coerce(fmt)
    if block_shape is None:
        block_shape = block_shape_for(LayerKind.coerce(layer_kind), fmt)
    x = np.asarray(data, dtype=np.float64)
    rows = _to_blocks(x, block_shape, layout)
    valid = _valid_mask(tuple(x.shape), tuple(block_shape), layout)
    e_s, m, zse = _quantize_rows(rows, fmt.width)
    return BfpTensor(
        shape=tuple(x.shape),
        block_shape=tuple(block_shape),
        width=fmt.width,
        layout=layout,
        exponents=e_s,
        mantissas=m,
        valid=valid,
        zse=ZseStats(int(x.size), zse),
    )


def fake_quantize(data, layer_kind, fmt, layout: str = "activation", block_shape=None):
    """Quantize-dequantize in one pass; returns ``(array, ZseStats)``.

    Bit-identical to ``block_tensor(...).dequantize()`` without materializing
    integer mantissas.
    """
    from .layers import LayerKind

    fmt = Format.coerce(fmt)
    width = fmt.width
    if block_shape is None:
        block_shape = block_shape_for(LayerKind.coerce(layer_kind), fmt)
    x = np.asarray(data, dtype=np.float64)
    rows = _to_blocks(x, block_shape, layout)
    if not np.all(np.isfinite(rows)):
        raise ValueError("non-finite value in tensor")
    peak = np.max(np.abs(rows), axis=1)
    _, exp = np.frexp(peak)
    e_s = exp - 1
    if np.any((peak > 0) & (e_s > EXPONENT_MAX)):
        raise OverflowError("block exponent exceeds the 8-bit shared exponent range")
    shift = width.frac_bits - np.maximum(e_s, EXPONENT_MIN)
    scale = np.ldexp(1.0, shift)[:, None]
    limit = float(width.max_mantissa)
    m = np.rint(rows * scale)
    np.clip(m, -limit, limit, out=m)
    zse = int(np.count_nonzero((m == 0) & (rows != 0)))
    m /= scale
    return _unblock(m, x.shape, tuple(block_shape), layout), ZseStats(int(x.size), zse)
