"""Uniform affine quantization: calibration, quantize/dequantize, bit packing,
range tracking, and the straight-through gradient rule.

Conventions fixed here and relied on everywhere else:

* rounding ties away from zero (``round_half_away``), so every derived
  example value is deterministic;
* unsigned tensors use asymmetric affine parameters, signed tensors use
  symmetric parameters (zero_point = 0);
* degenerate calibration ranges fall back to scale 1 so integral inputs
  round-trip exactly;
* packed code storage is unsigned: signed codes are offset by ``-q_min``
  before packing.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError

PACKABLE_BITS = (4, 8)
#: bit-widths accepted by QuantParams; >8 bits are fake-quant only (no packing)
SUPPORTED_BITS = (4, 8, 16, 32)

_MAGIC = b"LQT1"


def qrange(bits: int, signed: bool) -> tuple[int, int]:
    """Integer code bounds for a bit-width and signedness."""
    if bits not in SUPPORTED_BITS:
        raise InputError(f"unsupported bit-width {bits}")
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    signed: bool
    q_min: int
    q_max: int

    def __post_init__(self):
        lo, hi = qrange(self.bits, self.signed)
        if (self.q_min, self.q_max) != (lo, hi):
            raise InputError(f"q_min/q_max {self.q_min}/{self.q_max} do not match "
                             f"b={self.bits} signed={self.signed}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise InputError(f"scale must be positive and finite, got {self.scale}")
        if not self.signed and not (lo <= self.zero_point <= hi):
            raise InputError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")


def make_params(scale: float, zero_point: int, bits: int, signed: bool) -> QuantParams:
    lo, hi = qrange(bits, signed)
    return QuantParams(float(scale), int(zero_point), int(bits), bool(signed), lo, hi)


@dataclass(frozen=True)
class QuantizedTensor:
    """Bit-packed integer codes plus the parameters that produced them."""

    data: bytes
    shape: tuple[int, ...]
    params: QuantParams

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest-integer rounding with ties away from zero."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def calibrate(values, bits: int, signed: bool, clip_percentile: float | None = None) -> QuantParams:
    """Derive scale/zero-point from observed values.

    ``clip_percentile`` (in (0, 1]) takes the range endpoints at that
    quantile instead of the true min/max; 1.0 or None means no clipping.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("calibrate: empty input")
    if not np.all(np.isfinite(v)):
        raise InputError("calibrate: non-finite values present")
    if clip_percentile is not None and not (0.0 < clip_percentile <= 1.0):
        raise InputError(f"clip_percentile must be in (0, 1], got {clip_percentile}")
    if clip_percentile is None or clip_percentile >= 1.0:
        x_min, x_max = float(v.min()), float(v.max())
    else:
        x_min = float(np.quantile(v, 1.0 - clip_percentile))
        x_max = float(np.quantile(v, clip_percentile))
    return params_from_range(x_min, x_max, bits, signed)


def params_from_range(x_min: float, x_max: float, bits: int, signed: bool) -> QuantParams:
    """Affine parameters covering [x_min, x_max] (symmetric when signed)."""
    lo, hi = qrange(bits, signed)
    if signed:
        m = max(abs(x_min), abs(x_max))
        scale = m / hi if m > 0 else 1.0
        return make_params(scale, 0, bits, signed)
    if x_max <= x_min:
        # degenerate range: scale 1 keeps DQ(Q(x)) == x for integral x
        zp = int(np.clip(round_half_away(-x_min), lo, hi))
        return make_params(1.0, zp, bits, signed)
    scale = (x_max - x_min) / (hi - lo)
    zp = int(np.clip(round_half_away(-x_min / scale), lo, hi))
    return make_params(scale, zp, bits, signed)


def quantize_codes(x, p: QuantParams) -> np.ndarray:
    """Integer codes for ``x`` without packing (int64, shape preserved)."""
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / p.scale) + p.zero_point
    return np.clip(q, p.q_min, p.q_max).astype(np.int64)


def dequantize_codes(codes, p: QuantParams) -> np.ndarray:
    return p.scale * (np.asarray(codes, dtype=np.float64) - p.zero_point)


def quantize(x, p: QuantParams) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    codes = quantize_codes(x, p)
    packed = pack_codes((codes - p.q_min).ravel(), p.bits)
    return QuantizedTensor(packed, tuple(x.shape), p)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = tensor_codes(q)
    return dequantize_codes(codes, q.params)


def tensor_codes(q: QuantizedTensor) -> np.ndarray:
    """Unpacked integer codes of a QuantizedTensor, shape restored."""
    raw = unpack_codes(q.data, q.params.bits, q.size)
    return (raw.astype(np.int64) + q.params.q_min).reshape(q.shape)


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    """DQ(Q(x)) in one step; the value seen by a fake-quantized forward pass."""
    return dequantize_codes(quantize_codes(x, p), p)


def pack_codes(codes, bits: int) -> bytes:
    """Pack unsigned codes: 8-bit one per byte; 4-bit two per byte with the
    even index in the low nibble (odd lengths pad the final high nibble with 0)."""
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > (1 << bits) - 1):
        raise InputError(f"code out of range for b={bits}")
    c = c.astype(np.uint8).ravel()
    if bits == 8:
        return c.tobytes()
    if bits == 4:
        if c.size % 2:
            c = np.concatenate([c, np.zeros(1, dtype=np.uint8)])
        return ((c[1::2] << 4) | c[0::2]).tobytes()
    raise InputError(f"packing supports b in {PACKABLE_BITS}, got {bits}")


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes; returns ``count`` unsigned codes (uint8)."""
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        if raw.size < count:
            raise InputError("packed buffer too short")
        return raw[:count].copy()
    if bits == 4:
        if raw.size * 2 < count:
            raise InputError("packed buffer too short")
        out = np.empty(raw.size * 2, dtype=np.uint8)
        out[0::2] = raw & 0x0F
        out[1::2] = raw >> 4
        return out[:count].copy()
    raise InputError(f"packing supports b in {PACKABLE_BITS}, got {bits}")


def ste_mask(x, p: QuantParams) -> np.ndarray:
    """1 where x falls inside the representable range before clipping, else 0."""
    t = np.asarray(x, dtype=np.float64) / p.scale + p.zero_point
    return ((t >= p.q_min) & (t <= p.q_max)).astype(np.float64)


def ste_backward(grad_out, x, p: QuantParams) -> np.ndarray:
    """Clipped straight-through gradient of DQ(Q(x)) with respect to x."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != np.shape(x):
        raise InputError("ste_backward: shape mismatch")
    return grad_out * ste_mask(x, p)


@dataclass(frozen=True)
class RangeTracker:
    """EMA min/max range observer used for QAT calibration."""

    running_min: float | None = None
    running_max: float | None = None
    momentum: float = 0.1
    clip_percentile: float | None = None

    def __post_init__(self):
        if not (0.0 < self.momentum <= 1.0):
            raise InputError(f"momentum must be in (0, 1], got {self.momentum}")


def track_range(t: RangeTracker, values) -> RangeTracker:
    """Fold one batch into the tracker; returns the updated tracker."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return t
    cp = t.clip_percentile
    if cp is None or cp >= 1.0:
        b_min, b_max = float(v.min()), float(v.max())
    else:
        b_min = float(np.quantile(v, 1.0 - cp))
        b_max = float(np.quantile(v, cp))
    if t.running_min is None:
        return replace(t, running_min=b_min, running_max=b_max)
    m = t.momentum
    return replace(t,
                   running_min=(1.0 - m) * t.running_min + m * b_min,
                   running_max=(1.0 - m) * t.running_max + m * b_max)


def tracker_params(t: RangeTracker, bits: int, signed: bool) -> QuantParams:
    if t.running_min is None:
        raise InputError("tracker has not observed any values")
    return params_from_range(t.running_min, t.running_max, bits, signed)


def save_tensor(q: QuantizedTensor, fh) -> None:
    """Serialize: magic 'LQT1', u8 bits, u8 signed, f32 scale, i32 zero_point,
    u32 ndim, u64 dims..., packed code bytes."""
    fh.write(_MAGIC)
    fh.write(struct.pack("<BBfiI", q.params.bits, int(q.params.signed),
                         q.params.scale, q.params.zero_point, len(q.shape)))
    for dim in q.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(q.data)


def load_tensor(fh) -> QuantizedTensor:
    if fh.read(4) != _MAGIC:
        raise InputError("bad magic; not an LQT1 stream")
    bits, signed, scale, zp, ndim = struct.unpack("<BBfiI", fh.read(14))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    params = make_params(scale, zp, bits, bool(signed))
    count = int(np.prod(shape)) if shape else 1
    nbytes = count if bits == 8 else (count + 1) // 2
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise InputError("truncated LQT1 stream")
    return QuantizedTensor(data, shape, params)


def dumps(q: QuantizedTensor) -> bytes:
    buf = io.BytesIO()
    save_tensor(q, buf)
    return buf.getvalue()


def loads(data: bytes) -> QuantizedTensor:
    return load_tensor(io.BytesIO(data))
