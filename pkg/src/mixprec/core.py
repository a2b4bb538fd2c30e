"""Tensor containers, binary16 rounding and the raw tensor file format.

Every "FP16 computation" in this package multiplies and adds in binary32 and
rounds to binary16 only at designated points (dequantized values, outputs).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPES = ("f32", "f16", "i8", "u8", "u4")

_NP_DTYPE = {
    "f32": np.float32,
    "f16": np.float16,
    "i8": np.int8,
    "u8": np.uint8,
    "u4": np.uint8,  # logical codes 0..15, nibble-packed on disk
}

CANONICAL_NAN16 = 0x7E00


class TensorFormatError(ValueError):
    """Raised for malformed tensor files or sidecars."""


def fp16_round(x) -> np.ndarray:
    """Round binary32 values to the nearest binary16, ties to even.

    Overflow saturates to signed infinity, NaN maps to the canonical quiet NaN.
    Accepts scalars or arrays and always returns a float16 ndarray.
    """
    x32 = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x32.astype(np.float16)
    nan = np.isnan(out)
    if nan.any():
        bits = out.view(np.uint16).copy()
        bits[nan] = CANONICAL_NAN16
        out = bits.view(np.float16)
    return out


def f16_ulp(x) -> np.ndarray:
    """Spacing of binary16 values at |x| (subnormal spacing below 2**-14)."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    with np.errstate(divide="ignore"):
        e = np.floor(np.log2(np.where(ax > 0, ax, 2.0**-24)))
    e = np.maximum(e, -14.0)
    return np.exp2(e - 10.0)


def seq_sum_f32(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum in binary32 strictly in ascending index order along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=np.float32), axis, 0)
    acc = np.zeros(x.shape[1:], dtype=np.float32)
    for i in range(x.shape[0]):
        acc = acc + x[i]
    return acc


def exp_f32(x: np.ndarray) -> np.ndarray:
    """Elementwise exp evaluated in binary64 and rounded to binary32."""
    return np.exp(np.asarray(x, dtype=np.float64)).astype(np.float32)


# -- exact dot products -------------------------------------------------------
#
# A binary16 x binary16 product is an integer multiple of 2**-48 with magnitude
# below 2**32, so a sum of such products can be carried exactly in two int64
# limbs: value = hi * 2**-8 + lo * 2**-48 with |lo| < 2**40 per term.

_LIMB_SHIFT = 40


def exact_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact binary16 products split into (hi, lo) int64 limbs, last axis of 2."""
    p = np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)
    hi = np.trunc(p * 256.0)
    lo = (p - hi / 256.0) * float(2**48)
    return np.stack([hi.astype(np.int64), lo.astype(np.int64)], axis=-1)


def exact_to_f32(limbs: np.ndarray) -> np.ndarray:
    """Correctly rounded binary32 value of an exact (hi, lo) limb accumulator."""
    hi = limbs[..., 0].astype(np.int64)
    lo = limbs[..., 1].astype(np.int64)
    carry = lo >> _LIMB_SHIFT
    hi = hi + carry
    lo = lo - (carry << _LIMB_SHIFT)
    xh = hi.astype(np.float64) / 256.0
    xl = lo.astype(np.float64) / float(2**48)
    s = xh + xl
    bb = s - xh
    err = (xh - (s - bb)) + (xl - bb)
    # round to odd in binary64, then the final rounding to binary32 is correct
    sbits = s.view(np.int64)
    even = (sbits & 1) == 0
    fix = (err != 0) & even
    if np.any(fix):
        toward = np.where(err > 0, np.inf, -np.inf)
        s = np.where(fix, np.nextafter(s, toward), s)
    return s.astype(np.float32)


def exact_dot_f32(a: np.ndarray, b: np.ndarray, axis: int = -1) -> np.ndarray:
    """sum(a*b) along ``axis`` computed exactly, rounded once to binary32."""
    limbs = exact_products(a, b)
    ax = axis if axis >= 0 else axis - 1
    return exact_to_f32(limbs.sum(axis=ax))


# -- Half ---------------------------------------------------------------------


class Half:
    """A single binary16 value held as its 16-bit pattern."""

    __slots__ = ("bits",)

    def __init__(self, bits: int):
        if not 0 <= bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {bits:#x}")
        self.bits = int(bits)

    @classmethod
    def from_float(cls, x: float) -> "Half":
        return cls(int(fp16_round(x).view(np.uint16)))

    def __float__(self) -> float:
        return float(np.uint16(self.bits).view(np.float16))

    def _binop(self, other, op) -> "Half":
        o = other if isinstance(other, Half) else Half.from_float(other)
        r = op(np.float32(float(self)), np.float32(float(o)))
        return Half.from_float(r)

    def __add__(self, other):
        return self._binop(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._binop(other, lambda a, b: a - b)

    def __mul__(self, other):
        return self._binop(other, lambda a, b: a * b)

    def __eq__(self, other):
        return isinstance(other, Half) and other.bits == self.bits

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return f"Half({float(self)!r}, bits={self.bits:#06x})"


# -- Tensor -------------------------------------------------------------------


@dataclass(frozen=True)
class Tensor:
    """Row-major contiguous tensor. u4 tensors hold one code (0..15) per byte."""

    shape: tuple
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise TensorFormatError(f"unknown dtype tag {self.dtype!r}")
        shape = tuple(int(s) for s in self.shape)
        data = np.ascontiguousarray(self.data, dtype=_NP_DTYPE[self.dtype])
        if data.size != math.prod(shape):
            raise TensorFormatError(
                f"{data.size} elements do not fill shape {list(shape)}"
            )
        data = data.reshape(shape)
        if self.dtype == "u4" and data.size and int(data.max()) > 15:
            raise TensorFormatError("u4 code out of range 0..15")
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr, dtype: str | None = None) -> "Tensor":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = {np.dtype(np.float32): "f32", np.dtype(np.float16): "f16",
                     np.dtype(np.int8): "i8", np.dtype(np.uint8): "u8"}[arr.dtype]
        return cls(arr.shape, dtype, arr)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def nbytes_on_disk(self) -> int:
        if self.dtype == "u4":
            return (self.size + 1) // 2
        return self.size * np.dtype(_NP_DTYPE[self.dtype]).itemsize

    def to_bytes(self) -> bytes:
        flat = self.data.reshape(-1)
        if self.dtype == "u4":
            return pack_nibbles(flat).tobytes()
        return flat.astype(flat.dtype.newbyteorder("<"), copy=False).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, shape, dtype: str) -> "Tensor":
        if dtype not in DTYPES:
            raise TensorFormatError(f"unknown dtype tag {dtype!r}")
        n = math.prod(int(s) for s in shape)
        if dtype == "u4":
            expected = (n + 1) // 2
        else:
            expected = n * np.dtype(_NP_DTYPE[dtype]).itemsize
        if len(raw) != expected:
            raise TensorFormatError(
                f"length mismatch: shape {list(shape)} {dtype} needs "
                f"{expected} bytes, got {len(raw)}"
            )
        if dtype == "u4":
            data = unpack_nibbles(np.frombuffer(raw, dtype=np.uint8), n)
        else:
            data = np.frombuffer(raw, dtype=np.dtype(_NP_DTYPE[dtype]).newbyteorder("<"))
            data = data.astype(_NP_DTYPE[dtype])
        return cls(tuple(shape), dtype, data)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Two codes per byte, low nibble first; an odd tail leaves the high nibble 0."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(raw: np.ndarray, count: int) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.uint8)
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0xF
    out[1::2] = raw >> 4
    return out[:count]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def tensor_io_write(t: Tensor, path) -> dict:
    """Write ``t`` as raw little-endian bytes plus a JSON sidecar; return the sidecar."""
    path = Path(path)
    path.write_bytes(t.to_bytes())
    meta = {"shape": list(t.shape), "dtype": t.dtype}
    sidecar_path(path).write_text(json.dumps(meta))
    return meta


def tensor_io_read(path, sidecar=None) -> Tensor:
    path = Path(path)
    if sidecar is None:
        sidecar = sidecar_path(path)
    if isinstance(sidecar, dict):
        meta = sidecar
    else:
        try:
            meta = json.loads(Path(sidecar).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise TensorFormatError(f"bad sidecar for {path}: {exc}") from exc
    if "shape" not in meta or "dtype" not in meta:
        raise TensorFormatError("sidecar needs 'shape' and 'dtype'")
    return Tensor.from_bytes(path.read_bytes(), meta["shape"], meta["dtype"])
