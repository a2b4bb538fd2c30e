"""Group quantization, the I2F dequantize contract, and the quantized KV cache."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Tensor, fp16_round, tensor_io_read, tensor_io_write

EPS_SCALE = 2.0**-14
MACRO_TILE_TOKENS = 64


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Precision configuration W{weight_bits}A{act_bits}KV{kv_bits}."""

    weight_bits: int = 4
    act_bits: int = 16
    kv_bits: int = 16
    group_size: int = 128
    zero_point: bool = True

    def __post_init__(self):
        if self.weight_bits not in (4, 8, 16):
            raise QuantError(f"weight_bits must be 4, 8 or 16, got {self.weight_bits}")
        if self.act_bits != 16:
            raise QuantError("only 16-bit activations are supported")
        if self.kv_bits not in (4, 8, 16):
            raise QuantError(f"kv_bits must be 4, 8 or 16, got {self.kv_bits}")
        if self.group_size <= 0:
            raise QuantError("group_size must be positive")

    @property
    def label(self) -> str:
        return f"W{self.weight_bits}A{self.act_bits}KV{self.kv_bits}"


def code_dtype(bits: int, zero_point: bool) -> str:
    if bits == 16:
        return "f16"
    if bits == 4:
        return "u4" if zero_point else "i8"
    return "u8" if zero_point else "i8"


def code_range(bits: int, zero_point: bool) -> tuple[int, int]:
    if zero_point:
        return 0, 2**bits - 1
    q = 2 ** (bits - 1) - 1
    return -q, q


@dataclass(frozen=True)
class QuantizedTensor:
    """Codes plus one f16 scale (and optional u8 zero point) per group along ``axis``.

    ``codes`` may be larger than ``logical_shape`` when padded for packing; the
    padding carries zero-point codes so it dequantizes to exact zeros.
    """

    codes: Tensor
    scales: Tensor | None
    zero_points: Tensor | None
    bits: int
    group_size: int
    axis: int = -1
    logical_shape: tuple = field(default=())

    def __post_init__(self):
        ax = self.axis % len(self.codes.shape)
        object.__setattr__(self, "axis", ax)
        if not self.logical_shape:
            object.__setattr__(self, "logical_shape", self.codes.shape)
        if self.bits == 16:
            return
        lo, hi = code_range(self.bits, self.zero_points is not None)
        c = self.codes.data
        if c.size and (int(c.min()) < lo or int(c.max()) > hi):
            raise QuantError(f"codes outside {lo}..{hi}")
        s = self.scales.data.astype(np.float32)
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise QuantError("scales must be finite and positive")
        if s.shape[ax] != self.n_groups:
            raise QuantError(f"expected {self.n_groups} groups, scales have {s.shape[ax]}")

    @property
    def zero_point(self) -> bool:
        return self.zero_points is not None

    @property
    def n_groups(self) -> int:
        return math.ceil(self.codes.shape[self.axis] / self.group_size)

    def expanded(self, arr: np.ndarray) -> np.ndarray:
        """Broadcast a per-group array along the grouped axis to the code shape."""
        ext = self.codes.shape[self.axis]
        return np.repeat(arr, self.group_size, axis=self.axis).take(
            np.arange(ext), axis=self.axis
        )


def _group_view(v: np.ndarray, axis: int, group_size: int) -> np.ndarray:
    """Move ``axis`` last, zero-pad to a whole number of groups, split it."""
    v = np.moveaxis(v, axis, -1)
    ext = v.shape[-1]
    ng = math.ceil(ext / group_size)
    pad = ng * group_size - ext
    if pad:
        v = np.concatenate([v, np.zeros(v.shape[:-1] + (pad,), v.dtype)], axis=-1)
    return v.reshape(v.shape[:-1] + (ng, group_size))


def _scale_f16(exact: np.ndarray, needed) -> np.ndarray:
    """Nearest binary16 scale, bumped up one step for groups where it falls below
    the exact ratio and ``needed(scale)`` reports that codes would clip."""
    s16 = fp16_round(exact.astype(np.float32))
    low = (s16.astype(np.float64) < exact) & needed(s16.astype(np.float64))
    if low.any():
        s16 = s16.copy()
        s16[low] = np.nextafter(s16[low], np.float16(np.inf))
    return s16


def quantize(values, bits: int, group_size: int = 128, zero_point: bool = True,
             axis: int = -1) -> QuantizedTensor:
    """Min/max group quantization along ``axis``.

    Asymmetric: the group range is widened to include 0, scale =
    max(range / (2**bits - 1), 2**-14) rounded to f16 (one step up when the
    nearest value would clip the group's extreme codes), zp =
    round(-min / scale), code = round(v / scale) + zp. Symmetric: scale =
    max|v| / (2**(bits-1) - 1), signed codes, no zero point. Rounding is
    half-to-even throughout.
    """
    if bits == 16:
        v = fp16_round(values)
        return QuantizedTensor(Tensor.from_array(v, "f16"), None, None, 16, group_size, axis)
    if bits not in (4, 8):
        raise QuantError(f"bits must be 4 or 8, got {bits}")
    v = np.asarray(values)
    if not np.all(np.isfinite(v.astype(np.float64))):
        raise QuantError("non-finite input")
    v = fp16_round(v).astype(np.float64)
    axis = axis % v.ndim
    g = _group_view(v, axis, group_size)
    qmin, qmax = code_range(bits, zero_point)

    if zero_point:
        lo = np.minimum(g.min(axis=-1), 0.0)
        hi = np.maximum(g.max(axis=-1), 0.0)
        scale = _scale_f16(np.maximum((hi - lo) / qmax, EPS_SCALE),
                           lambda s: np.rint(hi / s) + np.rint(-lo / s) > qmax)
        s = scale.astype(np.float64)
        zp = np.clip(np.rint(-lo / s), qmin, qmax)
        codes = np.clip(np.rint(g / s[..., None]) + zp[..., None], qmin, qmax)
    else:
        amax = np.abs(g).max(axis=-1)
        scale = _scale_f16(np.maximum(amax / qmax, EPS_SCALE),
                           lambda s: np.rint(amax / s) > qmax)
        s = scale.astype(np.float64)
        zp = None
        codes = np.clip(np.rint(g / s[..., None]), qmin, qmax)

    ext = v.shape[axis]
    codes = codes.reshape(codes.shape[:-2] + (-1,))[..., :ext]
    codes = np.moveaxis(codes, -1, axis)
    scales = np.moveaxis(scale, -1, axis)
    dt = code_dtype(bits, zero_point)
    codes_t = Tensor(codes.shape, dt, codes.astype(np.int64))
    zp_t = None if zp is None else Tensor.from_array(np.moveaxis(zp, -1, axis).astype(np.uint8), "u8")
    return QuantizedTensor(codes_t, Tensor.from_array(scales, "f16"), zp_t, bits,
                           group_size, axis, tuple(v.shape))


def quantize_group(values, bits: int, group_size: int, zero_point: bool = True) -> QuantizedTensor:
    """Quantize a 1-D f16 vector in contiguous groups of ``group_size``."""
    v = np.asarray(values)
    if v.ndim != 1:
        raise QuantError("quantize_group expects a vector")
    return quantize(v, bits, group_size, zero_point, axis=0)


def dequant_values(codes, scales, zero_points=None) -> np.ndarray:
    """fp16_round((code - zp) * scale), computed in binary32 (the product is exact)."""
    c = np.asarray(codes, dtype=np.float32)
    if zero_points is not None:
        c = c - np.asarray(zero_points, dtype=np.float32)
    return fp16_round(c * np.asarray(scales, dtype=np.float32))


def dequantize(q: QuantizedTensor) -> Tensor:
    if q.bits == 16:
        return Tensor(q.codes.shape, "f16", q.codes.data)
    s = q.expanded(q.scales.data)
    zp = None if q.zero_points is None else q.expanded(q.zero_points.data)
    return Tensor.from_array(dequant_values(q.codes.data, s, zp), "f16")


def crop(q: QuantizedTensor, shape) -> QuantizedTensor:
    """Drop padding back to ``shape`` (groups along the axis are kept whole)."""
    shape = tuple(shape)
    sl = tuple(slice(0, n) for n in shape)
    codes = Tensor(shape, q.codes.dtype, q.codes.data[sl])
    if q.bits == 16:
        return replace(q, codes=codes, logical_shape=shape)
    ng = math.ceil(shape[q.axis] / q.group_size)
    gsl = list(sl)
    gsl[q.axis] = slice(0, ng)
    gsl = tuple(gsl)
    scales = Tensor.from_array(q.scales.data[gsl], "f16")
    zps = None if q.zero_points is None else Tensor.from_array(q.zero_points.data[gsl], "u8")
    return QuantizedTensor(codes, scales, zps, q.bits, q.group_size, q.axis, shape)


def quantized_equal(a: QuantizedTensor, b: QuantizedTensor) -> bool:
    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.shape == y.shape and np.array_equal(
            x.data.view(np.uint16) if x.dtype == "f16" else x.data,
            y.data.view(np.uint16) if y.dtype == "f16" else y.data)

    return (a.bits == b.bits and a.group_size == b.group_size and a.axis == b.axis
            and a.logical_shape == b.logical_shape and same(a.codes, b.codes)
            and same(a.scales, b.scales) and same(a.zero_points, b.zero_points))


def save_quantized(q: QuantizedTensor, path) -> None:
    """Dump codes/scales/zero points as core tensor files plus a quant sidecar."""
    path = Path(path)
    tensor_io_write(q.codes, path.with_name(path.name + ".codes"))
    meta = {"bits": q.bits, "group_size": q.group_size, "axis": q.axis,
            "logical_shape": list(q.logical_shape), "zero_point": q.zero_point}
    if q.scales is not None:
        tensor_io_write(q.scales, path.with_name(path.name + ".scales"))
    if q.zero_points is not None:
        tensor_io_write(q.zero_points, path.with_name(path.name + ".zp"))
    path.write_text(json.dumps(meta))


def load_quantized(path) -> QuantizedTensor:
    path = Path(path)
    meta = json.loads(path.read_text())
    codes = tensor_io_read(path.with_name(path.name + ".codes"))
    scales = zps = None
    if meta["bits"] != 16:
        scales = tensor_io_read(path.with_name(path.name + ".scales"))
        if meta["zero_point"]:
            zps = tensor_io_read(path.with_name(path.name + ".zp"))
    return QuantizedTensor(codes, scales, zps, meta["bits"], meta["group_size"],
                           meta["axis"], tuple(meta["logical_shape"]))


# -- KV cache -----------------------------------------------------------------


@dataclass(frozen=True)
class KvCache:
    """Append-only quantized K/V for one layer.

    Arrays are laid out (heads, capacity, head_dim) for codes and
    (heads, capacity, head_dim // group) for scales and zero points, i.e. one
    scale per (head, token, channel group). kv_bits=16 stores f16 values.
    """

    heads: int
    head_dim: int
    capacity: int
    kv_bits: int
    group_size: int
    zero_point: bool
    tokens: int
    k_codes: np.ndarray
    v_codes: np.ndarray
    k_scales: np.ndarray | None
    v_scales: np.ndarray | None
    k_zp: np.ndarray | None
    v_zp: np.ndarray | None

    @classmethod
    def empty(cls, heads: int, head_dim: int, capacity: int, spec: QuantSpec) -> "KvCache":
        if head_dim % 8:
            raise QuantError("head_dim must be a multiple of 8")
        group = min(spec.group_size, head_dim)
        if head_dim % group:
            raise QuantError("KV group size must divide head_dim")
        bits = spec.kv_bits
        if bits == 16:
            codes = lambda: np.zeros((heads, capacity, head_dim), np.float16)
            return cls(heads, head_dim, capacity, 16, group, False, 0,
                       codes(), codes(), None, None, None, None)
        ng = head_dim // group
        codes = lambda: np.zeros((heads, capacity, head_dim), np.int16)
        sc = lambda: np.ones((heads, capacity, ng), np.float16)
        zp = (lambda: np.zeros((heads, capacity, ng), np.uint8)) if spec.zero_point else (lambda: None)
        return cls(heads, head_dim, capacity, bits, group, spec.zero_point, 0,
                   codes(), codes(), sc(), sc(), zp(), zp())

    @property
    def n_macro_tiles(self) -> int:
        return math.ceil(self.tokens / MACRO_TILE_TOKENS)

    def macro_tile(self, i: int) -> slice:
        """Token range of macro-tile ``i`` (the last one may be partial)."""
        if not 0 <= i < self.n_macro_tiles:
            raise IndexError(f"macro-tile {i} out of range")
        start = i * MACRO_TILE_TOKENS
        return slice(start, min(start + MACRO_TILE_TOKENS, self.tokens))

    def dequantized(self, which: str) -> np.ndarray:
        """f16 (heads, tokens, head_dim) view of K or V through the dequantize contract."""
        n = self.tokens
        codes = (self.k_codes if which == "k" else self.v_codes)[:, :n]
        if self.kv_bits == 16:
            return codes.copy()
        scales = (self.k_scales if which == "k" else self.v_scales)[:, :n]
        zps = (self.k_zp if which == "k" else self.v_zp)
        zps = None if zps is None else np.repeat(zps[:, :n], self.group_size, axis=-1)
        return dequant_values(codes, np.repeat(scales, self.group_size, axis=-1), zps)


def quantize_kv(k_new, v_new, cache: KvCache) -> KvCache:
    """Append token rows (heads, t, head_dim) and return the new cache state."""
    k_new = np.asarray(k_new)
    v_new = np.asarray(v_new)
    if k_new.ndim == 2:
        k_new, v_new = k_new[:, None], v_new[:, None]
    if k_new.shape != v_new.shape or k_new.shape[0] != cache.heads or k_new.shape[2] != cache.head_dim:
        raise QuantError(f"rows {k_new.shape} do not match cache heads/head_dim")
    t = k_new.shape[1]
    if cache.tokens + t > cache.capacity:
        raise QuantError(f"capacity overflow: {cache.tokens} + {t} > {cache.capacity}")
    sl = slice(cache.tokens, cache.tokens + t)
    fields = {}
    for name, rows in (("k", k_new), ("v", v_new)):
        codes = getattr(cache, f"{name}_codes").copy()
        if cache.kv_bits == 16:
            codes[:, sl] = fp16_round(rows)
            fields[f"{name}_codes"] = codes
            continue
        q = quantize(rows, cache.kv_bits, cache.group_size, cache.zero_point, axis=-1)
        codes[:, sl] = q.codes.data
        scales = getattr(cache, f"{name}_scales").copy()
        scales[:, sl] = q.scales.data
        fields[f"{name}_codes"] = codes
        fields[f"{name}_scales"] = scales
        if cache.zero_point:
            zp = getattr(cache, f"{name}_zp").copy()
            zp[:, sl] = q.zero_points.data
            fields[f"{name}_zp"] = zp
    return replace(cache, tokens=cache.tokens + t, **fields)


def save_kv_cache(cache: KvCache, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = cache.tokens
    meta = {"heads": cache.heads, "head_dim": cache.head_dim, "capacity": cache.capacity,
            "kv_bits": cache.kv_bits, "group_size": cache.group_size,
            "zero_point": cache.zero_point, "tokens": n}
    for name in ("k", "v"):
        codes = getattr(cache, f"{name}_codes")[:, :n]
        if cache.kv_bits == 16:
            tensor_io_write(Tensor.from_array(codes, "f16"), d / f"{name}.codes")
            continue
        dt = code_dtype(cache.kv_bits, cache.zero_point)
        tensor_io_write(Tensor(codes.shape, dt, codes), d / f"{name}.codes")
        tensor_io_write(Tensor.from_array(getattr(cache, f"{name}_scales")[:, :n], "f16"),
                        d / f"{name}.scales")
        if cache.zero_point:
            tensor_io_write(Tensor.from_array(getattr(cache, f"{name}_zp")[:, :n], "u8"),
                            d / f"{name}.zp")
    (d / "kv.json").write_text(json.dumps(meta))


def load_kv_cache(directory) -> KvCache:
    d = Path(directory)
    meta = json.loads((d / "kv.json").read_text())
    spec = QuantSpec(weight_bits=16, kv_bits=meta["kv_bits"], group_size=meta["group_size"],
                     zero_point=meta["zero_point"])
    cache = KvCache.empty(meta["heads"], meta["head_dim"], meta["capacity"], spec)
    n = meta["tokens"]
    fields = {"tokens": n}
    for name in ("k", "v"):
        codes = getattr(cache, f"{name}_codes").copy()
        codes[:, :n] = tensor_io_read(d / f"{name}.codes").data
        fields[f"{name}_codes"] = codes
        if cache.kv_bits == 16:
            continue
        scales = getattr(cache, f"{name}_scales").copy()
        scales[:, :n] = tensor_io_read(d / f"{name}.scales").data
        fields[f"{name}_scales"] = scales
        if cache.zero_point:
            zp = getattr(cache, f"{name}_zp").copy()
            zp[:, :n] = tensor_io_read(d / f"{name}.zp").data
            fields[f"{name}_zp"] = zp
    return replace(cache, **fields)
