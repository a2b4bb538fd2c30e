"""Online mixed-precision GEMM: packed fragment loads, in-register I2F, MMA.

Activations A are (M, K) f16, weights are :class:`PackedWeights` for (K, N).
Each k-tile of 16 is one mainloop step: the warp's packed words for every
n-tile are decoded to codes by I2F, the group scale and zero point are
applied per lane (no cross-lane movement), and the resulting f16 B fragments
feed a batched MMA over all output tiles. Accumulation is binary32 in
ascending k, so the result matches :func:`reference_gemm` bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, fp16_round
from .fragment import Fragment, gather_fragment, scatter_fragment
from .mma import tile_matmul_f32
from .packer import (ArchProfile, PackedWeights, PackError, b_fragment_slots, get_arch,
                     i2f_decode, permutation_id, unpack_weights)
from .quant import dequantize
from .sched import PipelineSchedule, gemm_schedule

__all__ = ["GemmProblem", "reference_gemm", "mixed_gemm", "dequant_fragment",
           "dequantized_weights", "ArchMismatch", "ExtentMismatch"]

K_TILE = 16


class ArchMismatch(PackError):
    pass


class ExtentMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GemmProblem:
    a: Tensor
    w: PackedWeights

    def __post_init__(self):
        a = self.a if isinstance(self.a, Tensor) else Tensor.from_array(np.asarray(self.a, np.float16), "f16")
        if a.dtype != "f16" or len(a.shape) != 2:
            raise ExtentMismatch("activations must be a 2-D f16 tensor")
        if a.shape[1] != self.w.rows:
            raise ExtentMismatch(f"activation K={a.shape[1]} but weights have K={self.w.rows}")
        if not np.all(np.isfinite(a.data)):
            raise ValueError("activations must be finite")
        object.__setattr__(self, "a", a)

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.w.cols

    @property
    def k(self) -> int:
        return self.w.rows


def _as_f16(x) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.dtype != "f16":
            raise ExtentMismatch(f"expected f16 tensor, got {x.dtype}")
        return x.data
    return np.asarray(x, dtype=np.float16)


def reference_gemm(a, w_deq) -> Tensor:
    """Oracle: binary32 accumulation in ascending k, one f16 rounding at the end."""
    a, w = _as_f16(a), _as_f16(w_deq)
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise ExtentMismatch(f"cannot multiply {a.shape} by {w.shape}")
    acc = tile_matmul_f32(a, w, np.zeros((a.shape[0], w.shape[1]), np.float32))
    return Tensor.from_array(fp16_round(acc), "f16")


def dequantized_weights(w: PackedWeights) -> Tensor:
    """dequantize(unpack(w)), the weight operand of the oracle path."""
    return dequantize(unpack_weights(w))


def dequant_fragment(words: Fragment, scale: Fragment | None, zp: Fragment | None,
                     bits: int, perm_id: int, bias: int = 0) -> Fragment:
    """I2F on each lane's packed words, then (code - zp) * scale rounded to f16.

    ``words`` holds (..., 32, words) packed words in the step-iii order, and
    ``scale``/``zp`` hold the matching per-lane (..., 32, 8) values. The result
    is (..., 32, 8): two B fragments side by side (n-block 0 then n-block 1).
    """
    if perm_id != permutation_id(bits):
        raise PackError(f"permutation id {perm_id:#x} does not match the {bits}-bit decoder")
    codes = i2f_decode(words.values, bits, bias)
    if bits == 16:
        return Fragment("B", codes.astype(np.float16), "f16")
    if zp is not None:
        codes = codes - zp.values.astype(np.float32)
    return Fragment("B", fp16_round(codes * scale.values.astype(np.float32)), "f16")


def _scale_fragments(table: np.ndarray, group: int, kt: int, dtype) -> np.ndarray:
    """Per-lane (n tiles, 32, 8) view of a (K/group, N) table for k-tile ``kt``."""
    rows = (kt * K_TILE + np.arange(K_TILE)) // group
    tile = table[rows]                                     # 16 k, N
    nt = tile.shape[1] // 16
    tiles = tile.reshape(K_TILE, nt, 16).transpose(1, 0, 2)  # nt, k, n
    return b_fragment_slots(tiles).astype(dtype)


def mixed_gemm(p: GemmProblem, arch: ArchProfile | None = None,
               depth: int = 3) -> tuple[Tensor, PipelineSchedule]:
    """Run the online path; returns (M, N) f16 output and the mainloop schedule."""
    w = p.w
    arch = arch or get_arch()
    if arch.arch_id != w.arch_id:
        raise ArchMismatch(f"weights packed for arch {w.arch_id}, active profile is {arch.name}")
    kp, np_ = w.padded_shape
    mp = -(-p.m // 16) * 16
    a = np.zeros((mp, kp), np.float16)
    a[: p.m, : p.k] = p.a.data
    mt, nt = mp // 16, np_ // 16
    k_tiles = kp // K_TILE
    f = w.frags
    lane_words = w.lane_words()                            # ku nt f 32 nw

    acc = np.zeros((mt, 2 * nt, 16, 8), np.float32)
    for kt in range(k_tiles):
        a_frag = gather_fragment(a[:, kt * 16:(kt + 1) * 16].reshape(mt, 16, 16), "A")
        words = Fragment("B", lane_words[kt // f, :, kt % f], "u32")
        if w.bits == 16:
            scale = zp = None
        else:
            scale = Fragment("B", _scale_fragments(w.scales, w.group_size, kt, np.float16), "f16")
            zp = (None if w.zero_points is None else
                  Fragment("B", _scale_fragments(w.zero_points, w.group_size, kt, np.uint8), "u8"))
        b = dequant_fragment(words, scale, zp, w.bits, w.permutation_id, w.bias)
        b_frag = Fragment("B", b.values.reshape(nt, 32, 2, 4).transpose(0, 2, 1, 3).reshape(2 * nt, 32, 4))
        # all output tiles at once: (mt, 1, 16, 16) x (1, 2nt, 16, 8)
        ta = scatter_fragment(a_frag)[:, None]
        tb = scatter_fragment(b_frag)[None]
        acc = tile_matmul_f32(ta, tb, acc)
    out = fp16_round(acc).reshape(mt, 2 * nt, 16, 8).transpose(0, 2, 1, 3).reshape(mp, np_)
    return Tensor.from_array(out[: p.m, : p.n], "f16"), gemm_schedule(k_tiles, depth)
