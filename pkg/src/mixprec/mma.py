"""Bit-exact tensor-core MMA emulation on warp fragments."""
from __future__ import annotations

import numpy as np

from .core import exact_products
from .fragment import (M16N8K16, Fragment, MmaShape, gather_fragment, lane_slot_of,
                       layout, scatter_fragment)

__all__ = [
    "MmaShape", "Fragment", "gather_fragment", "scatter_fragment", "lane_slot_of",
    "layout", "mma_emulate", "mma_emulate_exact", "tile_matmul_f32", "zero_accumulator",
]


class LayoutMismatch(ValueError):
    pass


def tile_matmul_f32(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """c + a @ b with one binary32 multiply and add per term, ascending k."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    d = np.array(c, dtype=np.float32, copy=True)
    for kk in range(a.shape[-1]):
        d = d + a[..., :, kk, None] * b[..., None, kk, :]
    return d


def _check(a: Fragment, b: Fragment, c: Fragment):
    if (a.role, b.role) != ("A", "B") or c.role not in ("C", "D"):
        raise LayoutMismatch(f"operand roles {a.role}/{b.role}/{c.role} are not A/B/C")
    for f, slots in ((a, 8), (b, 4)):
        if f.values.shape[-1] != slots:
            raise LayoutMismatch(f"role {f.role} fragment must have {slots} slots")


def mma_emulate(a: Fragment, b: Fragment, c: Fragment, shape: MmaShape = M16N8K16) -> Fragment:
    """D = A.B + C, binary32 accumulation in ascending k.

    A and B are normally f16 (their products are exact in binary32); an f32 A
    operand is accepted for the P.V step of attention, where each product is
    rounded to binary32 before it is added.
    """
    _check(a, b, c)
    if c.values.shape[-1] != 4:
        raise LayoutMismatch("C fragment must have 4 slots")
    ta = scatter_fragment(a, shape)
    tb = scatter_fragment(b, shape)
    tc = scatter_fragment(Fragment("C", c.values, c.dtype), shape)
    d = tile_matmul_f32(ta, tb, tc)
    return gather_fragment(d, "D", shape, "f32")


def zero_accumulator(batch_shape=(), exact: bool = False) -> Fragment:
    if exact:
        return Fragment("C", np.zeros(tuple(batch_shape) + (32, 4, 2), np.int64), "exact")
    return Fragment("C", np.zeros(tuple(batch_shape) + (32, 4), np.float32), "f32")


def mma_emulate_exact(a: Fragment, b: Fragment, c: Fragment, shape: MmaShape = M16N8K16) -> Fragment:
    """D = A.B + C carried exactly in (hi, lo) limbs; round with core.exact_to_f32.

    Used where the accumulation order over k differs from the oracle's
    (rearranged attention fragments), so only a single final rounding is
    order-independent.
    """
    _check(a, b, c)
    if c.dtype != "exact":
        raise LayoutMismatch("exact MMA needs an exact accumulator")
    ta = scatter_fragment(a, shape)
    tb = scatter_fragment(b, shape)
    prods = exact_products(ta[..., :, :, None], tb[..., None, :, :])  # m, k, n, 2
    tc = scatter_fragment(c, shape)
    d = tc + prods.sum(axis=-3)
    rows, cols = layout("D")
    return Fragment("D", d[..., rows, cols, :], "exact")
