"""Per-lane register fragments and the m16n8k16 lane layout tables."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

WARP = 32
ROLES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class MmaShape:
    m: int = 16
    n: int = 8
    k: int = 16

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0 or self.k % 8:
            raise ValueError(f"bad MMA shape {self}")
        if (self.m, self.n, self.k) != (16, 8, 16):
            raise NotImplementedError("only the 16x8x16 f16 lane layout is implemented")

    def operand_shape(self, role: str) -> tuple[int, int]:
        return {"A": (self.m, self.k), "B": (self.k, self.n),
                "C": (self.m, self.n), "D": (self.m, self.n)}[role]


M16N8K16 = MmaShape()


@lru_cache(maxsize=None)
def layout(role: str) -> tuple[np.ndarray, np.ndarray]:
    """(rows, cols) index tables of shape [32, slots] for an operand role.

    With g = lane // 4 and t = lane % 4:
      A slot i -> (g + 8*((i>>1)&1), 2t + (i&1) + 8*(i>>2))
      B slot i -> (2t + (i&1) + 8*(i>>1), g)
      C/D slot i -> (g + 8*(i>>1), 2t + (i&1))
    """
    lane = np.arange(WARP)[:, None]
    g, t = lane // 4, lane % 4
    if role == "A":
        i = np.arange(8)[None, :]
        rows = g + 8 * ((i >> 1) & 1)
        cols = 2 * t + (i & 1) + 8 * (i >> 2)
    elif role == "B":
        i = np.arange(4)[None, :]
        rows = 2 * t + (i & 1) + 8 * (i >> 1)
        cols = np.broadcast_to(g, (WARP, 4))
    elif role in ("C", "D"):
        i = np.arange(4)[None, :]
        rows = g + 8 * (i >> 1)
        cols = np.broadcast_to(2 * t + (i & 1), (WARP, 4))
    else:
        raise ValueError(f"unknown role {role!r}")
    rows = np.ascontiguousarray(np.broadcast_to(rows, cols.shape))
    cols = np.ascontiguousarray(cols)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


@dataclass(frozen=True)
class Fragment:
    """Register contents of one warp for one MMA operand: values[..., 32, slots].

    Leading axes batch independent tiles. ``dtype`` is a core dtype tag, or
    "exact" for (hi, lo) int64 limb accumulators with a trailing axis of 2.
    """

    role: str
    values: np.ndarray
    dtype: str = "f16"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        v = np.asarray(self.values)
        lane_axis = -3 if self.dtype == "exact" else -2
        if v.ndim < -lane_axis or v.shape[lane_axis] != WARP:
            raise ValueError("fragment values need a 32-lane axis")
        object.__setattr__(self, "values", v)

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-3] if self.dtype == "exact" else self.values.shape[:-2]


def gather_fragment(tile, role: str, shape: MmaShape = M16N8K16, dtype: str | None = None) -> Fragment:
    """Distribute an operand tile (..., rows, cols) over the 32 lanes."""
    tile = np.asarray(tile)
    want = shape.operand_shape(role)
    if tile.shape[-2:] != want:
        raise ValueError(f"role {role} needs a {want} tile, got {tile.shape[-2:]}")
    rows, cols = layout(role)
    if dtype is None:
        dtype = "f32" if tile.dtype == np.float32 else "f16"
    return Fragment(role, tile[..., rows, cols], dtype)


def scatter_fragment(frag: Fragment, shape: MmaShape = M16N8K16) -> np.ndarray:
    """Inverse of :func:`gather_fragment`."""
    rows, cols = layout(frag.role)
    m, n = shape.operand_shape(frag.role)
    v = frag.values
    if frag.dtype == "exact":
        out = np.zeros(frag.batch_shape + (m, n, 2), v.dtype)
        out[..., rows, cols, :] = v
        return out
    if v.shape[-1] != rows.shape[1]:
        raise ValueError(f"role {frag.role} has {rows.shape[1]} slots, got {v.shape[-1]}")
    out = np.zeros(v.shape[:-2] + (m, n), v.dtype)
    out[..., rows, cols] = v
    return out


def lane_slot_of(role: str, row: int, col: int) -> tuple[int, int]:
    """(lane, slot) that holds element (row, col) of an operand tile."""
    rows, cols = layout(role)
    hit = np.argwhere((rows == row) & (cols == col))
    if len(hit) != 1:
        raise ValueError(f"({row}, {col}) is not in the {role} layout")
    return int(hit[0, 0]), int(hit[0, 1])
