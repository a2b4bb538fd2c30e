"""Warp-level memory pattern model: coalescing, bank conflicts, ldmatrix, swizzle.

Only access *patterns* are modeled here; cycle costs live in :mod:`mixprec.sched`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WARP = 32


@dataclass(frozen=True)
class MemConfig:
    warp_size: int = 32
    bank_count: int = 32
    bank_width: int = 4
    segment_size: int = 128
    vector_widths: tuple = (4, 8, 16)

    def __post_init__(self):
        if self.warp_size != 32:
            raise ValueError("warp_size is fixed at 32")
        if min(self.bank_count, self.bank_width, self.segment_size) <= 0:
            raise ValueError("MemConfig extents must be positive")


DEFAULT_CONFIG = MemConfig()


@dataclass(frozen=True)
class AccessTrace:
    """One warp-wide memory instruction: a start address per lane and a common width."""

    addrs: tuple
    width: int = 4
    mask: tuple | None = None

    def __post_init__(self):
        addrs = tuple(int(a) for a in np.asarray(self.addrs).reshape(-1))
        if any(a < 0 for a in addrs):
            raise ValueError("addresses must be non-negative")
        if len(addrs) > WARP:
            raise ValueError("at most 32 lanes per warp")
        object.__setattr__(self, "addrs", addrs)
        mask = self.mask
        if mask is None:
            mask = (True,) * len(addrs)
        mask = tuple(bool(m) for m in mask)
        if len(mask) != len(addrs):
            raise ValueError("mask length must match lane count")
        object.__setattr__(self, "mask", mask)

    def active(self):
        return [(lane, a) for lane, (a, m) in enumerate(zip(self.addrs, self.mask)) if m]

    def to_dict(self) -> dict:
        return {"addrs": list(self.addrs), "width": self.width, "mask": list(self.mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "AccessTrace":
        return cls(tuple(d["addrs"]), int(d.get("width", 4)), d.get("mask"))


def coalesce_count(t: AccessTrace, cfg: MemConfig = DEFAULT_CONFIG) -> int:
    """Distinct aligned segments touched by the active lanes."""
    seg = cfg.segment_size
    touched = set()
    for _, a in t.active():
        touched.update(range(a // seg, (a + t.width - 1) // seg + 1))
    return len(touched)


def _phases(t: AccessTrace):
    # 8-byte accesses issue per half-warp, 16-byte accesses per quarter-warp
    lanes_per_phase = {16: 8, 8: 16}.get(t.width, WARP)
    for start in range(0, WARP, lanes_per_phase):
        yield [(lane, a) for lane, a in t.active() if start <= lane < start + lanes_per_phase]


def bank_conflict_degree(t: AccessTrace, cfg: MemConfig = DEFAULT_CONFIG) -> int:
    """Worst per-phase count of distinct words mapped to one bank (1 = conflict-free).

    Lanes reading the same word are served by a broadcast and do not conflict.
    """
    bw = cfg.bank_width
    worst = 0
    for phase in _phases(t):
        per_bank: dict[int, set] = {}
        for _, a in phase:
            for word in range(a // bw, (a + max(t.width, 1) - 1) // bw + 1):
                per_bank.setdefault(word % cfg.bank_count, set()).add(word)
        if per_bank:
            worst = max(worst, max(len(w) for w in per_bank.values()))
    return worst


# -- swizzle ------------------------------------------------------------------

CHUNK_BYTES = 16
LINE_BYTES = 128


def swizzle_index(row: int, col_chunk: int, chunks_per_row: int = 8) -> int:
    """Physical 16-byte chunk of ``col_chunk`` in an 8x128-byte swizzle unit."""
    if not 0 <= col_chunk < chunks_per_row:
        raise ValueError(f"chunk {col_chunk} out of range 0..{chunks_per_row - 1}")
    return col_chunk ^ (row % 8)


@dataclass(frozen=True)
class SharedTile:
    """A 2-D array of 16-bit elements placed in a modeled shared-memory region.

    Element (r, c) lives at byte ``r * row_stride + 2 * c`` before swizzling.
    With ``swizzle`` set, ``swizzle_bytes``-sized units inside each 128-byte
    line are XOR-permuted by the row index (16-byte units give the standard
    8x128-byte unit).
    """

    data: np.ndarray
    row_stride: int
    swizzle: bool = False
    swizzle_bytes: int = CHUNK_BYTES
    base: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.itemsize != 2:
            raise ValueError("SharedTile holds 16-bit elements")
        object.__setattr__(self, "data", data)
        if self.row_stride < 2 * self.cols:
            raise ValueError("row stride smaller than the row payload")
        if self.swizzle and (self.row_stride % LINE_BYTES or LINE_BYTES % self.swizzle_bytes):
            raise ValueError("swizzled tiles need 128-byte aligned rows")

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def _permute(self, row, byte_in_row):
        if not self.swizzle:
            return byte_in_row
        units = LINE_BYTES // self.swizzle_bytes
        line, rem = np.divmod(byte_in_row, LINE_BYTES)
        unit, within = np.divmod(rem, self.swizzle_bytes)
        unit = unit ^ (np.asarray(row) % units)
        return line * LINE_BYTES + unit * self.swizzle_bytes + within

    def address(self, row, col):
        """Physical byte address of logical element (row, col)."""
        row = np.asarray(row)
        return self.base + row * self.row_stride + self._permute(row, 2 * np.asarray(col))

    def locate(self, addr):
        """Inverse of :meth:`address` for 2-byte aligned addresses."""
        row, byte = np.divmod(np.asarray(addr) - self.base, self.row_stride)
        byte = self._permute(row, byte)  # XOR permutation is an involution
        return row, byte // 2


class MisalignedAddress(ValueError):
    pass


def ldmatrix_emulate(tile: SharedTile, row_addrs, count: int = 4):
    """Emulate a warp-wide ``ldmatrix.x{count}``.

    Lanes 8m..8m+7 supply the row addresses of 8x8 matrix m. Lane l receives,
    for each matrix, the two elements at row l//4, columns 2*(l%4) and
    2*(l%4)+1. Returns (values[..., 32, 2*count], AccessTrace of the row reads).
    """
    if count not in (1, 2, 4):
        raise ValueError("count must be 1, 2 or 4")
    row_addrs = np.asarray(row_addrs, dtype=np.int64).reshape(-1)
    n = 8 * count
    if row_addrs.size < n:
        raise ValueError(f"need {n} row addresses")
    row_addrs = row_addrs[:n]
    if np.any(row_addrs % 16):
        raise MisalignedAddress("ldmatrix row addresses must be 16-byte aligned")
    lane = np.arange(WARP)
    # element addresses: [lane, matrix, pair]
    src = row_addrs[8 * np.arange(count)[None, :] + (lane // 4)[:, None]]
    addr = src[..., None] + 4 * (lane % 4)[:, None, None] + 2 * np.arange(2)[None, None, :]
    rows, cols = tile.locate(addr)
    if np.any(rows >= tile.rows) or np.any(cols >= tile.cols):
        raise ValueError("row address outside the tile")
    values = tile.data[..., rows, cols].reshape(tile.data.shape[:-2] + (WARP, 2 * count))
    trace = AccessTrace(tuple(row_addrs) + (0,) * (WARP - n), 16,
                        (True,) * n + (False,) * (WARP - n))
    return values, trace


def x4_row_addresses(tile: SharedTile, row0: int = 0, col0: int = 0) -> np.ndarray:
    """Row addresses for an x4 load of the 16x16 block at (row0, col0).

    Matrix order: (rows 0-7, cols 0-7), (rows 8-15, cols 0-7),
    (rows 0-7, cols 8-15), (rows 8-15, cols 8-15).
    """
    lane = np.arange(WARP)
    return tile.address(row0 + lane % 16, col0 + 8 * (lane // 16))


def lane_gather_inverse(values: np.ndarray, count: int = 4) -> np.ndarray:
    """Rebuild the 16x16 (x4), 16x8 (x2) or 8x8 (x1) source block from ldmatrix output.

    Assumes the row-address order of :func:`x4_row_addresses`.
    """
    lane = np.arange(WARP)
    shape = {1: (8, 8), 2: (16, 8), 4: (16, 16)}[count]
    out = np.zeros(values.shape[:-2] + shape, values.dtype)
    for m in range(count):
        r = (m % 2) * 8 + lane // 4
        c = (m // 2) * 8 + 2 * (lane % 4)
        out[..., r, c] = values[..., :, 2 * m]
        out[..., r, c + 1] = values[..., :, 2 * m + 1]
    return out


# -- reference access scenarios ----------------------------------------------


def contiguous_warp_trace(base: int, width: int = 4) -> AccessTrace:
    """Lane i reads ``width`` bytes at base + width*i."""
    return AccessTrace(tuple(base + width * i for i in range(WARP)), width)


def strided_warp_trace(stride: int, base: int = 0, width: int = 4) -> AccessTrace:
    """Lane i reads at base + stride*i, e.g. a column walk over packed rows."""
    return AccessTrace(tuple(base + stride * i for i in range(WARP)), width)


def column_tile_row_reads(row_stride: int = LINE_BYTES, swizzle: bool = False) -> AccessTrace:
    """Per-lane 16-byte row reads of a 16x16 f16 column tile inside a shared slice.

    This is the row-address trace an x4 ldmatrix issues on a tile whose rows
    are ``row_stride`` bytes apart.
    """
    cols = max(16, row_stride // 2)
    tile = SharedTile(np.zeros((16, cols), np.uint16), row_stride, swizzle)
    return AccessTrace(tuple(int(a) for a in x4_row_addresses(tile)), 16)


def analyze(trace: AccessTrace, cfg: MemConfig = DEFAULT_CONFIG) -> dict:
    return {
        "trace": trace.to_dict(),
        "transactions": coalesce_count(trace, cfg),
        "conflict_degree": bank_conflict_degree(trace, cfg),
    }
