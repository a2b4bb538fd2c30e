"""Offline hardware-aware weight packing.

Weights W are (K, N) codes grouped along K. Packing works on 16x16 tiles of
W^T (rows n, cols k) and runs four steps:

1. widen codes to 16 bits;
2. stage the tile in a swizzled shared slice and load it with an emulated
   ``ldmatrix.x4`` so the crossbar leaves every lane holding its MMA
   B-operand elements (two 8-column n-blocks, 8 codes per lane);
3. compress each lane's codes back to low-bit words, placing every code in
   the sub-word position the I2F decoder maps to its fragment slot;
4. store k-tile pairs as ``[lane][fragment][codes]`` so one warp load of a
   store unit is contiguous and every lane's LDS is conflict-free.

File layout (little-endian)::

    magic "TMPK" | u32 version | u32 rows (K) | u32 cols (N) | u8 bits |
    u32 group_size | u8 zero_point | u32 arch id | u32 layout id |
    u32 permutation id | u32 code words[...] | f16 scales[...] | u8 zero points[...]

Scales and zero points are (padded K / group, padded N), row-major.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor
from .fragment import M16N8K16, Fragment, MmaShape, gather_fragment
from .memmodel import (AccessTrace, SharedTile, bank_conflict_degree, coalesce_count,
                       column_tile_row_reads, contiguous_warp_trace, ldmatrix_emulate,
                       strided_warp_trace)
from .quant import QuantizedTensor, code_dtype

__all__ = [
    "ArchProfile", "ARCH_PROFILES", "get_arch", "PackedWeights", "LayoutReport",
    "Fragment", "pack_weights", "unpack_weights", "verify_layout", "pad_weights",
    "i2f_decode", "solve_permutation", "permutation_id", "naive_layout_report",
    "PackError", "MAGIC", "VERSION",
]

MAGIC = b"TMPK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIBIBIII")

LAYOUT_TWO_FRAGMENT = 1
LAYOUT_SINGLE_FRAGMENT = 2


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class ArchProfile:
    name: str
    arch_id: int
    mma: MmaShape = M16N8K16
    has_ldmatrix: bool = True
    cache_line: int = 128
    frags_per_store: int = 2

    def __post_init__(self):
        if self.frags_per_store not in (1, 2):
            raise ValueError("frags_per_store must be 1 or 2")


ARCH_PROFILES = {
    p.name: p
    for p in (
        ArchProfile("sm80", 80),
        ArchProfile("sm86", 86),
        ArchProfile("sm89", 89),
        ArchProfile("sm90", 90),
    )
}
_BY_ID = {p.arch_id: p for p in ARCH_PROFILES.values()}

ARCH_ENV = "MIXPREC_ARCH"


def get_arch(name: str | None = None) -> ArchProfile:
    name = name or os.environ.get(ARCH_ENV, "sm80")
    try:
        return ARCH_PROFILES[name]
    except KeyError:
        raise PackError(f"unknown arch {name!r}; known profiles: {', '.join(ARCH_PROFILES)}") from None


# -- I2F decoder and the sub-word permutation ---------------------------------


def _bias(bits: int, zero_point: bool) -> int:
    """Offset added to codes before storage so stored sub-words are unsigned."""
    return 0 if zero_point or bits == 16 else 2 ** (bits - 1)


def words_per_lane(bits: int) -> int:
    """32-bit words holding one lane's 8 codes of a 16x16 tile."""
    return 8 * bits // 32


def i2f_decode(words: np.ndarray, bits: int, bias: int = 0) -> np.ndarray:
    """Decode packed words (..., words_per_lane) into (..., 8) float32 codes.

    4-bit: pair p of a word is ((w >> 4p) & 0x000F000F) | 0x64006400, i.e.
    two f16 values 1024 + nibble; 8-bit uses byte lanes (w >> 8p) & 0x00FF00FF.
    Subtracting 1024 + bias recovers the code exactly. Pair p fills slots
    (2p, 2p+1) of the word's slot range.
    """
    w = np.asarray(words, dtype=np.uint32)
    if bits == 16:
        lo = (w & 0xFFFF).astype(np.uint16).view(np.float16)
        hi = (w >> 16).astype(np.uint16).view(np.float16)
        return np.stack([lo, hi], axis=-1).reshape(w.shape[:-1] + (-1,)).astype(np.float32)
    shift, mask, pairs = {4: (4, 0x000F000F, 4), 8: (8, 0x00FF00FF, 2)}[bits]
    out = []
    for p in range(pairs):
        h = ((w >> np.uint32(shift * p)) & np.uint32(mask)) | np.uint32(0x64006400)
        lo = (h & 0xFFFF).astype(np.uint16).view(np.float16).astype(np.float32)
        hi = (h >> 16).astype(np.uint16).view(np.float16).astype(np.float32)
        out.append((lo, hi))
    # slot order within a word: pair p -> (2p, 2p+1)
    per_word = np.stack([v for pair in out for v in pair], axis=-1)
    res = per_word.reshape(w.shape[:-1] + (-1,))
    return res - np.float32(1024 + bias)


def solve_permutation(bits: int) -> np.ndarray:
    """Sub-word position -> fragment slot, found by probing the I2F decoder.

    Returns ``slot_of[word, position]``.
    """
    if bits == 16:
        return np.arange(8).reshape(4, 2)
    per_word = 32 // bits
    nw = words_per_lane(bits)
    slot_of = np.full((nw, per_word), -1)
    for wi in range(nw):
        for pos in range(per_word):
            words = np.zeros(nw, np.uint32)
            words[wi] = np.uint32(1) << np.uint32(bits * pos)
            decoded = i2f_decode(words, bits)
            hit = np.flatnonzero(decoded != 0)
            if len(hit) != 1:
                raise PackError("I2F decoder is not a sub-word permutation")
            slot_of[wi, pos] = hit[0]
    if sorted(slot_of.reshape(-1)) != list(range(8)):
        raise PackError("I2F decoder does not cover every slot")
    return slot_of


def permutation_id(bits: int) -> int:
    """Hex-digit encoding of the within-word slot order (0 = identity/pass-through)."""
    if bits == 16:
        return 0
    slot_of = solve_permutation(bits)
    per_word = slot_of.shape[1]
    return sum(int(slot_of[0, q] % per_word) << (4 * q) for q in range(per_word))


def _compress(codes16: np.ndarray, bits: int) -> np.ndarray:
    """(..., 8) widened lane codes -> (..., words_per_lane) words in decoder order."""
    c = codes16.astype(np.uint32)
    if bits == 16:
        return (c[..., 0::2] | (c[..., 1::2] << 16)).astype(np.uint32)
    slot_of = solve_permutation(bits)
    nw, per_word = slot_of.shape
    words = np.zeros(c.shape[:-1] + (nw,), np.uint32)
    for wi in range(nw):
        for pos in range(per_word):
            words[..., wi] |= c[..., slot_of[wi, pos]] << np.uint32(bits * pos)
    return words


def _expand(words: np.ndarray, bits: int) -> np.ndarray:
    """Inverse of :func:`_compress` without going through float conversion."""
    w = np.asarray(words, dtype=np.uint32)
    if bits == 16:
        return np.stack([w & 0xFFFF, w >> 16], axis=-1).reshape(w.shape[:-1] + (8,))
    slot_of = solve_permutation(bits)
    nw, per_word = slot_of.shape
    out = np.zeros(w.shape[:-1] + (8,), np.uint32)
    mask = np.uint32(2**bits - 1)
    for wi in range(nw):
        for pos in range(per_word):
            out[..., slot_of[wi, pos]] = (w[..., wi] >> np.uint32(bits * pos)) & mask
    return out


# -- B-operand tile loads -----------------------------------------------------


def _b_operand_row_addresses(tile: SharedTile) -> np.ndarray:
    """x4 row addresses over a 16(n) x 16(k) tile ordered so each lane ends up
    with [n-block 0 b0..b3, n-block 1 b0..b3]."""
    lane = np.arange(32)
    n = lane % 8 + 8 * (lane // 16)
    k = 8 * ((lane // 8) % 2)
    return tile.address(n, k)


def _staged_tile(wt16: np.ndarray) -> SharedTile:
    # one 16x16 tile at the head of a swizzled 128-byte-per-row shared slice
    return SharedTile(wt16, row_stride=128, swizzle=True)


def load_b_tiles(wt16: np.ndarray):
    """ldmatrix-load widened W^T tiles (..., 16 n, 16 k) -> (..., 32, 8), trace."""
    tile = _staged_tile(wt16)
    return ldmatrix_emulate(tile, _b_operand_row_addresses(tile), 4)


def b_fragment_slots(w_tile: np.ndarray) -> np.ndarray:
    """Expected per-lane slots for a (..., 16 k, 16 n) tile: two B fragments."""
    f0 = gather_fragment(w_tile[..., :, :8], "B").values
    f1 = gather_fragment(w_tile[..., :, 8:], "B").values
    return np.concatenate([f0, f1], axis=-1)


# -- PackedWeights ------------------------------------------------------------


@dataclass(frozen=True)
class PackedWeights:
    rows: int
    cols: int
    bits: int
    group_size: int
    zero_point: bool
    arch_id: int
    layout_id: int
    permutation_id: int
    words: np.ndarray
    scales: np.ndarray | None
    zero_points: np.ndarray | None
    version: int = VERSION

    @property
    def arch(self) -> ArchProfile:
        try:
            return _BY_ID[self.arch_id]
        except KeyError:
            raise PackError(f"unknown arch id {self.arch_id}") from None

    @property
    def frags(self) -> int:
        """16x16 k-tiles per store unit, fixed by the layout id."""
        return 2 if self.layout_id == LAYOUT_TWO_FRAGMENT else 1

    @property
    def padded_shape(self) -> tuple[int, int]:
        return padded_shape(self.rows, self.cols, self.group_size, self.frags, self.bits)

    @property
    def bias(self) -> int:
        return _bias(self.bits, self.zero_point)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.rows, self.cols, self.bits,
                            self.group_size, int(self.zero_point), self.arch_id,
                            self.layout_id, self.permutation_id)
        parts = [head, self.words.astype("<u4").tobytes()]
        if self.scales is not None:
            parts.append(self.scales.astype("<f2").tobytes())
        if self.zero_points is not None:
            parts.append(self.zero_points.astype(np.uint8).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PackedWeights":
        if len(raw) < _HEADER.size:
            raise PackError("truncated header")
        (magic, version, rows, cols, bits, group, zp, arch_id, layout_id,
         perm_id) = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise PackError(f"bad magic {magic!r}")
        if version != VERSION:
            raise PackError(f"unsupported version {version}")
        if bits not in (4, 8, 16):
            raise PackError(f"corrupt header: bits={bits}")
        if arch_id not in _BY_ID:
            raise PackError(f"corrupt header: arch id {arch_id}")
        if layout_id not in (LAYOUT_TWO_FRAGMENT, LAYOUT_SINGLE_FRAGMENT):
            raise PackError(f"corrupt header: layout id {layout_id}")
        frags = 2 if layout_id == LAYOUT_TWO_FRAGMENT else 1
        kp, np_ = padded_shape(rows, cols, group, frags, bits)
        n_words = kp * np_ * bits // 32
        n_groups = (kp // group) * np_ if bits != 16 else 0
        need = _HEADER.size + 4 * n_words + 2 * n_groups + (n_groups if zp else 0)
        if len(raw) != need:
            raise PackError(f"payload length mismatch: expected {need} bytes, got {len(raw)}")
        off = _HEADER.size
        words = np.frombuffer(raw, "<u4", n_words, off).astype(np.uint32)
        off += 4 * n_words
        scales = zps = None
        if bits != 16:
            scales = np.frombuffer(raw, "<f2", n_groups, off).astype(np.float16).reshape(kp // group, np_)
            off += 2 * n_groups
            if zp:
                zps = np.frombuffer(raw, np.uint8, n_groups, off).reshape(kp // group, np_).copy()
        return cls(rows, cols, bits, group, bool(zp), arch_id, layout_id, perm_id,
                   words, scales, zps, version)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PackedWeights":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    # word offsets ---------------------------------------------------------

    def unit_grid(self) -> tuple[int, int]:
        """(k store units, n tiles)."""
        kp, np_ = self.padded_shape
        return kp // (16 * self.frags), np_ // 16

    def lane_words(self) -> np.ndarray:
        """Words viewed as [k unit, n tile, fragment, lane, word]."""
        ku, nt = self.unit_grid()
        f = self.frags
        nw = words_per_lane(self.bits)
        w = self.words.reshape(ku, nt, -1)
        if self.layout_id == LAYOUT_TWO_FRAGMENT:
            return w.reshape(ku, nt, 32, f, nw).transpose(0, 1, 3, 2, 4)
        return w.reshape(ku, nt, f, 32, nw)

    def word_offsets(self) -> np.ndarray:
        """Byte offsets of every lane word, same indexing as :meth:`lane_words`."""
        ku, nt = self.unit_grid()
        f = self.frags
        nw = words_per_lane(self.bits)
        idx = np.arange(self.words.size).reshape(ku, nt, -1)
        if self.layout_id == LAYOUT_TWO_FRAGMENT:
            idx = idx.reshape(ku, nt, 32, f, nw).transpose(0, 1, 3, 2, 4)
        else:
            idx = idx.reshape(ku, nt, f, 32, nw)
        return 4 * idx


def store_frags(arch: ArchProfile, bits: int) -> int:
    """k-tiles per store unit; f16 lanes already move 16 bytes per fragment."""
    return 1 if bits == 16 else arch.frags_per_store


def padded_shape(rows: int, cols: int, group_size: int, frags: int, bits: int):
    k_unit = 16 * frags
    k_mult = k_unit if bits == 16 else math.lcm(k_unit, group_size)
    return -(-rows // k_mult) * k_mult, -(-cols // 16) * 16


def pad_weights(q: QuantizedTensor, arch: ArchProfile | None = None,
                frags: int | None = None) -> QuantizedTensor:
    """Pad (K, N) weight codes to the arch tile grid with zero-point codes."""
    arch = arch or get_arch()
    if frags is not None:
        arch = ArchProfile(arch.name, arch.arch_id, arch.mma, arch.has_ldmatrix,
                           arch.cache_line, frags)
    if len(q.codes.shape) != 2 or q.axis != 0:
        raise PackError("weights must be (K, N) with groups along K")
    k, n = q.codes.shape
    kp, np_ = padded_shape(k, n, q.group_size, store_frags(arch, q.bits), q.bits)
    if (kp, np_) == (k, n):
        return q
    if q.bits == 16:
        codes = np.zeros((kp, np_), np.float16)
        codes[:k, :n] = q.codes.data
        return QuantizedTensor(Tensor.from_array(codes, "f16"), None, None, 16,
                               q.group_size, 0, q.logical_shape)
    ng = kp // q.group_size
    scales = np.ones((ng, np_), np.float16)
    scales[: q.scales.shape[0], :n] = q.scales.data
    if q.zero_point:
        zps = np.zeros((ng, np_), np.uint8)
        zps[: q.zero_points.shape[0], :n] = q.zero_points.data
        fill = np.repeat(zps, q.group_size, axis=0)
    else:
        zps = None
        fill = np.zeros((kp, np_), np.int64)
    codes = fill.astype(np.int64)
    codes[:k, :n] = q.codes.data
    return QuantizedTensor(
        Tensor((kp, np_), q.codes.dtype, codes),
        Tensor.from_array(scales, "f16"),
        None if zps is None else Tensor.from_array(zps, "u8"),
        q.bits, q.group_size, 0, q.logical_shape)


def _tiles(codes: np.ndarray, frags: int) -> np.ndarray:
    """(K, N) -> W^T tiles [k unit, n tile, fragment, 16 n, 16 k]."""
    kp, np_ = codes.shape
    t = codes.reshape(kp // (16 * frags), frags, 16, np_ // 16, 16)  # ku f k nt n
    return t.transpose(0, 3, 1, 4, 2)


def _untile(tiles: np.ndarray) -> np.ndarray:
    ku, nt, f = tiles.shape[:3]
    return tiles.transpose(0, 2, 4, 1, 3).reshape(ku * f * 16, nt * 16)


def pack_weights(q: QuantizedTensor, arch: ArchProfile | None = None,
                 frags_per_store: int | None = None) -> PackedWeights:
    """Pack padded (K, N) codes for ``arch``; see the module docstring for the steps."""
    arch = arch or get_arch()
    if frags_per_store is not None and frags_per_store != arch.frags_per_store:
        arch = ArchProfile(arch.name, arch.arch_id, arch.mma, arch.has_ldmatrix,
                           arch.cache_line, frags_per_store)
    if q.bits not in (4, 8, 16):
        raise PackError(f"unsupported bits {q.bits}")
    if len(q.codes.shape) != 2 or q.axis != 0:
        raise PackError("weights must be (K, N) with groups along K")
    k, n = q.logical_shape
    frags = store_frags(arch, q.bits)
    kp, np_ = padded_shape(k, n, q.group_size, frags, q.bits)
    if q.codes.shape != (kp, np_):
        raise PackError(f"shape {q.codes.shape} not padded to {(kp, np_)}; use pad_weights")
    zp = q.zero_point
    bias = _bias(q.bits, zp)

    # step i: widen to 16 bits (f16 weights keep their bit patterns)
    if q.bits == 16:
        wide = q.codes.data.view(np.uint16)
    else:
        wide = (q.codes.data.astype(np.int64) + bias).astype(np.uint16)
    tiles = _tiles(wide, frags)
    # step ii: shared staging + ldmatrix crossbar
    lane_codes, _ = load_b_tiles(tiles)                    # ku nt f 32 8
    # step iii: compress in decoder order
    words = _compress(lane_codes, q.bits)                  # ku nt f 32 nw
    # step iv: fragment storing order
    if frags == 1:
        layout_id = LAYOUT_SINGLE_FRAGMENT
        stored = words
    else:
        layout_id = LAYOUT_TWO_FRAGMENT
        stored = words.transpose(0, 1, 3, 2, 4)            # ku nt 32 f nw
    scales = None if q.bits == 16 else q.scales.data.copy()
    zps = None if not zp or q.bits == 16 else q.zero_points.data.copy()
    return PackedWeights(k, n, q.bits, q.group_size, zp and q.bits != 16, arch.arch_id,
                         layout_id, permutation_id(q.bits),
                         np.ascontiguousarray(stored).reshape(-1).astype(np.uint32),
                         scales, zps)


def unpack_weights(p: PackedWeights, keep_padding: bool = False) -> QuantizedTensor:
    """Exact inverse of :func:`pack_weights`."""
    if p.permutation_id != permutation_id(p.bits):
        raise PackError(f"permutation id {p.permutation_id:#x} does not match the decoder")
    lane_codes = _expand(p.lane_words(), p.bits)           # ku nt f 32 8
    # undo the crossbar: slot (n-block, b_i) -> element of the W^T tile
    wt = np.zeros(lane_codes.shape[:3] + (16, 16), np.uint32)
    exp = _b_slot_positions()
    wt[..., exp[0], exp[1]] = lane_codes
    wide = _untile(wt)
    kp, np_ = p.padded_shape
    if p.bits == 16:
        codes = Tensor.from_array(wide.astype(np.uint16).view(np.float16), "f16")
        q = QuantizedTensor(codes, None, None, 16, p.group_size, 0, (p.rows, p.cols))
    else:
        vals = wide.astype(np.int64) - p.bias
        codes = Tensor((kp, np_), code_dtype(p.bits, p.zero_point), vals)
        q = QuantizedTensor(codes, Tensor.from_array(p.scales, "f16"),
                            None if p.zero_points is None else Tensor.from_array(p.zero_points, "u8"),
                            p.bits, p.group_size, 0, (p.rows, p.cols))
    if keep_padding:
        return q
    from .quant import crop
    return crop(q, (p.rows, p.cols))


def _b_slot_positions() -> tuple[np.ndarray, np.ndarray]:
    """(n, k) position in the W^T tile of every (lane, slot)."""
    from .fragment import layout
    krow, ncol = layout("B")
    n = np.concatenate([ncol, ncol + 8], axis=1)
    k = np.concatenate([krow, krow], axis=1)
    return n, k


# -- layout verification ------------------------------------------------------


@dataclass
class LayoutReport:
    transactions: int
    conflict_degree: int
    mma_aligned: bool
    staging_conflict_degree: int = 1
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.transactions == 1 and self.conflict_degree == 1 and self.mma_aligned

    def to_dict(self) -> dict:
        return {"transactions": self.transactions, "conflict_degree": self.conflict_degree,
                "mma_aligned": self.mma_aligned,
                "staging_conflict_degree": self.staging_conflict_degree, **self.details}


def _line_traces(offsets: np.ndarray, line: int = 128):
    """Warp loads that fetch the given word offsets 128 bytes at a time, in order."""
    flat = np.sort(offsets.reshape(-1))
    for start in range(0, flat.size, line // 4):
        yield AccessTrace(tuple(flat[start:start + line // 4]), 4)


def _lds_traces(lane_offsets: np.ndarray):
    """Per-lane shared loads for one store unit; lane_offsets is [32, words]."""
    # each lane issues vector loads of up to 16 contiguous bytes
    per_lane = [np.sort(o) for o in lane_offsets]
    loads_per_lane = []
    for o in per_lane:
        runs, cur = [], [int(o[0])]
        for a in o[1:]:
            if a == cur[-1] + 4 and 4 * len(cur) < 16:
                cur.append(int(a))
            else:
                runs.append(cur)
                cur = [int(a)]
        runs.append(cur)
        loads_per_lane.append(runs)
    n_loads = len(loads_per_lane[0])
    for i in range(n_loads):
        width = 4 * len(loads_per_lane[0][i])
        yield AccessTrace(tuple(r[i][0] for r in loads_per_lane), width)


def verify_layout(p: PackedWeights, max_units: int | None = 64,
                  source: QuantizedTensor | None = None) -> LayoutReport:
    """Replay the online loads of ``p`` through the memory model.

    transactions: worst coalescing count over the 128-byte warp loads that
    fetch a store unit; conflict_degree: worst bank conflict of the lanes'
    shared loads of a unit; mma_aligned: whether I2F of each lane's words
    yields exactly the B-operand fragments of the logical tile. The logical
    codes come from ``source`` (the quantized weights before packing) when
    given; otherwise only the file's internal consistency is checked.
    """
    offs = p.word_offsets()                                  # ku nt f 32 nw
    ku, nt = offs.shape[:2]
    units = [(a, b) for a in range(ku) for b in range(nt)]
    if max_units is not None and len(units) > max_units:
        pick = np.linspace(0, len(units) - 1, max_units).astype(int)
        units = [units[i] for i in pick]
    transactions = conflict = 0
    for a, b in units:
        unit = offs[a, b]
        base = unit.min()
        for tr in _line_traces(unit):
            transactions = max(transactions, coalesce_count(tr))
        # cp.async keeps the unit's byte order in shared memory
        lane_offsets = (unit - base).transpose(1, 0, 2).reshape(32, -1)
        if p.layout_id == LAYOUT_SINGLE_FRAGMENT:
            # one fragment at a time
            for f in range(unit.shape[0]):
                for tr in _lds_traces(unit[f] - base):
                    conflict = max(conflict, bank_conflict_degree(tr))
        else:
            for tr in _lds_traces(lane_offsets):
                conflict = max(conflict, bank_conflict_degree(tr))

    q = unpack_weights(p, keep_padding=True) if source is None else pad_weights(source, p.arch, p.frags)
    decoded = i2f_decode(p.lane_words(), p.bits, p.bias)    # ku nt f 32 8
    logical = q.codes.data.astype(np.float32)
    w_tiles = _tiles(logical, p.frags).swapaxes(-1, -2)  # (k, n)
    expected = b_fragment_slots(w_tiles)
    aligned = bool(np.array_equal(decoded, expected))

    wt16 = np.zeros((16, 16), np.uint16)
    _, staging = load_b_tiles(wt16)
    return LayoutReport(transactions, conflict, aligned, bank_conflict_degree(staging),
                        {"units_checked": len(units), "layout_id": p.layout_id,
                         "permutation_id": p.permutation_id})


def naive_layout_report(n: int = 4224, bits: int = 4, rows: int = 8) -> dict:
    """Memory-model figures for unpacked row-major low-bit weights.

    transactions: worst coalescing count when a warp fetches 128 contiguous
    bytes from the start of each of the first ``rows`` rows (row pitch
    ``n * bits / 8`` bytes, so unaligned pitches straddle segments);
    conflict_degree: per-lane 16-byte row reads of a 16x16 f16 column tile in
    an unswizzled 128-byte shared slice; column_walk_conflict: 32 lanes each
    reading one 32-bit word down a column of packed 128-byte rows.
    """
    pitch = n * bits // 8
    transactions = max(coalesce_count(contiguous_warp_trace(r * pitch)) for r in range(rows))
    return {
        "transactions": transactions,
        "conflict_degree": bank_conflict_degree(column_tile_row_reads(128)),
        "column_walk_conflict": bank_conflict_degree(strided_warp_trace(128)),
    }
