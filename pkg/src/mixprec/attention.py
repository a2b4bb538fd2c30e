"""Mixed-precision decode attention over a quantized KV cache.

Scores are computed as S^T = K . Q^T on 16x8x16 tiles: 16 cached tokens form
the M extent of the A operand (K) and up to 8 query rows the N extent of the
B operand (Q). With kv_bits < 16 each 16-bit shared-memory unit of K holds
X = 16 / kv_bits codes, so one ldmatrix.x4 hands every lane 16X head-dim
values where the f16 layout expects 16. Instead of moving K across lanes, Q
is rearranged (:func:`rearrange_q`) so each lane's Q slots line up with the
K codes it already owns; one K load then feeds X MMAs.

Softmax runs over 64-token macro-tiles in two sweeps (running max, then
exponentials and normalisation), and P . V is formed as O^T = V^T . P^T on
transposed V micro-tiles. The result is bit-identical to
:func:`reference_attention` on the dequantized cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, exact_dot_f32, exact_to_f32, exp_f32, fp16_round, seq_sum_f32
from .fragment import Fragment, gather_fragment, scatter_fragment
from .memmodel import AccessTrace, SharedTile, bank_conflict_degree, ldmatrix_emulate, x4_row_addresses
from .mma import mma_emulate, mma_emulate_exact, zero_accumulator
from .quant import MACRO_TILE_TOKENS, KvCache
from .sched import attention_schedule

__all__ = [
    "RearrangeParams", "RearrangedQ", "AttnProblem", "AttnIntermediates",
    "rearrange_index", "rearrange_q", "q_shared_tile", "k_fragments", "transpose_v",
    "reference_attention", "attention_mixed", "scores_mixed", "AttentionError",
    "MICRO_TILE", "OP_N",
]

MICRO_TILE = 16
OP_N = 8


class AttentionError(ValueError):
    pass


@dataclass(frozen=True)
class RearrangeParams:
    """Q rearrangement parameters for one head dimension and KV bit width."""

    head_dim: int
    kv_bits: int
    k_n: int = OP_N

    def __post_init__(self):
        if self.kv_bits not in (4, 8, 16):
            raise AttentionError(f"kv_bits must be 4, 8 or 16, not {self.kv_bits}")
        if self.head_dim <= 0 or self.head_dim % self.op_k:
            raise AttentionError(f"head_dim {self.head_dim} not divisible by OP_K={self.op_k}")
        if self.head_dim % (16 * self.x):
            raise AttentionError(f"head_dim {self.head_dim} not a multiple of {16 * self.x}")

    @property
    def x(self) -> int:
        return 16 // self.kv_bits

    @property
    def op_k(self) -> int:
        return 16 // self.x

    @property
    def op_n(self) -> int:
        return OP_N

    @property
    def k_slices(self) -> int:
        """K_K = HeadDim / OP_K."""
        return self.head_dim // self.op_k

    @property
    def n_fragments(self) -> int:
        """MMA B fragments per 8 query rows; always HeadDim / 16."""
        return self.head_dim // 16

    def slice_starts(self):
        """Values of k visited: each covers 16X head-dim values (X fragments)."""
        return range(0, self.k_slices, self.x * self.x)


def rearrange_index(n: int, k: int, x: int, d: int, lane: int, params: RearrangeParams):
    """(hi, di) read by ``lane`` for fragment pair half ``d``; di..di+1 go to slots 2d, 2d+1."""
    X = params.x
    hi = n * params.op_n + lane // 4
    di = k * params.op_k + (lane % 4) * 2 * X + 2 * x + 8 * d * X
    return hi, di


@dataclass
class RearrangedQ:
    fragments: Fragment          # B role, values [..., n_blocks, n_fragments, 32, 4]
    traces: list = field(default_factory=list)

    @property
    def conflict_degree(self) -> int:
        return max(bank_conflict_degree(t) for t in self.traces)


def q_shared_tile(q_rows, params: RearrangeParams) -> SharedTile:
    """Stage (..., rows, HeadDim) f16 Q rows in swizzled shared memory.

    A lane's X reads for one (n, k, d) are adjacent, so they merge into a
    single 4X-byte load; the swizzle unit is sized to match (16X bytes).
    """
    q = np.asarray(q_rows, dtype=np.float16)
    return SharedTile(q, row_stride=2 * params.head_dim, swizzle=True,
                      swizzle_bytes=16 * params.x)


def rearrange_q(q_tile: SharedTile, params: RearrangeParams) -> RearrangedQ:
    """Load Q from shared memory into per-lane B fragments matching wide K tiles."""
    if q_tile.cols != params.head_dim:
        raise AttentionError(f"Q tile has {q_tile.cols} columns, expected {params.head_dim}")
    rows = q_tile.rows
    n_blocks = -(-rows // params.op_n)
    X = params.x
    lane = np.arange(32)
    out = np.zeros(q_tile.data.shape[:-2] + (n_blocks, params.n_fragments, 32, 4), np.float16)
    traces = []
    for n in range(n_blocks):
        for k in params.slice_starts():
            for d in range(2):
                hi, base = rearrange_index(n, k, 0, d, lane, params)
                valid = hi < rows
                row = np.where(valid, hi, 0)
                addr = q_tile.address(row, base)
                traces.append(AccessTrace(tuple(addr), 4 * X, tuple(valid)))
                for x in range(X):
                    for j in range(2):
                        r, c = q_tile.locate(addr + 2 * (2 * x + j))
                        vals = q_tile.data[..., r, c]
                        out[..., n, k // X + x, :, 2 * d + j] = np.where(valid, vals, 0)
    return RearrangedQ(Fragment("B", out, "f16"), traces)


# -- K fragments -------------------------------------------------------------


def _lane_tables():
    """Token row and 16-bit unit column of every (lane, A slot)."""
    lane = np.arange(32)[:, None]
    i = np.arange(8)[None, :]
    g, t = lane // 4, lane % 4
    return g + 8 * ((i >> 1) & 1), 2 * t + (i & 1) + 8 * (i >> 2)


def _kv_arrays(cache: KvCache, which: str, padded: int):
    n = cache.tokens
    codes = getattr(cache, f"{which}_codes")[:, :n]
    pad = ((0, 0), (0, padded - n), (0, 0))
    codes = np.pad(codes, pad)
    if cache.kv_bits == 16:
        return codes, None, None
    scales = np.pad(getattr(cache, f"{which}_scales")[:, :n], pad)
    zp = getattr(cache, f"{which}_zp")
    zp = None if zp is None else np.pad(zp[:, :n], pad)
    return codes, scales, zp


def k_fragments(cache: KvCache, padded_tokens: int) -> np.ndarray:
    """Dequantized K as A fragments [heads, micro-tiles, HeadDim/16, 32, 8] (f16).

    Codes are packed into 16-bit units, staged in a swizzled shared tile,
    fetched with ldmatrix.x4 and decoded in-lane. Code x' of unit (2t + j)
    lands in fragment (X*j + x') // 2, slot parity (X*j + x') % 2, which is
    exactly where the rearranged Q expects the matching head-dim value.
    """
    params = RearrangeParams(cache.head_dim, cache.kv_bits)
    X, bits = params.x, cache.kv_bits
    codes, scales, zps = _kv_arrays(cache, "k", padded_tokens)
    h, tp, hd = codes.shape
    mt, ns = tp // 16, hd // (16 * X)
    if bits == 16:
        units = codes.view(np.uint16)
    else:
        bias = 0 if cache.zero_point else 2 ** (bits - 1)
        c = (codes.astype(np.int32) + bias).astype(np.uint16).reshape(h, tp, hd // X, X)
        units = np.zeros((h, tp, hd // X), np.uint16)
        for xp in range(X):
            units |= (c[..., xp] << (bits * xp)).astype(np.uint16)
    tiles = units.reshape(h, mt, 16, ns, 16).transpose(0, 1, 3, 2, 4)
    tile = SharedTile(tiles, row_stride=128, swizzle=True)
    lane_units, _ = ldmatrix_emulate(tile, x4_row_addresses(tile), 4)   # h mt ns 32 8
    if bits == 16:
        return lane_units.view(np.float16)

    tok, ucol = _lane_tables()
    mask = (1 << bits) - 1
    sl = np.arange(ns)[:, None, None, None]
    xp = np.arange(X)
    dims = sl * 16 * X + X * ucol[None, :, :, None] + xp                 # ns 32 8 X
    rows = np.arange(mt)[:, None, None, None, None] * 16 + tok[None, None, :, :, None]  # mt 1 32 8 1
    grp = dims[None] // cache.group_size                                  # 1 ns 32 8 X
    hix = np.arange(h)[:, None, None, None, None, None]
    sc = scales[hix, rows[None], grp[None]]                               # h mt ns 32 8 X
    raw = (lane_units[..., None] >> (bits * xp).astype(np.uint16)) & mask
    vals = raw.astype(np.float32) - bias
    if zps is not None:
        vals = vals - zps[hix, rows[None], grp[None]].astype(np.float32)
    deq = fp16_round(vals * sc.astype(np.float32))

    out = np.zeros((h, mt, ns, X, 32, 8), np.float16)
    for i in range(8):
        j, r, d = i & 1, (i >> 1) & 1, i >> 2
        for x_ in range(X):
            pos = X * j + x_
            out[:, :, :, pos // 2, :, (pos % 2) + 2 * r + 4 * d] = deq[..., i, x_]
    return out.reshape(h, mt, ns * X, 32, 8)


def transpose_v(v_tile):
    """Exact tile transpose (..., tokens, dims) -> (..., dims, tokens)."""
    if isinstance(v_tile, Tensor):
        return Tensor.from_array(np.swapaxes(v_tile.data, -1, -2).copy(), v_tile.dtype)
    return np.swapaxes(np.asarray(v_tile), -1, -2).copy()


# -- problems and oracle -------------------------------------------------------


@dataclass
class AttnIntermediates:
    s: np.ndarray
    p: np.ndarray
    o: np.ndarray


@dataclass(frozen=True)
class AttnProblem:
    q: np.ndarray           # (heads, head_dim) f16, one decode step
    cache: KvCache
    scale: float | None = None

    def __post_init__(self):
        q = np.asarray(self.q.data if isinstance(self.q, Tensor) else self.q)
        if q.dtype != np.float16:
            q = fp16_round(q)
        if q.ndim == 1:
            q = q[None]
        if q.shape != (self.cache.heads, self.cache.head_dim):
            raise AttentionError(f"Q shape {q.shape} does not match cache "
                                 f"({self.cache.heads}, {self.cache.head_dim})")
        if self.cache.tokens < 1:
            raise AttentionError("empty KV cache")
        if not np.all(np.isfinite(q)):
            raise AttentionError("Q must be finite")
        object.__setattr__(self, "q", q)

    @property
    def softmax_scale(self) -> np.float32:
        if self.scale is not None:
            return np.float32(self.scale)
        return np.float32(1.0 / np.sqrt(self.cache.head_dim))


def _softmax_scale(head_dim: int, scale) -> np.float32:
    return np.float32(1.0 / np.sqrt(head_dim)) if scale is None else np.float32(scale)


def reference_attention(q, k, v, scale=None, intermediates: bool = False):
    """Oracle for one decode step.

    q: (heads, D) or (D,); k, v: (heads, T, D) or (T, D), all f16.
    S = (q . k) * scale with each dot product rounded once to binary32;
    P = exp(S - max) / sum, binary32; O = fp16_round(sum_t P_t * v_t) with
    the sum taken in ascending token order.
    """
    q = np.asarray(q, np.float16)
    k = np.asarray(k, np.float16)
    v = np.asarray(v, np.float16)
    single = q.ndim == 1
    if single:
        q, k, v = q[None], k[None], v[None]
    if k.shape != v.shape or k.ndim != 3 or q.shape != (k.shape[0], k.shape[2]):
        raise AttentionError(f"extent mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[1] < 1:
        raise AttentionError("need at least one key")
    s = exact_dot_f32(q[:, None, :], k, axis=-1) * _softmax_scale(q.shape[-1], scale)
    m = s.max(axis=-1, keepdims=True)
    e = exp_f32(s - m)
    l = seq_sum_f32(e, axis=-1)[..., None]
    p = (e / l).astype(np.float32)
    acc = np.zeros(q.shape, np.float32)
    for t in range(k.shape[1]):
        acc = acc + p[:, t, None] * v[:, t].astype(np.float32)
    o = fp16_round(acc)
    if single:
        s, p, o = s[0], p[0], o[0]
    return AttnIntermediates(s, p, o) if intermediates else o


# -- online path ------------------------------------------------------------------


def scores_mixed(q: np.ndarray, cache: KvCache, scale=None, padded_tokens: int | None = None):
    """Scaled scores S (heads, padded tokens) from rearranged-Q MMAs, plus the Q load traces."""
    params = RearrangeParams(cache.head_dim, cache.kv_bits)
    tp = padded_tokens or -(-cache.tokens // MACRO_TILE_TOKENS) * MACRO_TILE_TOKENS
    h = cache.heads
    q_rows = np.zeros((h, OP_N, cache.head_dim), np.float16)
    q_rows[:, 0] = q
    rq = rearrange_q(q_shared_tile(q_rows, params), params)
    qf = rq.fragments.values[:, 0]                         # h F 32 4
    kf = k_fragments(cache, tp)                            # h mt F 32 8
    mt = kf.shape[1]
    acc = zero_accumulator((h, mt), exact=True)
    for f in range(params.n_fragments):
        a = Fragment("A", kf[:, :, f])
        b = Fragment("B", np.broadcast_to(qf[:, None, f], (h, mt, 32, 4)))
        acc = mma_emulate_exact(a, b, acc)
    st = exact_to_f32(scatter_fragment(acc))               # h mt 16 tokens 8 rows
    s = st[..., 0].reshape(h, tp) * _softmax_scale(cache.head_dim, scale)
    return s, rq


def attention_mixed(p: AttnProblem, depth: int = 3, intermediates: bool = False):
    """Online decode attention; returns (O as f16 Tensor (heads, D), schedule)."""
    cache = p.cache
    n = cache.tokens
    n_macro = cache.n_macro_tiles
    tp = n_macro * MACRO_TILE_TOKENS
    h, hd = cache.heads, cache.head_dim
    s, _ = scores_mixed(p.q, cache, p.scale, tp)
    s = np.where(np.arange(tp) < n, s, np.float32(-np.inf))

    # sweep 1: running max over macro-tiles
    m = np.full((h, 1), -np.inf, np.float32)
    for i in range(n_macro):
        blk = s[:, i * MACRO_TILE_TOKENS:(i + 1) * MACRO_TILE_TOKENS]
        m = np.maximum(m, blk.max(axis=-1, keepdims=True))
    # sweep 2: exponentials, denominator, probabilities
    e = exp_f32(s - m)
    l = np.zeros((h, 1), np.float32)
    for i in range(n_macro):
        for t in range(i * MACRO_TILE_TOKENS, (i + 1) * MACRO_TILE_TOKENS):
            l = l + e[:, t, None]
    prob = (e / l).astype(np.float32)

    # O^T = V^T . P^T, one 16-token micro-tile at a time
    v = np.zeros((h, tp, hd), np.float16)
    v[:, :n] = cache.dequantized("v")
    acc = zero_accumulator((h, hd // 16))
    for u in range(tp // MICRO_TILE):
        tok = slice(u * MICRO_TILE, (u + 1) * MICRO_TILE)
        vt = transpose_v(v[:, tok])                        # h hd 16
        a = gather_fragment(vt.reshape(h, hd // 16, 16, MICRO_TILE), "A")
        pt = np.zeros((h, MICRO_TILE, OP_N), np.float32)
        pt[:, :, 0] = prob[:, tok]
        b = gather_fragment(pt[:, None], "B", dtype="f32")
        acc = mma_emulate(a, b, acc)
    ot = scatter_fragment(acc)                             # h hd/16 16 dims 8 rows
    o = fp16_round(ot[..., 0].reshape(h, hd))              # row-major write-back
    sched = attention_schedule(n, depth)
    out = Tensor.from_array(o, "f16")
    if intermediates:
        return out, sched, AttnIntermediates(s[:, :n], prob[:, :n], o)
    return out, sched
