"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``. Every check uses a fixed seed.
"""
import time

import numpy as np
import pytest

from mixprec.attention import (AttnProblem, RearrangeParams, attention_mixed, q_shared_tile,
                               rearrange_q, reference_attention, scores_mixed)
from mixprec.core import f16_ulp
from mixprec.gemm import GemmProblem, dequantized_weights, mixed_gemm, reference_gemm
from mixprec.memmodel import (SharedTile, lane_gather_inverse, ldmatrix_emulate, swizzle_index,
                              x4_row_addresses)
from mixprec.packer import (ARCH_PROFILES, PackedWeights, get_arch, naive_layout_report,
                            pack_weights, pad_weights, unpack_weights, verify_layout)
from mixprec.quant import KvCache, QuantSpec, dequantize, quantize, quantize_kv, quantized_equal
from mixprec.sched import (UnitLatencies, attention_bubbles, attention_schedule, compare_overlap,
                           gemm_schedule, simulate)

TITLES = {
    1: "GEMM path equivalence",
    2: "attention path equivalence",
    3: "layout claims",
    4: "K-slice counts",
    5: "rearrangement correctness",
    6: "packing round-trip",
    7: "overlap model",
    8: "quantization bound",
}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n} ({TITLES[n]}): {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def same_bits(a, b):
    return a.shape == b.shape and np.array_equal(np.asarray(a, np.float16).view(np.uint16),
                                                 np.asarray(b, np.float16).view(np.uint16))


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gemm_equivalence(capsys):
    rng = np.random.default_rng(101)
    configs = [(b, g) for b in (4, 8) for g in (64, 128)]
    t0 = time.perf_counter()
    failures, largest = [], (0, 0, 0)
    for i in range(200):
        bits, group = configs[i % 4]
        if i < 4:
            m, k, n = 64, 4096, 4096
        elif i < 12:
            m, k, n = int(rng.integers(1, 65)), 4096, int(rng.integers(1, 513))
        else:
            m, k, n = (int(rng.integers(1, 65)), int(rng.integers(1, 1537)),
                       int(rng.integers(1, 1537)))
        a = rng.standard_normal((m, k)).astype(np.float16)
        w = (rng.standard_normal((k, n)) * rng.uniform(0.01, 4)).astype(np.float16)
        q = quantize(w, bits, group, bool(rng.integers(2)), axis=0)
        p = pack_weights(pad_weights(q))
        out, _ = mixed_gemm(GemmProblem(a, p))
        ref = reference_gemm(a, dequantized_weights(p))
        if not same_bits(out.data, ref.data):
            failures.append((i, m, k, n, bits, group))
        largest = max(largest, (m, k, n), key=lambda s: s[0] * s[1] * s[2])
    dt = time.perf_counter() - t0
    verdict(capsys, 1, not failures and dt < 300,
            f"200 problems, {len(failures)} mismatches, largest {largest[0]}x{largest[1]}x"
            f"{largest[2]}, {dt:.1f}s (limit 300s)")


# 2 ---------------------------------------------------------------------------


def test_criterion_2_attention_equivalence(capsys):
    rng = np.random.default_rng(202)
    grid = [(b, t, d) for b in (4, 8, 16) for t in (1, 63, 64, 65, 130, 1024) for d in (64, 128)]
    t0 = time.perf_counter()
    failures = []
    for i in range(100):
        bits, tokens, hd = grid[i % len(grid)]
        heads = int(rng.integers(1, 5))
        zp = bits != 16 and bool(rng.integers(2))
        group = hd if bits == 16 else int(rng.choice([g for g in (32, 64, 128) if hd % g == 0]))
        spec = QuantSpec(kv_bits=bits, group_size=group, zero_point=zp)
        shape = (heads, tokens, hd)
        cache = quantize_kv(rng.standard_normal(shape) * 2, rng.standard_normal(shape),
                            KvCache.empty(heads, hd, tokens, spec))
        q = rng.standard_normal((heads, hd)).astype(np.float16)
        out, _ = attention_mixed(AttnProblem(q, cache))
        ref = reference_attention(q, cache.dequantized("k"), cache.dequantized("v"))
        if not same_bits(out.data, ref):
            failures.append((i, bits, tokens, hd))
    dt = time.perf_counter() - t0
    verdict(capsys, 2, not failures and dt < 300,
            f"100 problems over {len(grid)} (kv_bits, tokens, head_dim) cells, "
            f"{len(failures)} mismatches, {dt:.1f}s (limit 300s)")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_layout_claims(capsys):
    rng = np.random.default_rng(303)
    bad, n_cfg = [], 0
    for arch in sorted(ARCH_PROFILES):
        for bits, zp in ((4, True), (4, False), (8, True), (8, False), (16, False)):
            for group in (64, 128):
                rows, cols = int(rng.integers(1, 300)), int(rng.integers(1, 300))
                q = quantize(rng.standard_normal((rows, cols)), bits, group, zp, axis=0)
                p = pack_weights(pad_weights(q, get_arch(arch)), get_arch(arch))
                rep = verify_layout(p, max_units=None, source=q)
                n_cfg += 1
                if (rep.transactions, rep.conflict_degree, rep.mma_aligned) != (1, 1, True):
                    bad.append((arch, bits, zp, group, rep.to_dict()))
    naive = naive_layout_report()
    controls = (naive["conflict_degree"], naive["column_walk_conflict"], naive["transactions"])
    ok = not bad and controls == (8, 32, 2)
    verdict(capsys, 3, ok,
            f"{n_cfg} packed configurations, {len(bad)} failing; naive controls "
            f"conflict={controls[0]} (want 8), column walk={controls[1]} (want 32), "
            f"transactions={controls[2]} (want 2)")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_k_slices(capsys):
    got = [RearrangeParams(128, b).k_slices for b in (16, 8, 4)]
    verdict(capsys, 4, got == [8, 16, 32], f"K_K for f16/i8/u4 at HeadDim=128: {got}")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_rearrangement(capsys):
    rng = np.random.default_rng(505)
    mismatches, degrees, tiles = 0, set(), 0
    for bits in (4, 8, 16):
        for _ in range(50):
            hd = int(rng.choice([64, 128]))
            heads = int(rng.integers(1, 3))
            spec = QuantSpec(kv_bits=bits, group_size=hd, zero_point=bits != 16)
            shape = (heads, 64, hd)
            cache = quantize_kv(rng.standard_normal(shape), rng.standard_normal(shape),
                                KvCache.empty(heads, hd, 64, spec))
            q = rng.standard_normal((heads, hd)).astype(np.float16)
            s, rq = scores_mixed(q, cache)
            ref = reference_attention(q, cache.dequantized("k"), cache.dequantized("v"),
                                      intermediates=True).s
            mismatches += not np.array_equal(s.view(np.uint32), ref.view(np.uint32))
            degrees.add(rq.conflict_degree)
            tiles += 1
        for hd in (64, 128):
            p = RearrangeParams(hd, bits)
            degrees.add(rearrange_q(q_shared_tile(np.zeros((16, hd), np.float16), p), p)
                        .conflict_degree)
    verdict(capsys, 5, mismatches == 0 and degrees == {1},
            f"{tiles} tiles over kv_bits 4/8/16, {mismatches} score mismatches, "
            f"shared-load conflict degrees {sorted(degrees)}")


# 6 ---------------------------------------------------------------------------


def test_criterion_6_round_trips(capsys):
    rng = np.random.default_rng(606)
    archs = sorted(ARCH_PROFILES)
    pack_fail = 0
    for i in range(1000):
        bits = int(rng.choice([4, 8, 16]))
        zp = bits != 16 and bool(rng.integers(2))
        group = int(rng.choice([32, 64, 128]))
        rows, cols = int(rng.integers(1, 200)), int(rng.integers(1, 200))
        arch = get_arch(archs[i % len(archs)])
        q = quantize(rng.standard_normal((rows, cols)) * rng.uniform(0.1, 10), bits, group, zp,
                     axis=0)
        p = pack_weights(pad_weights(q, arch), arch)
        if i % 10 == 0:
            p = PackedWeights.from_bytes(p.to_bytes())
        pack_fail += not quantized_equal(unpack_weights(p), q)

    swz_fail = 0
    for _ in range(10_000):
        unit = int(rng.choice([16, 32, 64]))
        tile = SharedTile(np.zeros((16, 64), np.uint16), 128 * int(rng.integers(1, 3)),
                          swizzle=True, swizzle_bytes=unit, base=128 * int(rng.integers(0, 8)))
        r, c = int(rng.integers(0, 16)), int(rng.integers(0, 64))
        row_back, col_back = tile.locate(tile.address(r, c))
        chunk, row = int(rng.integers(0, 8)), int(rng.integers(0, 1 << 20))
        swz_fail += (int(row_back), int(col_back)) != (r, c)
        swz_fail += swizzle_index(row, swizzle_index(row, chunk)) != chunk

    ld_fail = 0
    for _ in range(10_000):
        count = int(rng.choice([1, 2, 4]))
        data = rng.permutation(16 * 64).astype(np.uint16).reshape(16, 64)
        tile = SharedTile(data, 128, swizzle=bool(rng.integers(2)))
        c0 = 8 * int(rng.integers(0, 7))
        vals, _ = ldmatrix_emulate(tile, x4_row_addresses(tile, 0, c0), count)
        block = lane_gather_inverse(vals, count)
        want = data[: block.shape[0], c0: c0 + block.shape[1]]
        ld_fail += not (np.array_equal(block, want) and len(np.unique(vals)) == vals.size)

    verdict(capsys, 6, pack_fail == swz_fail == ld_fail == 0,
            f"1000 pack/unpack cases: {pack_fail} failures; 10^4 swizzle trials: {swz_fail} "
            f"failures; 10^4 ldmatrix trials: {ld_fail} failures")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_overlap(capsys):
    cmp = compare_overlap(256, UnitLatencies())
    rng = np.random.default_rng(707)
    violations = 0
    for i in range(10_000):
        v = [int(x) for x in rng.integers(0, 33, 5)]
        lat = UnitLatencies(*v, depth=int(rng.integers(1, 6)))
        tiles = int(rng.integers(1, 17))
        s = (gemm_schedule(tiles, lat.depth, mixed=bool(i % 4)) if i % 2
             else attention_schedule(16 * tiles, lat.depth))
        rep = simulate(s, lat)
        violations += rep.total > rep.serial
    # The overlap condition presumes the pipeline can hide the global load:
    # depth 3 (one macro-tile in use, two in flight) and a load no longer than
    # one macro-tile of tensor-core work (2 phases x 4 micro-tiles x mma).
    # Load-bound trials are reported separately; there TC must wait on LDST.
    bubble_bad, load_bound, load_bound_idle = 0, 0, 0
    for _ in range(400):
        mma = int(rng.integers(1, 40))
        lds = int(rng.integers(0, mma + 1))
        lat = UnitLatencies(load=int(rng.integers(0, 16 * mma + 1)), lds=lds,
                            i2f=int(rng.integers(0, mma - lds + 1)), mma=mma, depth=3)
        s = attention_schedule(int(rng.integers(256, 1025)), lat.depth)
        idle = attention_bubbles(s, lat)["steady"] != 0.0
        if lat.load <= 8 * lat.mma:
            bubble_bad += idle
        else:
            load_bound += 1
            load_bound_idle += idle
    ok = (cmp["instr_ratio"] > 1.3 and cmp["cycle_ratio"] < 1.10 and violations == 0
          and bubble_bad == 0)
    verdict(capsys, 7, ok,
            f"256 tiles: instr_ratio={cmp['instr_ratio']:.4f} (>1.3), "
            f"cycle_ratio={cmp['cycle_ratio']:.4f} (<1.10); pipelined>serial in "
            f"{violations}/10^4 trials; nonzero steady bubbles in {bubble_bad}/"
            f"{400 - load_bound} load-hidden trials (load-bound, informational: "
            f"{load_bound_idle}/{load_bound} idle)")


# 8 ---------------------------------------------------------------------------


def _group_values(rng, n_groups, group):
    kind = rng.integers(0, 5, n_groups)[:, None]
    mag = 10.0 ** rng.uniform(-4, 3, (n_groups, 1))
    normal = rng.standard_normal((n_groups, group)) * mag
    positive = rng.uniform(0, 1, (n_groups, group)) * mag
    outlier = normal * np.where(rng.uniform(size=(n_groups, group)) < 0.01, 50, 1)
    const = np.broadcast_to(rng.standard_normal((n_groups, 1)) * mag, (n_groups, group))
    v = np.select([kind == 0, kind == 1, kind == 2, kind == 3],
                  [normal, positive, outlier, const], np.zeros((n_groups, group)))
    return np.clip(v, -60000, 60000).astype(np.float16)


def test_criterion_8_quant_bound(capsys):
    rng = np.random.default_rng(808)
    total, worst, violations = 0, 0.0, 0
    for bits in (4, 8):
        for zp in (True, False):
            for group in (32, 64, 128):
                n_groups = 100_000 // 12 + 1
                v = _group_values(rng, n_groups, group)
                q = quantize(v, bits, group, zp)
                d = dequantize(q).data.astype(np.float64)
                s = q.expanded(q.scales.data).astype(np.float64)
                bound = s / 2 + f16_ulp(v)
                err = np.abs(d - v.astype(np.float64))
                violations += int(np.count_nonzero(err > bound))
                worst = max(worst, float((err / bound).max()))
                total += n_groups
    verdict(capsys, 8, violations == 0 and total >= 100_000,
            f"{total} groups, {violations} elements over scale/2 + 1 ulp, "
            f"worst error/bound ratio {worst:.3f}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
