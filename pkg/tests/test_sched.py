import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixprec.sched import (UNITS, CyclicSchedule, PipelineSchedule, Stage, UnitLatencies,
                           attention_bubbles, attention_schedule, compare_overlap, gemm_schedule,
                           in_flight_prefetches, report_json, serial_report, simulate)

EX = UnitLatencies(load=10, lds=2, i2f=4, mma=8, fma=0)


def test_chain_examples():
    assert simulate(gemm_schedule(1, 3), EX).total == 24
    assert simulate(gemm_schedule(4, 3), EX).total == 54
    assert serial_report(gemm_schedule(4, 1), EX.replace(depth=1)).total == 96


def test_load_bound_hits_lower_bound():
    rep = simulate(gemm_schedule(64, 3), EX)
    # LDST is the bottleneck; the only slack is the tail after the last load
    assert rep.busy["LDST"] == 640
    assert rep.total == 640 + 2 + 4 + 8


def test_report_invariants():
    rep = simulate(gemm_schedule(16, 3), UnitLatencies())
    assert rep.total >= max(rep.busy.values())
    for u in UNITS:
        assert rep.bubbles[u] == rep.total - rep.busy[u]
    assert rep.stages == 3 * 16 + 2


def test_schedule_structure():
    s = gemm_schedule(256, 3)
    assert s.count("mma") == 256 and len(s.stages) == 3 * 256 + 2
    for rec in s.stages:
        if rec.kind == "mma":
            assert any(s.stages[d].kind == "dequant" and s.stages[d].tile == rec.tile for d in rec.deps)
        if rec.kind == "dequant":
            assert any(s.stages[d].kind == "prefetch" and s.stages[d].tile == rec.tile for d in rec.deps)
    for lat in (UnitLatencies(), EX, UnitLatencies(load=1, mma=30)):
        assert in_flight_prefetches(s, simulate(s, lat)) <= 3


def test_overlap_defaults():
    cmp = compare_overlap(256)
    assert cmp["instr_ratio"] > 1.3
    assert cmp["cycle_ratio"] < 1.10
    assert cmp["pipelined"].total <= cmp["serial"].total


def test_overlap_degenerate_and_depth_one():
    assert compare_overlap(256, UnitLatencies(i2f=0, fma=0))["cycle_ratio"] == 1.0
    lat = EX.replace(depth=1)
    cmp = compare_overlap(64, lat)
    # with no prefetch overlap each tile costs load + feed + mma
    assert cmp["cycle_ratio"] == pytest.approx((10 + 6 + 8) / (10 + 2 + 8), rel=0.02)


def test_cycle_detection():
    s = PipelineSchedule()
    s.stages = [Stage("TC", "mma", 0, (1,)), Stage("ALU", "dequant", 0, (0,))]
    with pytest.raises(CyclicSchedule):
        simulate(s, UnitLatencies())


def test_add_validation():
    s = PipelineSchedule()
    with pytest.raises(ValueError):
        s.add("GPU", "mma", 0)
    with pytest.raises(ValueError):
        s.add("TC", "warp", 0)
    with pytest.raises(ValueError):
        s.add("TC", "mma", 0, [5])


@pytest.mark.parametrize("kw", [{"load": -1}, {"depth": 0}, {"mma": 1.5}, {"lds": True}])
def test_latency_validation(kw):
    with pytest.raises(ValueError):
        UnitLatencies(**kw)


def test_latency_json(tmp_path):
    path = tmp_path / "lat.json"
    path.write_text(json.dumps({"load": 7, "mma": 3}))
    assert UnitLatencies.from_json(path) == UnitLatencies(load=7, mma=3)
    with pytest.raises(ValueError):
        UnitLatencies.from_dict({"bogus": 1})


def test_schedule_round_trip_and_determinism():
    s = attention_schedule(300, 2)
    s2 = PipelineSchedule.from_dict(json.loads(json.dumps(s.to_dict())))
    assert s2.stages == s.stages and s2.meta == s.meta
    a, b = simulate(s, UnitLatencies()), simulate(s2, UnitLatencies())
    assert (a.total, a.busy, a.starts) == (b.total, b.busy, b.starts)
    assert json.loads(report_json({"r": a}))["r"]["total_cycles"] == a.total


def test_attention_bubbles():
    s = attention_schedule(1024)
    assert attention_bubbles(s, UnitLatencies(lds=2, i2f=4, mma=8))["steady"] == 0.0
    assert attention_bubbles(s, UnitLatencies(lds=3, i2f=5, mma=8))["steady"] == 0.0
    assert attention_bubbles(s, UnitLatencies(lds=6, i2f=10, mma=8))["steady"] == 0.5
    short = attention_bubbles(attention_schedule(40), UnitLatencies())
    assert short["total"] > 0


def test_attention_schedule_shape():
    s = attention_schedule(130)
    assert s.meta["macro_tiles"] == 3 and s.count("prefetch") == 3
    assert s.count("feed") == 3 * 8 and s.count("mma") == 24


lat_st = st.builds(UnitLatencies, load=st.integers(0, 40), lds=st.integers(0, 40),
                   i2f=st.integers(0, 40), mma=st.integers(0, 40), fma=st.integers(0, 40),
                   depth=st.integers(1, 5))


@given(lat_st, st.integers(1, 40), st.booleans())
def test_pipelined_never_exceeds_serial(lat, tiles, attn):
    s = attention_schedule(16 * tiles, lat.depth) if attn else gemm_schedule(tiles, lat.depth)
    rep = simulate(s, lat)
    assert rep.total <= rep.serial
    assert rep.total >= max(rep.busy.values())


@given(lat_st, st.integers(1, 30), st.sampled_from(["load", "lds", "i2f", "mma", "fma"]),
       st.integers(1, 20))
def test_monotone_in_each_latency(lat, tiles, field, bump):
    s = gemm_schedule(tiles, lat.depth)
    slower = lat.replace(**{field: getattr(lat, field) + bump})
    assert simulate(s, slower).total >= simulate(s, lat).total


@given(st.integers(8, 20), st.integers(1, 12))
def test_steady_bubbles_zero_when_mma_dominates(mma, rest):
    lds = rest // 2
    lat = UnitLatencies(load=10, lds=lds, i2f=min(rest - lds, mma - lds), mma=mma)
    assert lat.lds + lat.i2f <= lat.mma
    assert attention_bubbles(attention_schedule(512, 3), lat)["steady"] == 0.0


def test_random_latency_sweep_numpy():
    rng = np.random.default_rng(5)
    s = gemm_schedule(32, 3)
    for _ in range(300):
        v = rng.integers(0, 30, 5)
        lat = UnitLatencies(*map(int, v), depth=int(rng.integers(1, 5)))
        rep = simulate(gemm_schedule(32, lat.depth), lat)
        assert rep.total <= rep.serial
    assert s.count() == 98
