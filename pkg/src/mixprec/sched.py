"""Integer-cycle list-scheduling model of the three-unit software pipeline.

Units: LDST (global->shared prefetch), ALU (shared loads, I2F, scale FMA) and
TC (tensor-core MMA). Each unit runs one stage at a time; a stage starts once
its dependencies have finished and its unit is free. Among startable stages
the earliest start wins, then the lower tile index, then TC < ALU < LDST,
then record order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

UNITS = ("TC", "ALU", "LDST")
_RANK = {u: i for i, u in enumerate(UNITS)}
SCHEMA_VERSION = 1


class CyclicSchedule(ValueError):
    pass


@dataclass(frozen=True)
class UnitLatencies:
    load: int = 10
    lds: int = 2
    i2f: int = 4
    mma: int = 8
    fma: int = 1
    depth: int = 3

    def __post_init__(self):
        for name in ("load", "lds", "i2f", "mma", "fma", "depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValueError(f"{name} must be an integer")
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def replace(self, **kw) -> "UnitLatencies":
        return UnitLatencies(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UnitLatencies":
        unknown = set(d) - set(asdict(cls()))
        if unknown:
            raise ValueError(f"unknown latency keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "UnitLatencies":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# stage kind -> latency fields summed into its cost
COSTS = {
    "prefetch": ("load",),
    "dequant": ("lds", "i2f", "fma"),   # LDS + I2F + scale FMA on one fragment
    "lds": ("lds",),                    # f16 baseline: fragment load only
    "feed": ("lds", "i2f"),             # attention micro-tile: LDS + I2F
    "mma": ("mma",),
    "fill": (),
    "drain": (),
}
# instruction-count analog: machine ops a stage stands for
OPS = {"prefetch": 1, "dequant": 3, "lds": 1, "feed": 2, "mma": 1, "fill": 0, "drain": 0}


@dataclass(frozen=True)
class Stage:
    unit: str
    kind: str
    tile: int
    deps: tuple = ()

    def cost(self, lat: UnitLatencies) -> int:
        return sum(getattr(lat, f) for f in COSTS[self.kind])


@dataclass
class PipelineSchedule:
    stages: list = field(default_factory=list)
    depth: int = 3
    meta: dict = field(default_factory=dict)

    def add(self, unit: str, kind: str, tile: int, deps=()) -> int:
        if unit not in UNITS:
            raise ValueError(f"unknown unit {unit!r}")
        if kind not in COSTS:
            raise ValueError(f"unknown stage kind {kind!r}")
        deps = tuple(sorted({int(d) for d in deps if d is not None}))
        if any(d < 0 or d >= len(self.stages) + 1 for d in deps):
            raise ValueError("dependency on an unknown stage")
        self.stages.append(Stage(unit, kind, int(tile), deps))
        return len(self.stages) - 1

    def count(self, kind: str | None = None) -> int:
        return sum(1 for s in self.stages if kind is None or s.kind == kind)

    @property
    def instructions(self) -> int:
        return sum(OPS[s.kind] for s in self.stages)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "depth": self.depth, "meta": self.meta,
                "stages": [{"unit": s.unit, "kind": s.kind, "tile": s.tile, "deps": list(s.deps)}
                           for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSchedule":
        s = cls([], int(d.get("depth", 3)), dict(d.get("meta", {})))
        for r in d["stages"]:
            s.stages.append(Stage(r["unit"], r["kind"], int(r["tile"]), tuple(r["deps"])))
        return s


@dataclass
class CycleReport:
    total: int
    busy: dict
    bubbles: dict
    stages: int
    instructions: int
    serial: int
    starts: list = field(default_factory=list, repr=False)
    ends: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"total_cycles": self.total, "busy": self.busy, "bubbles": self.bubbles,
                "stage_count": self.stages, "instructions": self.instructions,
                "serial_cycles": self.serial}


def simulate(s: PipelineSchedule, lat: UnitLatencies) -> CycleReport:
    n = len(s.stages)
    cost = [st.cost(lat) for st in s.stages]
    for i, st in enumerate(s.stages):
        if any(d >= n for d in st.deps):
            raise ValueError(f"stage {i} depends on an unknown stage")
    # topological check first, so cycles are reported as such
    indeg = [len(st.deps) for st in s.stages]
    users = [[] for _ in range(n)]
    for i, st in enumerate(s.stages):
        for d in st.deps:
            users[d].append(i)
    frontier = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while frontier:
        i = frontier.pop()
        seen += 1
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                frontier.append(u)
    if seen != n:
        raise CyclicSchedule("schedule dependencies contain a cycle")

    start = [None] * n
    end = [None] * n
    free = {u: 0 for u in UNITS}
    waiting = [len(st.deps) for st in s.stages]
    ready = {i for i in range(n) if waiting[i] == 0}
    while ready:
        best = None
        for i in ready:
            st = s.stages[i]
            est = max([free[st.unit]] + [end[d] for d in st.deps])
            key = (est, st.tile, _RANK[st.unit], i)
            if best is None or key < best:
                best = key
        est, _, _, i = best
        st = s.stages[i]
        start[i], end[i] = est, est + cost[i]
        free[st.unit] = end[i]
        ready.remove(i)
        for u in users[i]:
            waiting[u] -= 1
            if waiting[u] == 0:
                ready.add(u)

    total = max(end, default=0)
    busy = {u: 0 for u in UNITS}
    for i, st in enumerate(s.stages):
        busy[st.unit] += cost[i]
    return CycleReport(total, busy, {u: total - busy[u] for u in UNITS}, n,
                       s.instructions, sum(cost), start, end)


def in_flight_prefetches(s: PipelineSchedule, rep: CycleReport) -> int:
    """Max prefetches whose tile has been fetched but not yet released by its last MMA."""
    release = {}
    for i, st in enumerate(s.stages):
        if st.kind == "mma":
            release[st.tile] = max(release.get(st.tile, 0), rep.ends[i])
    events = []
    for i, st in enumerate(s.stages):
        if st.kind == "prefetch":
            events.append((rep.starts[i], 1))
            events.append((release.get(st.tile, rep.ends[i]), -1))
    live = worst = 0
    for _, delta in sorted(events):
        live += delta
        worst = max(worst, live)
    return worst


# -- schedule builders --------------------------------------------------------


def gemm_schedule(k_tiles: int, depth: int = 3, mixed: bool = True,
                  operand_buffers: int = 2) -> PipelineSchedule:
    """Mainloop over ``k_tiles``: prefetch, dequant (or plain LDS) and MMA per tile.

    prefetch i waits for tile i-depth to be released by its MMA; the fragment
    load of tile i waits for MMA i-operand_buffers (register double buffering).
    """
    if k_tiles < 1 or depth < 1:
        raise ValueError("need k_tiles >= 1 and depth >= 1")
    s = PipelineSchedule(depth=depth, meta={"workload": "gemm", "k_tiles": k_tiles,
                                            "mixed": mixed})
    fill = s.add("LDST", "fill", -1)
    mma = []
    for i in range(k_tiles):
        pre = s.add("LDST", "prefetch", i,
                    [fill] + ([mma[i - depth]] if i >= depth else []))
        deps = [pre] + ([mma[i - operand_buffers]] if i >= operand_buffers else [])
        feed = s.add("ALU", "dequant" if mixed else "lds", i, deps)
        mma.append(s.add("TC", "mma", i, [feed] + ([mma[-1]] if mma else [])))
    s.add("TC", "drain", k_tiles, [mma[-1]])
    return s


def attention_schedule(tokens: int, depth: int = 3, macro: int = 64, micro: int = 16,
                       operand_buffers: int = 2) -> PipelineSchedule:
    """Decode-step KV loop: per macro-tile one prefetch, then K and V phases of
    micro-tiles, each a feed (LDS + I2F on ALU) and an MMA on TC."""
    if tokens < 1 or depth < 1:
        raise ValueError("need tokens >= 1 and depth >= 1")
    n_macro = -(-tokens // macro)
    per_phase = macro // micro
    s = PipelineSchedule(depth=depth, meta={"workload": "attention", "tokens": tokens,
                                            "macro_tiles": n_macro,
                                            "micro_tiles_per_phase": per_phase})
    fill = s.add("LDST", "fill", -1)
    release, mma = [], []
    for m in range(n_macro):
        pre = s.add("LDST", "prefetch", m, [fill] + ([release[m - depth]] if m >= depth else []))
        for _phase in ("K", "V"):
            for _ in range(per_phase):
                deps = [pre] + ([mma[-operand_buffers]] if len(mma) >= operand_buffers else [])
                feed = s.add("ALU", "feed", m, deps)
                mma.append(s.add("TC", "mma", m, [feed] + ([mma[-1]] if mma else [])))
        release.append(mma[-1])
    s.add("TC", "drain", n_macro, [mma[-1]])
    return s


# -- reports --------------------------------------------------------------------


def serial_report(s: PipelineSchedule, lat: UnitLatencies) -> CycleReport:
    """Same workload with overlap disabled: every stage back to back."""
    rep = simulate(s, lat)
    total = rep.serial
    return CycleReport(total, rep.busy, {u: total - rep.busy[u] for u in UNITS},
                       rep.stages, rep.instructions, rep.serial)


def compare_overlap(k_tiles: int, lat: UnitLatencies | None = None) -> dict:
    """Mixed-precision vs f16-baseline mainloops of the same GEMM."""
    lat = lat or UnitLatencies()
    mixed = gemm_schedule(k_tiles, lat.depth, mixed=True)
    base = gemm_schedule(k_tiles, lat.depth, mixed=False)
    rm, rb = simulate(mixed, lat), simulate(base, lat)
    return {
        "pipelined": rm,
        "serial": serial_report(mixed, lat),
        "baseline": rb,
        "instr_ratio": rm.instructions / rb.instructions,
        "cycle_ratio": rm.total / rb.total if rb.total else 1.0,
    }


def attention_bubbles(s: PipelineSchedule, lat: UnitLatencies, rep: CycleReport | None = None) -> dict:
    """TC bubble fractions.

    steady: idle share of the window from the first to the last MMA start
    (fill and drain excluded); total: idle share of the whole run. Steady
    bubbles vanish when mma >= lds + i2f, depth >= 3 and the load of one
    macro-tile fits under its tensor-core work; load-bound runs stay idle.
    """
    rep = rep or simulate(s, lat)
    tc = sorted((rep.starts[i], rep.ends[i]) for i, st in enumerate(s.stages) if st.kind == "mma")
    total_busy = sum(e - b for b, e in tc)
    total_frac = 1 - total_busy / rep.total if rep.total else 0.0
    if len(tc) < 2 or tc[-1][0] == tc[0][0]:
        return {"steady": 0.0, "total": total_frac}
    lo, hi = tc[0][0], tc[-1][0]
    busy = sum(max(0, min(e, hi) - max(b, lo)) for b, e in tc)
    return {"steady": 1 - busy / (hi - lo), "total": total_frac}


def report_json(obj: dict) -> str:
    def conv(v):
        if isinstance(v, CycleReport):
            return v.to_dict()
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return json.dumps({"schema_version": SCHEMA_VERSION, **conv(obj)}, indent=2, sort_keys=True)
