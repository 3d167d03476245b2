"""Cycle-level model of the pipelined detector.

One hardware unit per tree level; a level takes ``k + rlimit`` cycles: ``k``
register-fill cycles (one parent's real-axis batch each) followed by
``rlimit`` sort-and-expand cycles.  Units are chained through registers
Reg1..Reg(n_t - 1), so in steady state one vector leaves every
``k + rlimit`` cycles.

The model re-times detector trace events; it never recomputes a PED.
Frequency and gate count are inputs.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field

from .detector import DetectorConfig, node_budget

__all__ = [
    "ScheduleError",
    "StageSchedule",
    "FsmRecord",
    "PipelineRun",
    "PipelineReport",
    "schedule_level",
    "pipeline_run",
    "replay_candidates",
    "pipeline_metrics",
    "report",
    "trace_to_csv",
]

FILL = "fill"
SORT = "sort-and-expand"


class ScheduleError(RuntimeError):
    """A trace does not fit the hardware schedule (detector bug)."""


@dataclass(frozen=True)
class StageSchedule:
    k_cycles: int
    rlimit_cycles: int

    @property
    def cycles_per_level(self) -> int:
        return self.k_cycles + self.rlimit_cycles

    @classmethod
    def from_config(cls, cfg: DetectorConfig) -> "StageSchedule":
        return cls(cfg.k, cfg.rlimit)

    def phases(self) -> list:
        return [FILL] * self.k_cycles + [SORT] * self.rlimit_cycles


@dataclass(frozen=True)
class FsmRecord:
    cycle: int
    stage: int
    phase: str
    enable_index: int
    ped: float
    kind: str = ""
    level: int = 0
    symbol: complex = 0j
    vector: int = 0
    parent: int = 0


def schedule_level(events, cfg: DetectorConfig, *, stage: int = 1, start: int = 0,
                   vector: int = 0) -> list:
    """Assign one level's trace events to cycles.

    Real-axis events of parent ``p`` land in fill cycle ``p``; the ``j``-th
    pop (and the imaginary-axis refill it triggers) lands in sort cycle
    ``j * rlimit // k``.  ``enable_index`` is the 1-based register: the
    parent's for real-axis events, the frontier slot's otherwise.
    """
    events = list(events)
    per_level, _ = node_budget(cfg)
    evaluated = sum(1 for e in events if e.kind in ("real", "imag"))
    if evaluated > per_level:
        raise ScheduleError(f"{evaluated} node evaluations exceed the budget {per_level}")
    sched = StageSchedule.from_config(cfg)
    out = []
    pops = -1
    for ev in events:
        if ev.kind == "real":
            if ev.parent >= cfg.k:
                raise ScheduleError(f"parent index {ev.parent} has no register")
            cyc = start + ev.parent
            phase = FILL
        elif ev.kind == "pop":
            pops += 1
            if pops >= cfg.k:
                raise ScheduleError("more than k pops in one level")
            cyc = start + sched.k_cycles + (pops * sched.rlimit_cycles) // cfg.k
            phase = SORT
        elif ev.kind == "imag":
            if pops < 0:
                raise ScheduleError("imaginary expansion before any pop")
            cyc = start + sched.k_cycles + (pops * sched.rlimit_cycles) // cfg.k
            phase = SORT
        else:
            raise ScheduleError(f"unknown event kind {ev.kind!r}")
        reg = ev.parent if ev.kind == "real" else ev.slot
        out.append(FsmRecord(cyc, stage, phase, reg + 1, ev.ped, ev.kind,
                             ev.level, ev.symbol, vector, ev.parent))
    return out


def replay_candidates(records, cfg: DetectorConfig) -> list:
    """Rebuild the final candidate list of one vector from its pop records.

    Returns ``[(symbols, ped), ...]`` best first, ``symbols`` ordered from
    level 0 upward as in :class:`~kbest.detector.SearchNode`.
    """
    by_level: dict = {}
    for r in records:
        if r.kind == "pop":
            by_level.setdefault(r.level, []).append(r)
    parents = [((), 0.0)]
    for level in range(cfg.n_t - 1, -1, -1):
        pops = sorted(by_level.get(level, []), key=lambda r: r.cycle)
        # stable sort keeps pop order within a shared cycle
        parents = [((r.symbol,) + parents[r.parent][0], r.ped) for r in pops]
    return parents


@dataclass
class PipelineRun:
    schedule: StageSchedule
    n_stages: int
    n_vectors: int
    entry_cycles: list
    completion_cycles: list
    occupancy: list          # (stage, vector, first_cycle, last_cycle_exclusive)
    handoffs: list           # (vector, register, cycle)
    records: list = field(default_factory=list)

    @property
    def total_cycles(self) -> int:
        return self.completion_cycles[-1]

    @property
    def completion_gaps(self) -> list:
        c = self.completion_cycles
        return [b - a for a, b in zip(c, c[1:])]

    def throughput_bits_per_cycle(self, bits_per_vector: int) -> float:
        return bits_per_vector * self.n_vectors / self.total_cycles


def pipeline_run(n_vectors: int, cfg: DetectorConfig, traces=None) -> PipelineRun:
    """Stream ``n_vectors`` through ``n_t`` chained level units.

    ``traces`` optionally holds one detector trace per vector; its events are
    placed on the global cycle axis.
    """
    if n_vectors < 1:
        raise ValueError("n_vectors must be >= 1")
    if traces is not None and len(traces) != n_vectors:
        raise ValueError("need one trace per vector")
    sched = StageSchedule.from_config(cfg)
    cpl = sched.cycles_per_level
    n = cfg.n_t
    entry, done, occ, hand, recs = [], [], [], [], []
    for v in range(n_vectors):
        entry.append(v * cpl)
        done.append((v + n) * cpl)
        for s in range(1, n + 1):
            t0 = (v + s - 1) * cpl
            occ.append((s, v, t0, t0 + cpl))
            if s < n:
                hand.append((v, s, t0 + cpl))
        if traces is not None:
            levels: dict = {}
            for ev in traces[v]:
                levels.setdefault(ev.level, []).append(ev)
            for level, evs in levels.items():
                s = n - level
                recs.extend(schedule_level(evs, cfg, stage=s, start=(v + s - 1) * cpl, vector=v))
    recs.sort(key=lambda r: (r.cycle, r.stage))
    return PipelineRun(sched, n, n_vectors, entry, done, occ, hand, recs)


def trace_to_csv(records) -> str:
    buf = io.StringIO()
    buf.write("cycle,stage,phase,enable_index,ped\n")
    for r in records:
        buf.write(f"{r.cycle},{r.stage},{r.phase},{r.enable_index},{r.ped!r}\n")
    return buf.getvalue()


@dataclass(frozen=True)
class PipelineReport:
    frequency_hz: float
    clock_period_s: float
    cycles_per_level: int
    stages: int
    bits_per_vector: int
    latency_per_level_s: float
    total_latency_s: float
    throughput_bps: float
    gate_count_kg: float
    nhe: float

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @staticmethod
    def csv_header() -> str:
        return ",".join(PipelineReport.__dataclass_fields__)

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in asdict(self).values())


def pipeline_metrics(frequency_hz: float, bits_per_vector: int, cycles_per_level: int,
                     stages: int = 1, gate_count_kg: float = 0.0) -> PipelineReport:
    if not frequency_hz > 0:
        raise ValueError("frequency must be positive")
    if bits_per_vector < 1 or cycles_per_level < 1 or stages < 1:
        raise ValueError("bits, cycles and stages must be positive")
    if gate_count_kg < 0:
        raise ValueError("gate count must be non-negative")
    lat = cycles_per_level / frequency_hz
    thr = bits_per_vector * frequency_hz / cycles_per_level
    return PipelineReport(
        frequency_hz=frequency_hz,
        clock_period_s=1.0 / frequency_hz,
        cycles_per_level=cycles_per_level,
        stages=stages,
        bits_per_vector=bits_per_vector,
        latency_per_level_s=lat,
        total_latency_s=stages * lat,
        throughput_bps=thr,
        gate_count_kg=gate_count_kg,
        nhe=gate_count_kg / (thr / 1e6),
    )


def report(frequency_hz: float, cfg: DetectorConfig, gate_count_kg: float) -> PipelineReport:
    """Throughput, latency and normalised hardware efficiency
    (kG per Mb/s) for ``cfg`` clocked at ``frequency_hz``."""
    return pipeline_metrics(
        frequency_hz,
        cfg.n_t * int(math.log2(cfg.m)),
        StageSchedule.from_config(cfg).cycles_per_level,
        cfg.n_t,
        gate_count_kg,
    )
