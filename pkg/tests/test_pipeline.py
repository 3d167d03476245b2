import numpy as np
import pytest

from kbest.detector import DetectorConfig, TraceEvent, detect
from kbest.pipeline import (
    FILL,
    SORT,
    ScheduleError,
    StageSchedule,
    pipeline_metrics,
    pipeline_run,
    replay_candidates,
    report,
    schedule_level,
    trace_to_csv,
)

REFERENCE = DetectorConfig()  # 8x8, 64-QAM, K = Rlimit = 4


def agree4(x, ref):
    """Agreement to 4 significant figures: relative error below half a unit
    in the 4th digit."""
    return abs(x - ref) <= 5e-4 * abs(ref)


def random_trace(seed, cfg):
    rng = np.random.default_rng(seed)
    n = cfg.n_t
    R = np.triu(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    R[np.diag_indices(n)] = np.abs(rng.normal(size=n)) + 0.5
    z = rng.integers(-3, 4, n) + 1j * rng.integers(-3, 4, n)
    y = R @ z + rng.normal(size=n) + 1j * rng.normal(size=n)
    return detect(y, R, cfg, trace=True)


class TestStageSchedule:
    @pytest.mark.parametrize("k, rl, cycles", [(4, 4, 8), (1, 1, 2), (2, 3, 5)])
    def test_cycles(self, k, rl, cycles):
        s = StageSchedule(k, rl)
        assert s.cycles_per_level == cycles
        assert s.phases() == [FILL] * k + [SORT] * rl


class TestScheduleLevel:
    @pytest.mark.parametrize("k, rl", [(4, 4), (1, 1), (2, 3), (5, 2)])
    def test_fits_level_window(self, k, rl):
        cfg = DetectorConfig(n_t=4, n_r=4, m=16, k=k, rlimit=rl)
        d = random_trace(0, cfg)
        for level in range(4):
            evs = [e for e in d.trace if e.level == level]
            recs = schedule_level(evs, cfg, start=100)
            assert all(100 <= r.cycle < 100 + k + rl for r in recs)
            for r in recs:
                assert 1 <= r.enable_index <= k
                assert r.phase == (FILL if r.kind == "real" else SORT)
                assert (r.cycle - 100 < k) == (r.phase == FILL)

    def test_enable_index_follows_slot(self):
        d = random_trace(1, REFERENCE)
        evs = [e for e in d.trace if e.level == 3]
        recs = schedule_level(evs, REFERENCE)
        for e, r in zip(evs, recs):
            if e.kind != "real":
                assert r.enable_index == e.slot + 1

    def test_over_budget_rejected(self):
        cfg = DetectorConfig(n_t=2, n_r=2, m=4, k=1, rlimit=2)
        evs = [TraceEvent(0, 0, "real", t, 0, 0j, 0.0) for t in range(3)]
        with pytest.raises(ScheduleError):
            schedule_level(evs, cfg)

    def test_malformed_rejected(self):
        cfg = DetectorConfig(n_t=2, n_r=2, m=4, k=2, rlimit=2)
        with pytest.raises(ScheduleError):
            schedule_level([TraceEvent(0, 0, "imag", 0, 1, 0j, 0.0, 0)], cfg)
        with pytest.raises(ScheduleError):
            schedule_level([TraceEvent(0, 0, "bogus", 0, 0, 0j, 0.0)], cfg)


class TestPipelineRun:
    def test_single_vector(self):
        run = pipeline_run(1, REFERENCE)
        assert run.total_cycles == 64
        assert run.completion_cycles == [64]

    def test_hundred_vectors(self):
        run = pipeline_run(100, REFERENCE)
        assert run.total_cycles == 107 * 8 == 856
        assert run.entry_cycles[:3] == [0, 8, 16]

    @pytest.mark.parametrize("k, rl, n_t", [(4, 4, 8), (2, 3, 4), (1, 1, 2)])
    def test_steady_state_gap(self, k, rl, n_t):
        cfg = DetectorConfig(n_t=n_t, n_r=n_t, m=16, k=k, rlimit=rl)
        run = pipeline_run(2 * n_t + 5, cfg)
        assert set(run.completion_gaps) == {k + rl}
        assert run.total_cycles == (2 * n_t + 5 - 1 + n_t) * (k + rl)

    def test_occupancy_and_handoffs(self):
        run = pipeline_run(3, REFERENCE)
        assert len(run.occupancy) == 3 * 8
        # one vector per stage per window: no two vectors share a stage interval
        for s in range(1, 9):
            spans = sorted((a, b) for st_, _, a, b in run.occupancy if st_ == s)
            assert all(b1 <= a2 for (_, b1), (a2, _) in zip(spans, spans[1:]))
        assert len(run.handoffs) == 3 * 7
        assert all(1 <= reg <= 7 for _, reg, _ in run.handoffs)

    def test_throughput_limit(self):
        run = pipeline_run(100_000, REFERENCE)
        assert run.throughput_bits_per_cycle(48) == pytest.approx(48 / 8, rel=1e-3)

    def test_bad_input(self):
        with pytest.raises(ValueError):
            pipeline_run(0, REFERENCE)
        with pytest.raises(ValueError):
            pipeline_run(2, REFERENCE, traces=[[]])

    @pytest.mark.parametrize("k, rl", [(4, 4), (2, 3), (6, 2), (1, 1)])
    def test_replay_reproduces_candidates(self, k, rl):
        cfg = DetectorConfig(n_t=5, n_r=5, m=16, k=k, rlimit=rl)
        dets = [random_trace(s, cfg) for s in range(12)]
        run = pipeline_run(len(dets), cfg, [d.trace for d in dets])
        for v, d in enumerate(dets):
            recs = [r for r in run.records if r.vector == v]
            got = replay_candidates(recs, cfg)
            assert got == [(c.symbols, c.ped) for c in d.candidates]

    def test_trace_csv(self):
        d = random_trace(3, REFERENCE)
        run = pipeline_run(1, REFERENCE, [d.trace])
        text = trace_to_csv(run.records)
        lines = text.splitlines()
        assert lines[0] == "cycle,stage,phase,enable_index,ped"
        assert len(lines) == 1 + len(d.trace)
        cycles = [int(ln.split(",")[0]) for ln in lines[1:]]
        assert cycles == sorted(cycles) and cycles[-1] < 64


class TestReport:
    def test_reference_numbers(self):
        r = report(181.8e6, REFERENCE, 63.75)
        assert r.bits_per_vector == 48 and r.cycles_per_level == 8 and r.stages == 8
        assert r.throughput_bps == pytest.approx(1090.8e6, rel=1e-12)
        assert agree4(r.latency_per_level_s, 0.044e-6)
        assert agree4(r.clock_period_s, 5.5e-9)
        assert r.nhe == pytest.approx(63.75 / 1090.8, rel=1e-12)

    def test_unit_case(self):
        r = pipeline_metrics(1.0, 1, 1)
        assert r.throughput_bps == 1.0
        assert r.latency_per_level_s == 1.0

    def test_linearity(self):
        a = report(100e6, REFERENCE, 50.0)
        b = report(200e6, REFERENCE, 50.0)
        assert b.throughput_bps == 2 * a.throughput_bps
        assert b.latency_per_level_s == a.latency_per_level_s / 2
        assert b.total_latency_s == 8 * b.latency_per_level_s

    @pytest.mark.parametrize("f", [0.0, -1.0, float("nan")])
    def test_bad_frequency(self, f):
        with pytest.raises(ValueError):
            report(f, REFERENCE, 1.0)

    def test_outputs(self):
        r = report(181.8e6, REFERENCE, 63.75)
        kv = dict(line.split("=", 1) for line in r.to_keyvalue().splitlines())
        assert float(kv["throughput_bps"]) == r.throughput_bps
        assert r.csv_header().split(",") == list(kv)
        assert [float(v) for v in r.csv_row().split(",")] == [float(v) for v in kv.values()]
