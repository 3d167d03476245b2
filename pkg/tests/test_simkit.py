import itertools

import numpy as np
import pytest

from kbest.detector import DetectorConfig
from kbest.simkit import (
    CSV_HEADER,
    InsufficientSweepRange,
    LinkConfig,
    fixed_float_degradation,
    gray_levels,
    interpolate_snr,
    ml_detect,
    ml_detect_batch,
    noise_power_for_snr,
    qam_demodulate,
    qam_modulate,
    run_link,
    sample_channel,
    sample_noise,
    sweep,
    symbol_energy,
)


def all_bits(nbits):
    return np.array(list(itertools.product([0, 1], repeat=nbits)))


class TestQam:
    def test_4qam_table(self):
        assert qam_modulate([0, 0], 4)[0] == 1 + 1j
        assert qam_modulate([1, 0], 4)[0] == -1 + 1j
        assert qam_modulate([1, 1], 4)[0] == -1 - 1j

    def test_64qam_axis_table(self):
        expected = {"000": -7, "001": -5, "011": -3, "010": -1,
                    "110": 1, "111": 3, "101": 5, "100": 7}
        for label, level in expected.items():
            assert gray_levels(64)[int(label, 2)] == level
        assert qam_modulate([0] * 6, 64)[0] == -7 - 7j
        assert qam_modulate([1, 0, 0, 0, 1, 0], 64)[0] == 7 - 1j

    @pytest.mark.parametrize("m", [4, 16, 64])
    def test_round_trip_exhaustive(self, m):
        nb = int(np.log2(m))
        bits = all_bits(nb)
        s = qam_modulate(bits, m)[:, 0]
        assert len(set(s)) == m
        assert np.array_equal(qam_demodulate(s[:, None], m), bits)
        assert np.array_equal(qam_demodulate(s, m), bits.ravel())

    @pytest.mark.parametrize("m", [4, 16, 64])
    def test_gray_neighbours_differ_by_one_bit(self, m):
        table = gray_levels(m)
        order = np.argsort(table)
        for a, b in zip(order, order[1:]):
            assert bin(int(a) ^ int(b)).count("1") == 1

    def test_demodulate_clamps(self):
        assert qam_demodulate(np.array([9.3 - 20j]), 64).tolist() == [1, 0, 0, 0, 0, 0]

    def test_bad_length(self):
        with pytest.raises(ValueError):
            qam_modulate([0, 1, 0], 16)

    def test_energy(self):
        rng = np.random.default_rng(0)
        s = qam_modulate(rng.integers(0, 2, (100_000, 6)), 64)
        assert abs(np.mean(np.abs(s) ** 2) - 42) <= 0.5
        assert symbol_energy(64) == 42


class TestRandom:
    def test_channel_statistics(self):
        H = sample_channel(np.random.default_rng(1), 4, 4, 25_000)
        assert abs(np.mean(np.abs(H) ** 2) - 1) <= 0.02
        assert abs(H.mean()) <= 0.02
        assert abs(np.var(H.real) - 0.5) <= 0.01

    def test_noise_statistics(self):
        w = sample_noise(np.random.default_rng(2), 4, 3.0, 25_000)
        assert abs(np.mean(np.abs(w) ** 2) - 3.0) <= 0.06
        assert np.all(sample_noise(np.random.default_rng(2), 5, 0.0) == 0)
        with pytest.raises(ValueError):
            sample_noise(np.random.default_rng(2), 5, -1.0)

    def test_determinism(self):
        a = sample_channel(np.random.default_rng(7), 8, 8)
        b = sample_channel(np.random.default_rng(7), 8, 8)
        assert np.array_equal(a, b)

    def test_snr_definition(self):
        assert noise_power_for_snr(10.0, 8, 64) == pytest.approx(8 * 42 / 10)


class TestMl:
    def test_noiseless(self):
        rng = np.random.default_rng(3)
        H = sample_channel(rng, 2, 2)
        s = np.array([1 - 3j, -3 + 3j])
        assert np.array_equal(ml_detect(H @ s, H, 16), s)

    def test_identity_nearest(self):
        assert np.array_equal(ml_detect(np.array([0.9 - 1.1j, -1.05 + 0.02j]), np.eye(2), 4),
                              [1 - 1j, -1 + 1j])

    def test_against_independent_enumeration(self):
        rng = np.random.default_rng(4)
        pts = [complex(a, b) for a in (-1, 1) for b in (-1, 1)]
        for _ in range(200):
            H = sample_channel(rng, 2, 2)
            y = H @ rng.choice(pts, 2) + sample_noise(rng, 2, 2.0)
            best, best_d = None, np.inf
            for s0 in pts:
                for s1 in pts:
                    r = y - H @ np.array([s0, s1])
                    d = float(np.vdot(r, r).real)
                    if d < best_d:
                        best, best_d = (s0, s1), d
            assert tuple(ml_detect(y, H, 4)) == best

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(5)
        H = sample_channel(rng, 2, 2, 50)
        y = rng.normal(size=(50, 2)) * 3 + 0j
        out = ml_detect_batch(y, H, 16)
        assert all(np.array_equal(out[b], ml_detect(y[b], H[b], 16)) for b in range(50))

    def test_guard(self):
        with pytest.raises(ValueError):
            ml_detect(np.zeros(4), np.eye(4), 64)


class TestLink:
    def small(self, **kw):
        det = DetectorConfig(n_t=2, n_r=2, m=16, k=4, rlimit=4)
        base = dict(detector=det, snr_db_list=(6, 10, 14), trials_per_snr=2000, seed=11,
                    block_size=500)
        base.update(kw)
        return LinkConfig(**base)

    def test_noiseless_ber_zero(self):
        rep = run_link(self.small(noiseless=True))
        assert all(p.bit_errors == 0 and p.trials == 2000 for p in rep.points)

    def test_report_bookkeeping(self):
        rep = run_link(self.small())
        for p in rep.points:
            assert p.bits == p.trials * 8
            assert 0 <= p.ber <= 1 and p.ber == p.bit_errors / p.bits
            assert p.mean_nodes <= 2 * 4 * 5 - 2
            assert p.discarded == 0
        text = rep.to_csv()
        assert text.splitlines()[0] == CSV_HEADER
        assert len(text.splitlines()) == 4

    def test_mean_nodes_below_budget(self):
        cfg = LinkConfig(DetectorConfig(), snr_db_list=(25,), trials_per_snr=500, seed=1)
        p = run_link(cfg).points[0]
        assert p.mean_nodes < 152

    def test_deterministic_and_thread_invariant(self):
        a = run_link(self.small()).to_csv()
        b = run_link(self.small()).to_csv()
        c = run_link(self.small(threads=3)).to_csv()
        assert a == b == c

    def test_seed_changes_stream(self):
        assert run_link(self.small()).to_csv() != run_link(self.small(seed=12)).to_csv()

    def test_snr_monotone(self):
        cfg = self.small(snr_db_list=(4, 8, 12, 16), trials_per_snr=10_000, block_size=2500)
        rep = run_link(cfg)
        ber = rep.ber
        n = rep.points[0].bits
        for a, b in zip(ber, ber[1:]):
            sigma = np.sqrt(a * (1 - a) / n + b * (1 - b) / n)
            assert b <= a + 3 * sigma

    def test_kbest_close_to_ml_2x2(self):
        det = DetectorConfig(n_t=2, n_r=2, m=4, k=16, rlimit=17)
        cfg = LinkConfig(det, snr_db_list=(10,), trials_per_snr=4000, seed=5)
        kb, ml = sweep(cfg, [det, "ml"])
        assert ml.points[0].bit_errors > 0
        assert kb.points[0].ber <= 1.2 * ml.points[0].ber

    def test_detectors_must_share_shape(self):
        with pytest.raises(ValueError):
            sweep(self.small(), [DetectorConfig(n_t=3, n_r=3, m=16)])

    @pytest.mark.parametrize(
        "kw", [dict(trials_per_snr=0), dict(snr_db_list=()), dict(channel_model="tdl"),
               dict(block_size=0), dict(threads=0)]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            self.small(**kw)


class TestDegradation:
    def test_interpolate(self):
        snr = [0, 10, 20]
        ber = [1e-1, 1e-2, 1e-4]
        assert interpolate_snr(snr, ber, 1e-2) == 10
        assert interpolate_snr(snr, ber, 1e-3) == pytest.approx(15)
        assert interpolate_snr(snr, ber, 10 ** -1.5) == pytest.approx(5)

    @pytest.mark.parametrize("target", [1.0, 1e-6])
    def test_interpolate_not_bracketed(self, target):
        with pytest.raises(InsufficientSweepRange):
            interpolate_snr([0, 10], [1e-1, 1e-3], target)

    def test_zero_tail_not_bracketed(self):
        with pytest.raises(InsufficientSweepRange):
            interpolate_snr([0, 10], [1e-1, 0.0], 1e-3)

    def wide_cfg(self):
        det = DetectorConfig(n_t=4, n_r=4, m=16, k=4, rlimit=4)
        return LinkConfig(det, snr_db_list=(14, 17, 20, 23), trials_per_snr=20_000, seed=3,
                          block_size=5000)

    def test_identical_arithmetic_zero_gap(self):
        cfg = LinkConfig(DetectorConfig(n_t=2, n_r=2, m=16), snr_db_list=(10, 16, 22),
                         trials_per_snr=3000, seed=2)
        r = fixed_float_degradation(cfg, 1e-2, fixed="float")
        assert r.gap_db == 0.0
        r = fixed_float_degradation(cfg, 1e-2, fixed="s1.7.8", reference="s1.7.8")
        assert r.gap_db == 0.0

    def test_wide_format_gap(self):
        r = fixed_float_degradation(self.wide_cfg(), 1e-2, fixed="s1.15.16")
        assert abs(r.gap_db) <= 0.05

    def test_insufficient_range(self):
        cfg = LinkConfig(DetectorConfig(n_t=2, n_r=2, m=4), snr_db_list=(30, 35),
                         trials_per_snr=500, seed=2)
        with pytest.raises(InsufficientSweepRange):
            fixed_float_degradation(cfg, 1e-3)
