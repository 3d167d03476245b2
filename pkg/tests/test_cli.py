import json

import numpy as np
import pytest

from kbest.cli import main
from kbest.linalg import write_matrix
from kbest.simkit import qam_modulate, sample_channel

SMALL_CFG = """\
[detector]
n_t = 2
n_r = 2
m = 4
k = 4
rlimit = 4

[link]
snr_db = 4 8
trials = 400
seed = 9
block_size = 200
"""


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_CFG)
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestDetect:
    def test_identity_noiseless(self, tmp_path, capsys):
        write_matrix(tmp_path / "H.txt", np.eye(2))
        write_matrix(tmp_path / "y.txt", np.array([[1 - 1j], [-1 + 1j]]))
        code, out, _ = run(["detect", "--channel", tmp_path / "H.txt",
                            "--received", tmp_path / "y.txt", "--mod", 4, "--no-mmse"], capsys)
        assert code == 0
        res = kv(out)
        assert res["s_hat"] == "1-1i -1+1i"
        assert float(res["ped"]) == 0.0

    def test_8x8_within_budget_and_trace(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        H = sample_channel(rng, 8, 8)
        s = qam_modulate(rng.integers(0, 2, 48), 64)
        write_matrix(tmp_path / "H.txt", H)
        write_matrix(tmp_path / "y.txt", H @ s)
        trace = tmp_path / "trace.csv"
        code, out, _ = run(["detect", "--channel", tmp_path / "H.txt", "--received",
                            tmp_path / "y.txt", "--noise-power", 0.1,
                            "--trace-csv", trace], capsys)
        assert code == 0
        res = kv(out)
        assert int(res["nodes"]) <= int(res["budget"]) == 152
        lines = trace.read_text().splitlines()
        assert lines[0] == "cycle,stage,phase,enable_index,ped"
        # one row per expansion plus one per pop
        assert len(lines) - 1 == int(res["nodes"]) + 8 * 4
        assert int(lines[-1].split(",")[0]) < 64

    def test_malformed_matrix_reports_line(self, tmp_path, capsys):
        (tmp_path / "H.txt").write_text("2 2\n1 0\n0 banana\n")
        write_matrix(tmp_path / "y.txt", np.ones((2, 1)))
        code, _, err = run(["detect", "--channel", tmp_path / "H.txt",
                            "--received", tmp_path / "y.txt"], capsys)
        assert code == 1
        assert "line 3" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(["detect", "--channel", tmp_path / "nope.txt",
                            "--received", tmp_path / "nope.txt"], capsys)
        assert code == 3 and err

    def test_singular_channel(self, tmp_path, capsys):
        write_matrix(tmp_path / "H.txt", np.zeros((2, 2)))
        write_matrix(tmp_path / "y.txt", np.ones((2, 1)))
        code, _, err = run(["detect", "--channel", tmp_path / "H.txt", "--received",
                            tmp_path / "y.txt", "--no-mmse"], capsys)
        assert code == 2 and err

    def test_length_mismatch(self, tmp_path, capsys):
        write_matrix(tmp_path / "H.txt", np.eye(2))
        write_matrix(tmp_path / "y.txt", np.ones((3, 1)))
        code, _, _ = run(["detect", "--channel", tmp_path / "H.txt",
                          "--received", tmp_path / "y.txt"], capsys)
        assert code == 1


class TestPipeline:
    def test_reference_numbers(self, capsys):
        code, out, _ = run(["pipeline", "--freq-mhz", 181.8, "--gates-kg", 63.75], capsys)
        assert code == 0
        res = kv(out)
        assert res["throughput_mbps"] == "1090.8"
        assert res["latency_per_level_us"] == "0.044"
        assert res["clock_period_ns"] == "5.5"
        lines = out.splitlines()
        header, row = lines[-2], lines[-1]
        assert len(header.split(",")) == len(row.split(","))

    def test_doubling_frequency_doubles_throughput(self, capsys):
        _, a, _ = run(["pipeline", "--freq-mhz", 100], capsys)
        _, b, _ = run(["pipeline", "--freq-mhz", 200], capsys)
        assert float(kv(b)["throughput_bps"]) == 2 * float(kv(a)["throughput_bps"])

    @pytest.mark.parametrize("f", ["0", "-5", "x"])
    def test_bad_frequency(self, f, capsys):
        code, _, err = run(["pipeline", "--freq-mhz", f], capsys)
        assert code == 1 and err


class TestSweepReplay:
    def test_sweep_and_replay_identical(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "ber.csv"
        code, stdout, _ = run(["sweep", cfg_file, "--out", out], capsys)
        assert code == 0
        first = out.read_bytes()
        assert stdout == first.decode()
        man = json.loads((tmp_path / "ber.csv.manifest.json").read_text())
        assert man["command"] == "sweep" and man["config"]["link"]["seed"] == 9
        replayed = tmp_path / "again.csv"
        code, _, _ = run(["replay", tmp_path / "ber.csv.manifest.json", "--out", replayed],
                         capsys)
        assert code == 0
        assert replayed.read_bytes() == first

    def test_seed_precedence(self, cfg_file, tmp_path, capsys, monkeypatch):
        def sweep_csv(*extra):
            out = tmp_path / "s.csv"
            assert run(["sweep", cfg_file, "--out", out, *extra], capsys)[0] == 0
            return out.read_text(), json.loads((tmp_path / "s.csv.manifest.json").read_text())

        base, _ = sweep_csv()
        flag, man = sweep_csv("--seed", 123)
        assert flag != base and man["config"]["link"]["seed"] == 123
        monkeypatch.setenv("KBEST_SEED", "123")
        env, _ = sweep_csv()
        assert env == flag
        both, man = sweep_csv("--seed", 9)
        assert both == base and man["config"]["link"]["seed"] == 9

    def test_threads_do_not_change_output(self, cfg_file, tmp_path, capsys):
        run(["sweep", cfg_file, "--out", tmp_path / "a.csv"], capsys)
        run(["sweep", cfg_file, "--out", tmp_path / "b.csv", "--threads", 2], capsys)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_unknown_config_key(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text(SMALL_CFG + "colour = blue\n")
        code, _, err = run(["sweep", p], capsys)
        assert code == 1 and "colour" in err

    def test_bad_env_seed(self, cfg_file, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("KBEST_SEED", "abc")
        code, _, _ = run(["sweep", cfg_file, "--out", tmp_path / "x.csv"], capsys)
        assert code == 1

    def test_missing_config(self, tmp_path, capsys):
        assert run(["sweep", tmp_path / "none.ini"], capsys)[0] == 3


class TestDegradation:
    def test_degradation_and_replay(self, tmp_path, capsys):
        p = tmp_path / "deg.ini"
        p.write_text(SMALL_CFG.replace("snr_db = 4 8", "snr_db = 2 6 10 14")
                     .replace("trials = 400", "trials = 2000"))
        out = tmp_path / "deg.csv"
        code, stdout, _ = run(["degradation", p, "--target-ber", 1e-2, "--out", out], capsys)
        assert code == 0
        res = kv(stdout)
        assert float(res["gap_db"]) == pytest.approx(
            float(res["snr_fixed_db"]) - float(res["snr_float_db"]), abs=2e-3)
        again = tmp_path / "deg2.csv"
        assert run(["replay", str(out) + ".manifest.json", "--out", again], capsys)[0] == 0
        assert again.read_bytes() == out.read_bytes()

    def test_unbracketed_target(self, cfg_file, capsys):
        code, _, err = run(["degradation", cfg_file, "--target-ber", 1e-9], capsys)
        assert code == 1 and err


class TestAudit:
    def test_audit_within_budget(self, capsys):
        code, out, _ = run(["audit", "--trials", 300, "--seed", 4], capsys)
        assert code == 0
        res = kv(out)
        assert int(res["max_nodes_per_level"].split()[0]) <= 19
        assert int(res["max_nodes_total"].split()[0]) <= 152
        assert res["pop_order_ok"] == "True"

    def test_bad_trials(self, capsys):
        assert run(["audit", "--trials", 0], capsys)[0] == 1


def test_replay_rejects_unknown_command(tmp_path, capsys):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"command": "detect", "config": {}}))
    assert run(["replay", p], capsys)[0] == 1
