"""``kbest`` command line.

Exit codes: 0 success, 1 validation error, 2 numerical failure (singular
channel), 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .detector import DetectorConfig, detect, detect_batch, node_budget, unmap
from .linalg import SingularChannelError, preprocess, preprocess_batch, read_matrix
from .pipeline import pipeline_run, report, trace_to_csv
from .simkit import (
    LinkConfig,
    _draw_block,
    fixed_float_degradation,
    noise_power_for_snr,
    qam_modulate,
    run_link,
    symbol_energy,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


class ConfigError(ValueError):
    pass


def _bool(text, key):
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected a boolean, got {text!r}") from None


def load_config(path) -> LinkConfig:
    """Read a ``[detector]`` / ``[link]`` key=value file."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        try:
            cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping({s: dict(cp[s]) for s in cp.sections()})


def config_from_mapping(sections: dict) -> LinkConfig:
    det = dict(sections.get("detector", {}))
    link = dict(sections.get("link", {}))
    known_det = {"n_t", "n_r", "m", "k", "rlimit", "arithmetic", "mmse", "delta"}
    known_link = {"snr_db", "trials", "seed", "channel_model", "noiseless", "block_size", "threads"}
    for name, keys, known in (("detector", det, known_det), ("link", link, known_link)):
        extra = set(keys) - known
        if extra:
            raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(extra))}")
    try:
        dcfg = DetectorConfig(
            n_t=int(det.get("n_t", 8)),
            n_r=int(det.get("n_r", det.get("n_t", 8))),
            m=int(det.get("m", 64)),
            k=int(det.get("k", 4)),
            rlimit=int(det.get("rlimit", 4)),
            arithmetic=str(det.get("arithmetic", "float")).strip(),
            mmse=_bool(det.get("mmse", "true"), "mmse"),
            delta=float(det.get("delta", 0.75)),
        )
        snrs = [float(v) for v in str(link.get("snr_db", "20")).replace(",", " ").split()]
        return LinkConfig(
            detector=dcfg,
            snr_db_list=tuple(snrs),
            trials_per_snr=int(link.get("trials", 1000)),
            seed=int(link.get("seed", 0)),
            channel_model=str(link.get("channel_model", "iid-rayleigh")).strip(),
            noiseless=_bool(link.get("noiseless", "false"), "noiseless"),
            block_size=int(link.get("block_size", 1000)),
            threads=int(link.get("threads", 1)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_to_mapping(cfg: LinkConfig) -> dict:
    d = cfg.detector
    return {
        "detector": {
            "n_t": d.n_t, "n_r": d.n_r, "m": d.m, "k": d.k, "rlimit": d.rlimit,
            "arithmetic": d.arithmetic_name, "mmse": d.mmse, "delta": d.delta,
        },
        "link": {
            "snr_db": " ".join(repr(s) for s in cfg.snr_db_list),
            "trials": cfg.trials_per_snr, "seed": cfg.seed,
            "channel_model": cfg.channel_model, "noiseless": cfg.noiseless,
            "block_size": cfg.block_size, "threads": cfg.threads,
        },
    }


def _apply_overrides(cfg: LinkConfig, args) -> LinkConfig:
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("KBEST_SEED"):
        try:
            seed = int(os.environ["KBEST_SEED"])
        except ValueError:
            raise ConfigError("KBEST_SEED must be an integer") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, threads=threads)
    return cfg


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _manifest(command, cfg, outputs, extra=None):
    m = {
        "command": command,
        "config": config_to_mapping(cfg),
        "outputs": outputs,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        m.update(extra)
    return m


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_detect(args) -> int:
    H = read_matrix(args.channel)
    y = read_matrix(args.received)
    if 1 not in y.shape:
        raise ConfigError("received file must hold a single row or column")
    y = y.reshape(-1)
    n_r, n_t = H.shape
    if y.shape[0] != n_r:
        raise ConfigError(f"received vector has length {y.shape[0]}, channel has {n_r} rows")
    cfg = DetectorConfig(n_t=n_t, n_r=n_r, m=args.mod, k=args.k, rlimit=args.rlimit,
                         arithmetic=args.arith, mmse=not args.no_mmse)
    sigma = args.signal_variance if args.signal_variance is not None else symbol_energy(args.mod) / 2
    prep = preprocess(H, y, args.noise_power, sigma, mmse=cfg.mmse, delta=cfg.delta)
    res = detect(prep.y_rot, prep.R, cfg, trace=bool(args.trace_csv))
    s_hat = unmap(res.z_hat, prep.T, cfg.m)
    print("s_hat=" + " ".join(f"{z.real:g}{z.imag:+g}i" for z in s_hat))
    print(f"ped={res.best.ped!r}")
    print(f"nodes={res.total_nodes}")
    print(f"budget={node_budget(cfg)[1]}")
    if args.trace_csv:
        run = pipeline_run(1, cfg, [res.trace])
        _write(args.trace_csv, trace_to_csv(run.records))
    return EXIT_OK


def _run_sweep(cfg: LinkConfig, out_path: str, manifest_path: str) -> None:
    rep = run_link(cfg)
    _write(out_path, rep.to_csv())
    man = _manifest("sweep", cfg, {"csv": out_path})
    _write(manifest_path, json.dumps(man, indent=2, sort_keys=True) + "\n")
    return rep


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = args.out or os.path.splitext(args.config)[0] + ".csv"
    man = args.manifest or out + ".manifest.json"
    rep = _run_sweep(cfg, out, man)
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def cmd_replay(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        man = json.load(fh)
    cfg = config_from_mapping(man["config"])
    cmd = man.get("command")
    if cmd == "sweep":
        out = args.out or man["outputs"]["csv"]
        rep = run_link(cfg)
        _write(out, rep.to_csv())
    elif cmd == "degradation":
        out = args.out or man["outputs"]["csv"]
        res = fixed_float_degradation(cfg, man["target_ber"], fixed=man["fixed"])
        _write(out, _degradation_csv(res))
    else:
        raise ConfigError(f"manifest command {cmd!r} cannot be replayed")
    print(out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if not args.freq_mhz > 0:
        raise ConfigError("--freq-mhz must be positive")
    if args.gates_kg < 0:
        raise ConfigError("--gates-kg must be non-negative")
    cfg = DetectorConfig(n_t=args.nt, n_r=args.nt, m=args.mod, k=args.k, rlimit=args.rlimit)
    rep = report(args.freq_mhz * 1e6, cfg, args.gates_kg)
    sys.stdout.write(rep.to_keyvalue())
    print(f"throughput_mbps={rep.throughput_bps / 1e6:.1f}")
    print(f"latency_per_level_us={rep.latency_per_level_s * 1e6:.3f}")
    print(f"clock_period_ns={rep.clock_period_s * 1e9:.1f}")
    print(f"nhe_kg_per_mbps={rep.nhe:.4f}")
    print(rep.csv_header())
    print(rep.csv_row())
    return EXIT_OK


def _degradation_csv(res) -> str:
    lines = ["snr_db,ber_reference,ber_test"]
    for a, b in zip(res.reference.points, res.test.points):
        lines.append(f"{a.snr_db!r},{a.ber!r},{b.ber!r}")
    lines.append(f"# snr_reference={res.snr_reference!r}")
    lines.append(f"# snr_test={res.snr_test!r}")
    lines.append(f"# gap_db={res.gap_db!r}")
    return "\n".join(lines) + "\n"


def cmd_degradation(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    res = fixed_float_degradation(cfg, args.target_ber, fixed=args.fixed)
    if args.out:
        _write(args.out, _degradation_csv(res))
        man = _manifest("degradation", cfg, {"csv": args.out},
                        {"target_ber": args.target_ber, "fixed": args.fixed})
        _write(args.out + ".manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"snr_float_db={res.snr_reference:.3f}")
    print(f"snr_fixed_db={res.snr_test:.3f}")
    print(f"gap_db={res.gap_db:.3f}")
    return EXIT_OK


def cmd_audit(args) -> int:
    """Node-count audit over random channels at one SNR."""
    cfg = DetectorConfig(n_t=args.nt, n_r=args.nt, m=args.mod, k=args.k, rlimit=args.rlimit)
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    seed = args.seed if args.seed is not None else int(os.environ.get("KBEST_SEED", 0))
    per_budget, total_budget = node_budget(cfg)
    link = LinkConfig(cfg, (args.snr_db,), args.trials, seed)
    bits, H, w = _draw_block(seed, 0, args.trials, cfg.n_r, cfg.n_t, cfg.m)
    n0 = noise_power_for_snr(args.snr_db, cfg.n_t, cfg.m)
    y = np.einsum("brt,bt->br", H, qam_modulate(bits, cfg.m)) + np.sqrt(n0) * w
    y_rot, R, _, ok = preprocess_batch(H, y, n0, symbol_energy(cfg.m) / 2)
    res = detect_batch(y_rot[ok], R[ok], link.detector)
    worst_level = int(res.nodes_per_level.max())
    worst_total = int(res.total_nodes.max())
    print(f"trials={int(ok.sum())} discarded={int((~ok).sum())}")
    print(f"max_nodes_per_level={worst_level} budget={per_budget}")
    print(f"max_nodes_total={worst_total} budget={total_budget}")
    print(f"mean_nodes_total={res.total_nodes.mean():.2f}")
    print(f"pop_order_ok={bool(res.pop_order_ok.all())}")
    within = worst_level <= per_budget and worst_total <= total_budget
    return EXIT_OK if within and res.pop_order_ok.all() else EXIT_NUMERICAL


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures (exit 1), not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kbest", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="detect one received vector")
    d.add_argument("--channel", required=True)
    d.add_argument("--received", required=True)
    d.add_argument("--mod", type=int, default=64)
    d.add_argument("--k", type=int, default=4)
    d.add_argument("--rlimit", type=int, default=4)
    d.add_argument("--arith", default="float")
    d.add_argument("--noise-power", type=float, default=0.0)
    d.add_argument("--signal-variance", type=float)
    d.add_argument("--no-mmse", action="store_true")
    d.add_argument("--trace-csv")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("sweep", help="BER sweep from a config file")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="re-run a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    pp = sub.add_parser("pipeline", help="throughput / latency / NHE report")
    pp.add_argument("--freq-mhz", type=float, required=True)
    pp.add_argument("--gates-kg", type=float, default=0.0)
    pp.add_argument("--k", type=int, default=4)
    pp.add_argument("--rlimit", type=int, default=4)
    pp.add_argument("--nt", type=int, default=8)
    pp.add_argument("--mod", type=int, default=64)
    pp.add_argument("--seed", type=int)
    pp.set_defaults(func=cmd_pipeline)

    g = sub.add_parser("degradation", help="fixed vs floating SNR gap")
    g.add_argument("config")
    g.add_argument("--target-ber", type=float, default=1e-3)
    g.add_argument("--fixed", default="s1.7.8")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_degradation)

    a = sub.add_parser("audit", help="node-count audit on random channels")
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--k", type=int, default=4)
    a.add_argument("--rlimit", type=int, default=4)
    a.add_argument("--nt", type=int, default=8)
    a.add_argument("--mod", type=int, default=64)
    a.add_argument("--snr-db", type=float, default=20.0)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.func(args)
    except SingularChannelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        # includes ConfigError, MatrixFormatError, InsufficientSweepRange
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
