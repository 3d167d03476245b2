"""Monte-Carlo link simulation: Gray-mapped QAM, i.i.d. Rayleigh channels,
AWGN, the LR-aided K-best receiver and an exhaustive ML reference.

Random streams are drawn per block of trials from ``SeedSequence([seed,
block])``.  Every SNR point and every detector sees the same symbols,
channels and unit-variance noise; only the noise scale changes with SNR.
"""

from __future__ import annotations

import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .detector import DetectorConfig, clamp_to_grid, detect_batch
from .fixedpoint import QFormat
from .linalg import preprocess_batch

__all__ = [
    "LinkConfig",
    "BerPoint",
    "BerReport",
    "InsufficientSweepRange",
    "symbol_energy",
    "gray_levels",
    "qam_modulate",
    "qam_demodulate",
    "sample_channel",
    "sample_noise",
    "ml_detect",
    "ml_detect_batch",
    "noise_power_for_snr",
    "sweep",
    "run_link",
    "fixed_float_degradation",
    "interpolate_snr",
]

CSV_HEADER = "snr_db,trials,bits,bit_errors,ber,vec_errors,mean_nodes"


def symbol_energy(m: int) -> float:
    """Mean energy of the odd-integer square grid: ``2 (m - 1) / 3``."""
    return 2.0 * (m - 1) / 3.0


def gray_levels(m: int) -> np.ndarray:
    """Per-axis amplitude for each Gray label (index = label value).

    Levels run from ``-(sqrt(m) - 1)`` upward and carry the reflected Gray
    code of their rank; for 4-QAM the single bit maps 0 -> +1, 1 -> -1.
    """
    L = int(round(math.sqrt(m)))
    if L * L != m or L < 2:
        raise ValueError(f"m must be a square, got {m}")
    if L == 2:
        return np.array([1, -1], dtype=np.int64)
    table = np.empty(L, dtype=np.int64)
    for rank in range(L):
        table[rank ^ (rank >> 1)] = 2 * rank - (L - 1)
    return table


def _axis_bits(m: int) -> int:
    return int(math.log2(m)) // 2


def qam_modulate(bits, m: int) -> np.ndarray:
    """Map bits (MSB first, real-axis bits then imaginary-axis bits) to symbols.

    The trailing axis of ``bits`` must be a multiple of ``log2(m)``; the result
    drops that axis into symbols, e.g. shape (B, n_t * 6) -> (B, n_t) for 64-QAM.
    """
    bits = np.asarray(bits, dtype=np.int64)
    bps = int(math.log2(m))
    if bits.shape[-1] % bps:
        raise ValueError(f"bit count {bits.shape[-1]} not divisible by {bps}")
    nb = _axis_bits(m)
    grouped = bits.reshape(bits.shape[:-1] + (-1, 2, nb))
    weights = 1 << np.arange(nb - 1, -1, -1)
    labels = grouped @ weights
    table = gray_levels(m)
    return table[labels[..., 0]] + 1j * table[labels[..., 1]]


def qam_demodulate(symbols, m: int) -> np.ndarray:
    """Inverse of :func:`qam_modulate`; off-grid points are clamped first."""
    s = clamp_to_grid(np.asarray(symbols, dtype=np.complex128), m)
    L = int(round(math.sqrt(m)))
    nb = _axis_bits(m)
    inverse = np.empty(L, dtype=np.int64)
    table = gray_levels(m)
    inverse[(table + (L - 1)) // 2] = np.arange(L)

    def labels(v):
        return inverse[((v.astype(np.int64) + (L - 1)) // 2)]

    lab = np.stack([labels(s.real), labels(s.imag)], axis=-1)
    shifts = np.arange(nb - 1, -1, -1)
    bits = (lab[..., None] >> shifts) & 1
    return bits.reshape(s.shape[:-1] + (-1,))


def sample_channel(rng: np.random.Generator, n_r: int, n_t: int, size=None) -> np.ndarray:
    """i.i.d. CN(0, 1) entries."""
    shape = (n_r, n_t) if size is None else (size, n_r, n_t)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(0.5)


def sample_noise(rng: np.random.Generator, n_r: int, noise_power: float, size=None) -> np.ndarray:
    """i.i.d. CN(0, noise_power) entries."""
    if noise_power < 0:
        raise ValueError("noise_power must be >= 0")
    shape = (n_r,) if size is None else (size, n_r)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(0.5)
    return w * math.sqrt(noise_power)


def _constellation(m: int) -> np.ndarray:
    L = int(round(math.sqrt(m)))
    axis = np.arange(-(L - 1), L, 2)
    return np.array([complex(a, b) for a in axis for b in axis])


def _ml_candidates(n_t: int, m: int) -> np.ndarray:
    if m ** n_t > 10**6:
        raise ValueError(f"exhaustive search over {m}^{n_t} candidates is too large")
    pts = _constellation(m)
    return np.array(list(itertools.product(pts, repeat=n_t)), dtype=np.complex128)


def ml_detect(y, H, m: int) -> np.ndarray:
    """Exhaustive ``argmin ||y - H s||^2``; ties go to the lexicographically
    first candidate."""
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    cands = _ml_candidates(H.shape[1], m)
    d = np.sum(np.abs(y[None, :] - cands @ H.T) ** 2, axis=1)
    return cands[int(np.argmin(d))]


def ml_detect_batch(y, H, m: int, chunk: int = 256) -> np.ndarray:
    y = np.asarray(y, dtype=np.complex128)
    H = np.asarray(H, dtype=np.complex128)
    cands = _ml_candidates(H.shape[2], m)
    out = np.empty((y.shape[0], H.shape[2]), dtype=np.complex128)
    for a in range(0, y.shape[0], chunk):
        b = slice(a, a + chunk)
        pred = np.einsum("brt,ct->bcr", H[b], cands)
        d = np.sum(np.abs(y[b, None, :] - pred) ** 2, axis=2)
        out[b] = cands[np.argmin(d, axis=1)]
    return out


@dataclass(frozen=True)
class LinkConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    snr_db_list: tuple = (20.0,)
    trials_per_snr: int = 1000
    seed: int = 0
    channel_model: str = "iid-rayleigh"
    noiseless: bool = False
    block_size: int = 1000
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr_db_list", tuple(float(s) for s in self.snr_db_list))
        if self.trials_per_snr < 1:
            raise ValueError("trials_per_snr must be >= 1")
        if not self.snr_db_list:
            raise ValueError("snr_db_list must be non-empty")
        if self.channel_model != "iid-rayleigh":
            raise ValueError(f"unsupported channel model {self.channel_model!r}")
        if self.block_size < 1 or self.threads < 1:
            raise ValueError("block_size and threads must be >= 1")


@dataclass
class BerPoint:
    snr_db: float
    trials: int = 0
    bits: int = 0
    bit_errors: int = 0
    vec_errors: int = 0
    nodes: int = 0
    discarded: int = 0

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits if self.bits else 0.0

    @property
    def mean_nodes(self) -> float:
        return self.nodes / self.trials if self.trials else 0.0

    def csv_row(self) -> str:
        return (
            f"{self.snr_db!r},{self.trials},{self.bits},{self.bit_errors},"
            f"{self.ber!r},{self.vec_errors},{self.mean_nodes!r}"
        )


@dataclass
class BerReport:
    points: list
    detector: str = ""

    @property
    def snr_db(self) -> np.ndarray:
        return np.array([p.snr_db for p in self.points])

    @property
    def ber(self) -> np.ndarray:
        return np.array([p.ber for p in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for p in self.points:
            buf.write(p.csv_row() + "\n")
        return buf.getvalue()


def noise_power_for_snr(snr_db: float, n_t: int, m: int) -> float:
    """``N0`` such that ``10 log10(n_t E_s / N0) = snr_db``."""
    return n_t * symbol_energy(m) / 10 ** (snr_db / 10)


def _draw_block(seed, block, size, n_r, n_t, m):
    rng = np.random.default_rng(np.random.SeedSequence([seed, block]))
    bits = rng.integers(0, 2, size=(size, n_t * int(math.log2(m))), dtype=np.int64)
    H = sample_channel(rng, n_r, n_t, size)
    w = sample_noise(rng, n_r, 1.0, size)
    return bits, H, w


Detector = Union[DetectorConfig, str]


def _run_block(cfg: LinkConfig, detectors, block, size):
    det0 = cfg.detector
    n_t, n_r, m = det0.n_t, det0.n_r, det0.m
    bits, H, w = _draw_block(cfg.seed, block, size, n_r, n_t, m)
    s = qam_modulate(bits, m)
    es = symbol_energy(m)
    clean = np.einsum("brt,bt->br", H, s)
    out = []
    for snr in cfg.snr_db_list:
        n0 = 0.0 if cfg.noiseless else noise_power_for_snr(snr, n_t, m)
        y = clean + math.sqrt(n0) * w
        prep = {}
        row = []
        for det in detectors:
            if det == "ml":
                s_hat = ml_detect_batch(y, H, m)
                ok = np.ones(size, dtype=bool)
                nodes = np.zeros(size, dtype=np.int64)
            else:
                key = (det.mmse, det.delta)
                if key not in prep:
                    prep[key] = preprocess_batch(H, y, n0, es / 2, mmse=det.mmse, delta=det.delta)
                y_rot, R, T, ok = prep[key]
                res = detect_batch(y_rot[ok], R[ok], det)
                s_hat = np.zeros_like(s)
                s_hat[ok] = clamp_to_grid(
                    2 * np.einsum("bij,bj->bi", T[ok], res.z_hat) + (1 + 1j), m
                )
                nodes = np.zeros(size, dtype=np.int64)
                nodes[ok] = res.total_nodes
                if not res.pop_order_ok.all():
                    raise AssertionError("pop-order PED monotonicity violated")
            bits_hat = qam_demodulate(s_hat, m)
            err = np.sum(bits_hat[ok] != bits[ok], axis=1)
            row.append((int(ok.sum()), int(err.sum()), int(np.count_nonzero(err)),
                        int(nodes[ok].sum()), int(size - ok.sum())))
        out.append(row)
    return out


def sweep(cfg: LinkConfig, detectors: Sequence[Detector] = None) -> list:
    """Run all ``detectors`` on the same trial stream; one report each.

    A detector is a :class:`DetectorConfig` or the string ``"ml"`` for the
    exhaustive reference.
    """
    if detectors is None:
        detectors = [cfg.detector]
    for det in detectors:
        if det != "ml" and (det.n_t, det.n_r, det.m) != (cfg.detector.n_t, cfg.detector.n_r, cfg.detector.m):
            raise ValueError("all detectors must share n_t, n_r and m")
    bps = cfg.detector.n_t * cfg.detector.bits_per_symbol
    blocks = []
    left = cfg.trials_per_snr
    while left > 0:
        blocks.append(min(cfg.block_size, left))
        left -= blocks[-1]

    def job(args):
        b, size = args
        return _run_block(cfg, detectors, b, size)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(job, enumerate(blocks)))
    else:
        results = [job(a) for a in enumerate(blocks)]

    reports = []
    for d, det in enumerate(detectors):
        points = []
        for i, snr in enumerate(cfg.snr_db_list):
            p = BerPoint(snr)
            for res in results:
                trials, errs, verr, nodes, disc = res[i][d]
                p.trials += trials
                p.bits += trials * bps
                p.bit_errors += errs
                p.vec_errors += verr
                p.nodes += nodes
                p.discarded += disc
            points.append(p)
        name = "ml" if det == "ml" else det.arithmetic_name
        reports.append(BerReport(points, name))
    return reports


def run_link(cfg: LinkConfig) -> BerReport:
    return sweep(cfg)[0]


class InsufficientSweepRange(ValueError):
    pass


def interpolate_snr(snr_db, ber, target: float) -> float:
    """SNR at which the BER curve first crosses ``target``, interpolating
    linearly in (dB, log10 BER)."""
    snr_db = np.asarray(snr_db, dtype=float)
    ber = np.asarray(ber, dtype=float)
    for i in range(len(snr_db) - 1):
        hi, lo = ber[i], ber[i + 1]
        if hi >= target >= lo and lo > 0:
            if hi == lo:
                return float(snr_db[i])
            t = (math.log10(hi) - math.log10(target)) / (math.log10(hi) - math.log10(lo))
            return float(snr_db[i] + t * (snr_db[i + 1] - snr_db[i]))
    raise InsufficientSweepRange(
        f"target BER {target:g} is not bracketed by the sweep "
        f"(BER range {ber.max():.3g} .. {ber.min():.3g})"
    )


@dataclass
class Degradation:
    gap_db: float
    snr_reference: float
    snr_test: float
    reference: BerReport
    test: BerReport


def fixed_float_degradation(cfg: LinkConfig, target_ber: float, fixed="s1.7.8",
                            reference="float") -> Degradation:
    """SNR gap (test minus reference) at ``target_ber`` from paired sweeps."""
    def as_arith(a):
        return a if isinstance(a, QFormat) or a == "float" else QFormat.parse(a)

    ref = replace(cfg.detector, arithmetic=as_arith(reference))
    tst = replace(cfg.detector, arithmetic=as_arith(fixed))
    if ref == tst:
        r = sweep(cfg, [ref])[0]
        t = r
    else:
        r, t = sweep(cfg, [ref, tst])
    s_ref = interpolate_snr(r.snr_db, r.ber, target_ber)
    s_tst = interpolate_snr(t.snr_db, t.ber, target_ber)
    return Degradation(s_tst - s_ref, s_ref, s_tst, r, t)
