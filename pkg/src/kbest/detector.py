"""Complex K-best tree search with Schnorr-Euchner on-demand expansion.

At every level each parent evaluates ``rlimit`` candidates along the real
axis (imaginary part fixed to the rounded centre) and keeps the best one in
its frontier slot.  A lone parent (the root) instead fills ``min(k, rlimit)``
slots with its best real-axis candidates.  The search then pops the global
minimum ``k`` times; a popped slot is refilled with the next imaginary-axis
sibling of the popped node.  Per level this costs
``parents * rlimit + (k - 1)`` node evaluations.

Levels are 0-based; the search runs from ``n_t - 1`` down to ``0``.  Two
implementations live here: :func:`detect` works on one vector and can emit a
node trace, :func:`detect_batch` is the vectorised equivalent used by the
Monte-Carlo harness.  Both produce bit-identical decisions and PEDs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .fixedpoint import (
    CFix, QFormat, fx_mul, fx_sub, quantize_int, round_shift, round_shift_even, saturate,
)
from .linalg import SingularChannelError

__all__ = [
    "DetectorConfig",
    "SearchNode",
    "TraceEvent",
    "Detection",
    "BatchDetection",
    "round_half_away",
    "se_offset",
    "se_real_sequence",
    "se_imag_next",
    "ped_increment",
    "level_center",
    "expand_level",
    "detect",
    "detect_batch",
    "unmap",
    "clamp_to_grid",
    "count_expanded_nodes",
    "node_budget",
    "recompute_ped",
]


@dataclass(frozen=True)
class DetectorConfig:
    n_t: int = 8
    n_r: int = 8
    m: int = 64
    k: int = 4
    rlimit: int = 4
    arithmetic: Union[str, QFormat] = "float"
    mmse: bool = True
    delta: float = 0.75

    def __post_init__(self):
        if isinstance(self.arithmetic, str) and self.arithmetic != "float":
            object.__setattr__(self, "arithmetic", QFormat.parse(self.arithmetic))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.rlimit < 1:
            raise ValueError("rlimit must be >= 1")
        if self.m < 4 or (self.m & (self.m - 1)) or int(math.log2(self.m)) % 2:
            raise ValueError(f"m must be a square power of 4, got {self.m}")
        if not 1 <= self.n_t <= self.n_r:
            raise ValueError("need 1 <= n_t <= n_r")

    @property
    def fmt(self) -> Optional[QFormat]:
        return None if self.arithmetic == "float" else self.arithmetic

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.m))

    @property
    def arithmetic_name(self) -> str:
        return str(self.arithmetic)


def node_budget(cfg: DetectorConfig) -> tuple[int, int]:
    """Worst-case (per level, total) node evaluations."""
    per_level = cfg.k * cfg.rlimit + cfg.k - 1
    return per_level, cfg.n_t * cfg.k * (cfg.rlimit + 1) - cfg.n_t


# ---------------------------------------------------------------------------
# Schnorr-Euchner ordering
# ---------------------------------------------------------------------------

def round_half_away(x: float) -> int:
    r = math.floor(abs(x) + 0.5)
    return -r if x < 0 else r


def se_offset(index: int) -> int:
    """Signed offset of the ``index``-th SE candidate: 0, +1, -1, +2, -2, ...
    (to be multiplied by the first step direction)."""
    if index % 2:
        return (index + 1) // 2
    return -(index // 2)


def _se_start(c: float) -> tuple[int, int]:
    z1 = round_half_away(c)
    return z1, (1 if c >= z1 else -1)


def se_real_sequence(c: float, n: int) -> list[int]:
    """First ``n`` integers in order of non-decreasing distance from ``c``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z1, d = _se_start(c)
    return [z1 + d * se_offset(i) for i in range(n)]


def _se_value(c: float, index: int) -> int:
    z1, d = _se_start(c)
    return z1 + d * se_offset(index)


# ---------------------------------------------------------------------------
# per-node arithmetic
# ---------------------------------------------------------------------------

def ped_increment(prev_ped: float, residual: complex) -> float:
    """``prev_ped + |residual|**2``."""
    if prev_ped < 0:
        raise ValueError("prev_ped must be >= 0")
    er, ei = residual.real, residual.imag
    return prev_ped + (er * er + ei * ei)


def _ped_step(prev, center: complex, z: complex, r_ll: float, fmt):
    """PED of symbol ``z`` given the parent's PED and this level's centre.

    The residual is formed as ``r_ll * (center - z)``; that keeps SE order and
    PED order consistent under rounding, which pop-order monotonicity needs.
    """
    if fmt is None:
        er = r_ll * (center.real - z.real)
        ei = r_ll * (center.imag - z.imag)
        return ped_increment(prev, complex(er, ei))
    s = fmt.scale
    c = CFix(int(center.real * s), int(center.imag * s), fmt)
    zq = CFix(quantize_int(z.real, fmt), quantize_int(z.imag, fmt), fmt)
    e = fx_mul(CFix(int(r_ll * s), 0, fmt), fx_sub(c, zq))
    inc = fx_mul(e, e.conj()).re
    return saturate(int(prev * s) + inc, fmt) / s


@dataclass(frozen=True)
class SearchNode:
    """Partial candidate.

    ``symbols[i]`` is the Gaussian integer chosen at level ``level + i``.
    ``center``/``r_ll``/``parent_ped`` are kept so siblings can be generated
    on demand without the channel.
    """

    level: int
    symbols: tuple
    ped: float
    center: complex
    real_index: int
    imag_index: int
    parent: int = 0
    parent_ped: float = 0.0
    r_ll: float = 1.0
    fmt: Optional[QFormat] = None

    @property
    def symbol(self) -> complex:
        return self.symbols[0]


def se_imag_next(node: SearchNode) -> SearchNode:
    """Next sibling along the imaginary axis (same real part)."""
    idx = node.imag_index + 1
    zi = _se_value(node.center.imag, idx)
    z = complex(node.symbol.real, zi)
    ped = _ped_step(node.parent_ped, node.center, z, node.r_ll, node.fmt)
    return replace(node, symbols=(z,) + node.symbols[1:], ped=ped, imag_index=idx)


# ---------------------------------------------------------------------------
# datapaths
# ---------------------------------------------------------------------------

class _FloatPath:
    def __init__(self, y_rot, R):
        self.yr = [float(v.real) for v in y_rot]
        self.yi = [float(v.imag) for v in y_rot]
        self.Rr = [[float(v.real) for v in row] for row in R]
        self.Ri = [[float(v.imag) for v in row] for row in R]
        self.fmt = None

    def r_ll(self, level):
        return self.Rr[level][level]

    def center(self, level, prefix):
        ar, ai = self.yr[level], self.yi[level]
        for j in range(level + 1, len(self.yr)):
            z = prefix[j - level - 1]
            rr, ri = self.Rr[level][j], self.Ri[level][j]
            ar = ar - (rr * z.real - ri * z.imag)
            ai = ai - (rr * z.imag + ri * z.real)
        d = self.Rr[level][level]
        return complex(ar / d, ai / d)


class _FixedPath:
    def __init__(self, y_rot, R, fmt: QFormat):
        self.fmt = fmt
        self.y = [CFix(quantize_int(v.real, fmt), quantize_int(v.imag, fmt), fmt) for v in y_rot]
        self.R = [
            [CFix(quantize_int(v.real, fmt), quantize_int(v.imag, fmt), fmt) for v in row]
            for row in R
        ]
        # reciprocal of the diagonal is a channel-rate quantity, computed in float
        self.inv = [
            CFix(quantize_int(1.0 / float(R[i][i].real), fmt), 0, fmt) for i in range(len(R))
        ]

    def r_ll(self, level):
        return self.R[level][level].re / self.fmt.scale

    def center(self, level, prefix):
        fmt = self.fmt
        acc = self.y[level]
        for j in range(level + 1, len(self.y)):
            z = prefix[j - level - 1]
            zq = CFix(quantize_int(z.real, fmt), quantize_int(z.imag, fmt), fmt)
            acc = fx_sub(acc, fx_mul(self.R[level][j], zq))
        c = fx_mul(acc, self.inv[level])
        return complex(c.re / fmt.scale, c.im / fmt.scale)


def _check_diag(R):
    n = R.shape[0]
    for i in range(n):
        if not abs(R[i, i]) > 0:
            raise SingularChannelError(f"zero diagonal in R at level {i}", i)


def _datapath(y_rot, R, cfg: DetectorConfig):
    y_rot = np.asarray(y_rot, dtype=np.complex128)
    R = np.asarray(R, dtype=np.complex128)
    n = cfg.n_t
    if R.shape[0] < n or R.shape[1] != n or y_rot.shape[0] < n:
        raise ValueError("R must be at least n_t x n_t and y_rot at least n_t long")
    R = R[:n, :n]
    _check_diag(R)
    if cfg.fmt is None:
        return _FloatPath(y_rot[:n], R)
    return _FixedPath(y_rot[:n], R, cfg.fmt)


def level_center(y_rot, R, prefix, level) -> complex:
    """Unconstrained estimate at ``level`` given the symbols above it.

    ``prefix`` lists the symbols at levels ``level+1 .. n-1``.
    """
    R = np.asarray(R, dtype=np.complex128)
    if R[level, level] == 0:
        raise SingularChannelError(f"zero diagonal in R at level {level}", level)
    acc = complex(y_rot[level])
    for j, z in enumerate(prefix, start=level + 1):
        acc -= complex(R[level, j]) * complex(z)
    return acc / complex(R[level, level])


@dataclass(frozen=True)
class TraceEvent:
    """One trace record.

    ``kind`` is ``"real"`` or ``"imag"`` for an evaluated node and ``"pop"``
    when a frontier entry is selected into the output list.  ``slot`` is the
    frontier register involved (-1 for real-axis evaluations).
    """

    level: int
    parent: int
    kind: str
    real_index: int
    imag_index: int
    symbol: complex
    ped: float
    slot: int = -1

    def line(self) -> str:
        return (
            f"{self.level},{self.parent},{self.slot},{self.kind},{self.real_index},"
            f"{self.imag_index},{self.symbol.real:g}{self.symbol.imag:+g}i,{self.ped!r}"
        )


def _expand(parents, dp, cfg, level, trace):
    frontier = []
    count = 0
    r_ll = dp.r_ll(level)
    lone = len(parents) == 1
    for p, parent in enumerate(parents):
        prefix = parent.symbols if parent.level > level else ()
        c = dp.center(level, prefix)
        im0 = round_half_away(c.imag)
        batch = []
        for t, zr in enumerate(se_real_sequence(c.real, cfg.rlimit)):
            z = complex(zr, im0)
            ped = _ped_step(parent.ped, c, z, r_ll, dp.fmt)
            count += 1
            if trace is not None:
                trace.append(TraceEvent(level, p, "real", t, 0, z, ped))
            batch.append(SearchNode(level, (z,) + prefix, ped, c, t, 0, p, parent.ped, r_ll, dp.fmt))
        batch.sort(key=lambda n: (n.ped, n.real_index))
        frontier.extend(batch[:min(cfg.k, cfg.rlimit)] if lone else batch[:1])

    children = []
    for i in range(cfg.k):
        slot = min(range(len(frontier)), key=lambda s: (frontier[s].ped, s))
        node = frontier[slot]
        children.append(node)
        if trace is not None:
            trace.append(TraceEvent(level, node.parent, "pop", node.real_index, node.imag_index,
                                    node.symbol, node.ped, slot))
        if i < cfg.k - 1:
            nxt = se_imag_next(node)
            count += 1
            if trace is not None:
                trace.append(TraceEvent(level, nxt.parent, "imag", nxt.real_index, nxt.imag_index,
                                        nxt.symbol, nxt.ped, slot))
            frontier[slot] = nxt
    return children, count


def _root(cfg):
    return SearchNode(cfg.n_t, (), 0.0, 0j, 0, 0)


def expand_level(parents, y_rot, R, cfg: DetectorConfig, level: int):
    """Expand one level.  Returns ``(children, nodes_computed)``."""
    if not parents:
        raise ValueError("parents must be non-empty")
    dp = _datapath(y_rot, R, cfg)
    return _expand(list(parents), dp, cfg, level, None)


@dataclass
class Detection:
    """Result of :func:`detect`; ``candidates`` are full-length, best first."""

    candidates: list
    total_nodes: int
    nodes_per_level: list
    pop_order_ok: bool
    trace: Optional[list] = None

    @property
    def best(self) -> SearchNode:
        return self.candidates[0]

    @property
    def z_hat(self) -> np.ndarray:
        return np.array(self.best.symbols, dtype=np.complex128)


def _pops_monotone(trace_or_lists):
    for lst in trace_or_lists:
        peds = [n.ped for n in lst]
        if any(b < a for a, b in zip(peds, peds[1:])):
            return False
    return True


def detect(y_rot, R, cfg: DetectorConfig, *, trace: bool = False) -> Detection:
    """K-best search from level ``n_t - 1`` down to ``0``."""
    dp = _datapath(y_rot, R, cfg)
    events = [] if trace else None
    parents = [_root(cfg)]
    per_level = [0] * cfg.n_t
    lists = []
    for level in range(cfg.n_t - 1, -1, -1):
        parents, cnt = _expand(parents, dp, cfg, level, events)
        per_level[level] = cnt
        lists.append(parents)
    return Detection(parents, sum(per_level), per_level, _pops_monotone(lists), events)


def recompute_ped(symbols, y_rot, R, cfg: DetectorConfig) -> float:
    """PED of a full candidate evaluated from scratch, level by level."""
    dp = _datapath(y_rot, R, cfg)
    symbols = tuple(complex(z) for z in symbols)
    ped = 0.0
    n = cfg.n_t
    for level in range(n - 1, -1, -1):
        prefix = symbols[level + 1:]
        c = dp.center(level, prefix)
        ped = _ped_step(ped, c, symbols[level], dp.r_ll(level), dp.fmt)
    return ped


def count_expanded_nodes(events) -> tuple[dict, int]:
    """Per-level and total node evaluations in a trace."""
    per_level: dict = {}
    for ev in events:
        if ev.kind in ("real", "imag"):
            per_level[ev.level] = per_level.get(ev.level, 0) + 1
    return per_level, sum(per_level.values())


def unmap(z_hat, T, m: int) -> np.ndarray:
    """Reduced-domain decision to constellation: ``Q(2 T z + (1+j))``."""
    z_hat = np.asarray(z_hat, dtype=np.complex128)
    T = np.asarray(T, dtype=np.complex128)
    raw = 2 * (T @ z_hat) + (1 + 1j)
    return clamp_to_grid(raw, m)


def clamp_to_grid(x, m: int):
    """Nearest odd integer per axis, clipped to ``+-(sqrt(m) - 1)``.

    Ties go away from zero; an exact 0 maps to +1.
    """
    top = int(round(math.sqrt(m))) - 1

    def axis(v):
        q = 2 * np.floor(np.abs(v) / 2) + 1
        return np.clip(np.where(v < 0, -q, q), -top, top)

    x = np.asarray(x, dtype=np.complex128)
    return axis(x.real) + 1j * axis(x.imag)


# ---------------------------------------------------------------------------
# vectorised search
# ---------------------------------------------------------------------------

@dataclass
class BatchDetection:
    z_hat: np.ndarray          # (B, n_t) complex, best candidate
    ped: np.ndarray            # (B,) float, PED of best candidate
    candidates: np.ndarray     # (B, K, n_t) complex, final list best first
    candidate_peds: np.ndarray  # (B, K)
    nodes_per_level: np.ndarray  # (B, n_t)
    pop_order_ok: np.ndarray   # (B,) bool
    total_nodes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total_nodes = self.nodes_per_level.sum(axis=1)


def _np_round(x):
    r = np.floor(np.abs(x) + 0.5)
    return np.where(x < 0, -r, r)


def _offsets(idx):
    return np.where(idx % 2 == 1, (idx + 1) // 2, -(idx // 2))


class _BatchFloat:
    def __init__(self, y_rot, R):
        self.yr, self.yi = y_rot.real.copy(), y_rot.imag.copy()
        self.Rr, self.Ri = R.real.copy(), R.imag.copy()
        self.diag = np.diagonal(self.Rr, axis1=1, axis2=2).copy()

    def center(self, level, Zr, Zi):
        n = self.yr.shape[1]
        P = Zr.shape[1]
        ar = np.repeat(self.yr[:, level:level + 1], P, axis=1)
        ai = np.repeat(self.yi[:, level:level + 1], P, axis=1)
        for j in range(level + 1, n):
            rr = self.Rr[:, level, j][:, None]
            ri = self.Ri[:, level, j][:, None]
            zr, zi = Zr[:, :, j], Zi[:, :, j]
            ar = ar - (rr * zr - ri * zi)
            ai = ai - (rr * zi + ri * zr)
        d = self.diag[:, level][:, None]
        return ar / d, ai / d

    def round_center(self, c):
        return _np_round(c).astype(np.int64)

    def at_or_above(self, c, z):
        return c >= z

    def step(self, prev, cr, ci, zr, zi, level):
        r = self.diag[:, level][:, None] if cr.ndim == 2 else self.diag[:, level]
        er = r * (cr - zr)
        ei = r * (ci - zi)
        return prev + (er * er + ei * ei)


class _BatchFixed:
    def __init__(self, y_rot, R, fmt):
        self.fmt = fmt
        q = lambda a: quantize_int(np.ascontiguousarray(a), fmt)
        self.yr, self.yi = q(y_rot.real), q(y_rot.imag)
        self.Rr, self.Ri = q(R.real), q(R.imag)
        self.diag = np.diagonal(self.Rr, axis1=1, axis2=2).copy()
        dR = np.diagonal(R.real, axis1=1, axis2=2)
        self.inv = q(1.0 / dR)

    def _mul(self, a, b):
        return saturate(round_shift_even(a * b, self.fmt.fraction_bits), self.fmt)

    def center(self, level, Zr, Zi):
        fmt = self.fmt
        f = fmt.fraction_bits
        n = self.yr.shape[1]
        P = Zr.shape[1]
        ar = np.repeat(self.yr[:, level:level + 1], P, axis=1)
        ai = np.repeat(self.yi[:, level:level + 1], P, axis=1)
        for j in range(level + 1, n):
            rr = self.Rr[:, level, j][:, None]
            ri = self.Ri[:, level, j][:, None]
            zr = saturate(Zr[:, :, j] * fmt.scale, fmt)
            zi = saturate(Zi[:, :, j] * fmt.scale, fmt)
            pr = saturate(round_shift_even(rr * zr - ri * zi, f), fmt)
            pi = saturate(round_shift_even(rr * zi + ri * zr, f), fmt)
            ar = saturate(ar - pr, fmt)
            ai = saturate(ai - pi, fmt)
        inv = self.inv[:, level][:, None]
        return self._mul(ar, inv), self._mul(ai, inv)

    def round_center(self, c):
        return round_shift(c, self.fmt.fraction_bits)

    def at_or_above(self, c, z):
        return c >= z * self.fmt.scale

    def step(self, prev, cr, ci, zr, zi, level):
        fmt = self.fmt
        f = fmt.fraction_bits
        r = self.diag[:, level][:, None] if cr.ndim == 2 else self.diag[:, level]
        dr = saturate(cr - saturate(zr * fmt.scale, fmt), fmt)
        di = saturate(ci - saturate(zi * fmt.scale, fmt), fmt)
        er = self._mul(r, dr)
        ei = self._mul(r, di)
        ei_conj = saturate(-ei, fmt)
        inc = saturate(round_shift_even(er * er - ei * ei_conj, f), fmt)
        return saturate(prev + inc, fmt)


def detect_batch(y_rot, R, cfg: DetectorConfig) -> BatchDetection:
    """Vectorised :func:`detect` over a leading batch axis.

    ``y_rot`` has shape (B, >= n_t) and ``R`` (B, n_t, n_t).  PEDs are
    returned as floats in both arithmetic modes.
    """
    n = cfg.n_t
    K = cfg.k
    y_rot = np.asarray(y_rot, dtype=np.complex128)[:, :n]
    R = np.asarray(R, dtype=np.complex128)[:, :n, :n]
    B = y_rot.shape[0]
    if np.any(np.abs(np.diagonal(R, axis1=1, axis2=2)) == 0):
        bad = int(np.flatnonzero(np.any(np.diagonal(R, axis1=1, axis2=2) == 0, axis=1))[0])
        raise SingularChannelError(f"zero diagonal in R (batch row {bad})", bad)
    fixed = cfg.fmt is not None
    dp = _BatchFixed(y_rot, R, cfg.fmt) if fixed else _BatchFloat(y_rot, R)
    ped_dtype = np.int64 if fixed else np.float64

    Zr = np.zeros((B, 1, n), dtype=np.int64)
    Zi = np.zeros((B, 1, n), dtype=np.int64)
    ped = np.zeros((B, 1), dtype=ped_dtype)
    counts = np.zeros((B, n), dtype=np.int64)
    mono = np.ones(B, dtype=bool)
    rows = np.arange(B)

    for level in range(n - 1, -1, -1):
        P = Zr.shape[1]
        cr, ci = dp.center(level, Zr, Zi)
        im0 = dp.round_center(ci)
        z1 = dp.round_center(cr)
        dre = np.where(dp.at_or_above(cr, z1), 1, -1)
        dim = np.where(dp.at_or_above(ci, im0), 1, -1)

        peds_t, zr_t = [], []
        for t in range(cfg.rlimit):
            zr = z1 + dre * se_offset(t)
            peds_t.append(dp.step(ped, cr, ci, zr, im0, level))
            zr_t.append(zr)
        counts[:, level] += P * cfg.rlimit

        if P == 1:
            # lone parent: its best real-axis candidates each get a slot
            S = min(K, cfg.rlimit)
            allp = np.concatenate(peds_t, axis=1)
            allz = np.concatenate(zr_t, axis=1)
            order = np.argsort(allp, axis=1, kind="stable")[:, :S]
            f_ped = np.take_along_axis(allp, order, axis=1)
            f_zr = np.take_along_axis(allz, order, axis=1)
            f_par = np.zeros((B, S), dtype=np.int64)
        else:
            f_ped, f_zr = peds_t[0], zr_t[0]
            for p_t, zr in zip(peds_t[1:], zr_t[1:]):
                better = p_t < f_ped
                f_ped = np.where(better, p_t, f_ped)
                f_zr = np.where(better, zr, f_zr)
            f_par = np.broadcast_to(np.arange(P), (B, P)).copy()
        S = f_ped.shape[1]
        f_zi = np.take_along_axis(im0, f_par, axis=1)
        f_idx = np.zeros((B, S), dtype=np.int64)

        out_zr = np.empty((B, K, n), dtype=np.int64)
        out_zi = np.empty((B, K, n), dtype=np.int64)
        out_ped = np.empty((B, K), dtype=ped_dtype)
        last = None
        for i in range(K):
            s = np.argmin(f_ped, axis=1)
            par = f_par[rows, s]
            sel = f_ped[rows, s]
            out_zr[:, i] = Zr[rows, par]
            out_zi[:, i] = Zi[rows, par]
            out_zr[:, i, level] = f_zr[rows, s]
            out_zi[:, i, level] = f_zi[rows, s]
            out_ped[:, i] = sel
            if last is not None:
                mono &= sel >= last
            last = sel
            if i < K - 1:
                idx = f_idx[rows, s] + 1
                zi_new = im0[rows, par] + dim[rows, par] * _offsets(idx)
                zr_keep = f_zr[rows, s]
                p_new = dp.step(ped[rows, par], cr[rows, par], ci[rows, par], zr_keep, zi_new, level)
                f_ped[rows, s] = p_new
                f_zi[rows, s] = zi_new
                f_idx[rows, s] = idx
        counts[:, level] += K - 1
        Zr, Zi, ped = out_zr, out_zi, out_ped

    peds = ped / cfg.fmt.scale if fixed else ped
    cands = Zr + 1j * Zi
    return BatchDetection(cands[:, 0].astype(np.complex128), peds[:, 0], cands, peds, counts, mono)
