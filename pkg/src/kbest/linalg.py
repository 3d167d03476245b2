"""Channel preprocessing: MMSE extension, complex LLL, QR and the shifted,
rotated receive vector that feeds the tree search.

Everything here is floating point.  Only the per-symbol search in
:mod:`kbest.detector` has a fixed-point mode.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "SingularChannelError",
    "MatrixFormatError",
    "LrOutput",
    "Preprocessed",
    "mmse_extend",
    "shift_scale",
    "lll_reduce",
    "qr_decompose",
    "rotate_received",
    "is_unimodular",
    "orthogonality_defect",
    "preprocess",
    "preprocess_batch",
    "format_matrix",
    "parse_matrix",
    "read_matrix",
    "write_matrix",
]


class SingularChannelError(ArithmeticError):
    """Raised when a basis is (numerically) rank deficient."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class MatrixFormatError(ValueError):
    """Malformed matrix text; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


_RANK_TOL = 1e-10


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _as_vector(v, name):
    v = np.asarray(v, dtype=np.complex128)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def mmse_extend(H, y, noise_power, signal_variance):
    """Stack ``sqrt(noise_power / (2 signal_variance)) I`` under ``H`` and
    zeros under ``y``.

    Returns
    -------
    H_ext : ndarray, shape (n_r + n_t, n_t)
    y_ext : ndarray, shape (n_r + n_t,)
    """
    H = _as_matrix(H, "H")
    y = _as_vector(y, "y")
    n_r, n_t = H.shape
    if y.shape[0] != n_r:
        raise ValueError(f"y has length {y.shape[0]}, H has {n_r} rows")
    if noise_power < 0:
        raise ValueError("noise_power must be >= 0")
    if signal_variance <= 0:
        raise ValueError("signal_variance must be > 0")
    reg = np.sqrt(noise_power / (2.0 * signal_variance))
    H_ext = np.vstack([H, reg * np.eye(n_t)])
    y_ext = np.concatenate([y, np.zeros(n_t, dtype=np.complex128)])
    return H_ext, y_ext


def shift_scale(y_ext, H_ext):
    """Map the odd-integer constellation onto Gaussian integers:
    ``(y - H (1+j) 1) / 2``."""
    H_ext = _as_matrix(H_ext, "H_ext")
    y_ext = _as_vector(y_ext, "y_ext")
    if y_ext.shape[0] != H_ext.shape[0]:
        raise ValueError("dimension mismatch between y_ext and H_ext")
    return (y_ext - H_ext.sum(axis=1) * (1 + 1j)) / 2


@dataclass(frozen=True)
class LrOutput:
    """``reduced_basis = input @ transform``.

    ``method`` records how the basis was found: ``"lll"`` (plain pass),
    ``"lll-reordered"`` (plain pass on permuted columns) or ``"guarded"``
    (size reduction may be partial; see :func:`lll_reduce`).
    """

    reduced_basis: np.ndarray
    transform: np.ndarray
    method: str = "lll"


@njit(cache=True)
def _gauss_round(z):
    return np.floor(z.real + 0.5) + 1j * np.floor(z.imag + 0.5)


@njit(cache=True, nogil=True)
def _clll_pass(B, delta, max_iter, guarded):
    """Complex LLL on the columns of B.

    Returns (T, R, status, column); status 0 ok, 1 rank deficient at
    ``column``, 2 iteration cap hit.
    """
    m, n = B.shape
    T = np.eye(n, dtype=np.complex128)
    R = np.zeros((n, n), dtype=np.complex128)
    V = B.copy()
    scale = 0.0
    for j in range(n):
        for i in range(m):
            scale = max(scale, abs(B[i, j]))
    if scale == 0.0:
        return T, R, 1, 0
    # modified Gram-Schmidt for the initial R
    for j in range(n):
        for i in range(j):
            s = 0j
            for r in range(m):
                s += np.conj(V[r, i]) * V[r, j]
            R[i, j] = s
            for r in range(m):
                V[r, j] -= s * V[r, i]
        nrm = 0.0
        for r in range(m):
            nrm += V[r, j].real ** 2 + V[r, j].imag ** 2
        nrm = np.sqrt(nrm)
        if nrm <= 1e-10 * scale:
            return T, R, 1, j
        R[j, j] = nrm
        for r in range(m):
            V[r, j] /= nrm

    k = 1
    it = 0
    while k < n:
        it += 1
        if it > max_iter:
            return T, R, 2, k
        # guarded: a size reduction that would lengthen b_k is undone, so
        # the product of column norms (hence the defect) cannot grow
        r_old = R[:, k].copy()
        t_old = T[:, k].copy()
        before = 0.0
        for i in range(k + 1):
            before += abs(R[i, k]) ** 2
        changed = False
        for l in range(k - 1, -1, -1):
            q = _gauss_round(R[l, k] / R[l, l])
            if q != 0:
                changed = True
                for i in range(l + 1):
                    R[i, k] -= q * R[i, l]
                for i in range(n):
                    T[i, k] -= q * T[i, l]
        if guarded and changed:
            after = 0.0
            for i in range(k + 1):
                after += abs(R[i, k]) ** 2
            if after > before:
                R[:, k] = r_old
                T[:, k] = t_old
        a = abs(R[k - 1, k - 1]) ** 2
        b = abs(R[k, k]) ** 2 + abs(R[k - 1, k]) ** 2
        if delta * a > b:
            for i in range(n):
                R[i, k - 1], R[i, k] = R[i, k], R[i, k - 1]
                T[i, k - 1], T[i, k] = T[i, k], T[i, k - 1]
            # Givens rotation restores triangularity in rows k-1, k
            alpha = R[k - 1, k - 1]
            beta = R[k, k - 1]
            r = np.sqrt(abs(alpha) ** 2 + abs(beta) ** 2)
            c1 = np.conj(alpha) / r
            c2 = np.conj(beta) / r
            c3 = -beta / r
            c4 = alpha / r
            for j in range(k - 1, n):
                u = R[k - 1, j]
                v = R[k, j]
                R[k - 1, j] = c1 * u + c2 * v
                R[k, j] = c3 * u + c4 * v
            R[k, k - 1] = 0j
            k = max(k - 1, 1)
        else:
            k += 1
    return T, R, 0, -1


@njit(cache=True, nogil=True)
def _log_norms(B, T):
    m, n = B.shape
    out = 0.0
    for j in range(n):
        s = 0.0
        for i in range(m):
            v = 0j
            for l in range(n):
                v += B[i, l] * T[l, j]
            s += v.real ** 2 + v.imag ** 2
        out += np.log(s)
    return out


@njit(cache=True, nogil=True)
def _order(B, attempt, n):
    """Column order tried on reduction attempt ``attempt``: ascending norm,
    descending norm, then pseudo-random shuffles (xorshift, fixed seeds)."""
    norms = np.zeros(n)
    for j in range(n):
        for i in range(B.shape[0]):
            norms[j] += abs(B[i, j]) ** 2
    p = np.argsort(norms)
    if attempt == 1:
        p = p[::-1].copy()
    elif attempt > 1:
        x = np.uint64(0x9E3779B97F4A7C15) * np.uint64(attempt)
        for i in range(n - 1, 0, -1):
            x ^= x << np.uint64(13)
            x ^= x >> np.uint64(7)
            x ^= x << np.uint64(17)
            j = int(x % np.uint64(i + 1))
            p[i], p[j] = p[j], p[i]
    return p


_ATTEMPTS = 64
METHODS = ("lll", "lll-reordered", "guarded")


@njit(cache=True, nogil=True)
def _clll_kernel(B, delta, max_iter):
    """LLL whose result never has a larger orthogonality defect than ``B``.

    Plain LLL first.  In the rare case that increases the defect, LLL is
    rerun on reordered columns (with the stronger parameter 0.99, which also
    satisfies ``delta``) until a fully reduced basis with no defect increase
    turns up.  The last resort is the guarded pass, which keeps the Lovász
    condition and the defect bound but may leave some columns only partly
    size-reduced.  Returns (T, status, column, method index).
    """
    m, n = B.shape
    T, R, status, col = _clll_pass(B, delta, max_iter, False)
    if status != 0:
        return T, status, col, 0
    log_in = _log_norms(B, np.eye(n, dtype=np.complex128))
    if _log_norms(B, T) <= log_in + 1e-12:
        return T, status, col, 0
    strong = max(delta, 0.99)
    for attempt in range(_ATTEMPTS):
        p = _order(B, attempt, n)
        P = np.zeros((n, n), dtype=np.complex128)
        for j in range(n):
            P[p[j], j] = 1.0
        Bp = B @ P
        for d in (strong, delta):
            T2, R2, st2, c2 = _clll_pass(Bp, d, max_iter, False)
            if st2 == 0:
                T2 = P @ T2
                if _log_norms(B, T2) <= log_in + 1e-12:
                    return T2, 0, -1, 1
    T, R, status, col = _clll_pass(B, delta, max_iter, True)
    return T, status, col, 2


def lll_reduce(B, delta=0.75):
    """Complex (Gaussian-integer) LLL reduction of the columns of ``B``.

    Parameters
    ----------
    B : array_like, shape (m, n)
        Full column rank basis.
    delta : float
        Lovász parameter in ``(0.25, 1]``.

    Returns
    -------
    LrOutput
        ``reduced_basis = B @ transform`` with ``transform`` unimodular.  The
        result satisfies the Lovász condition and never has a larger
        orthogonality defect than ``B``.  It is also fully size-reduced
        unless ``method == "guarded"``, which happens when no plain LLL run
        could keep the defect from growing (about 1 in 3000 random 4x4
        bases).

    Raises
    ------
    SingularChannelError
        If ``B`` is rank deficient; ``.column`` names the offending column.
    """
    B = _as_matrix(B, "B")
    if not 0.25 < delta <= 1.0:
        raise ValueError("delta must lie in (0.25, 1]")
    m, n = B.shape
    if m < n:
        raise SingularChannelError(f"basis has {n} columns but only {m} rows", 0)
    T, status, col, how = _clll_kernel(B, float(delta), 100_000 * max(n, 1))
    if status == 1:
        raise SingularChannelError(f"basis is rank deficient at column {col}", col)
    if status == 2:
        raise SingularChannelError("LLL did not converge", col)
    T = T.real.round() + 1j * T.imag.round()
    return LrOutput(B @ T, T, METHODS[how])


def _normalize_qr(Q, R, n):
    d = np.diagonal(R[..., :n, :n], axis1=-2, axis2=-1)
    mag = np.abs(d)
    phase = np.where(mag > 0, d / np.where(mag > 0, mag, 1.0), 1.0)
    R = R.copy()
    Q = Q.copy()
    R[..., :n, :] *= np.conj(phase)[..., :, None]
    Q[..., :, :n] *= phase[..., None, :]
    idx = np.arange(n)
    R[..., idx, idx] = mag
    return Q, np.triu(R), mag


def qr_decompose(A):
    """Full QR with a real, strictly positive diagonal in ``R``.

    Returns ``Q`` of shape (m, m) and ``R`` of shape (m, n), exact zeros
    below the diagonal.
    """
    A = _as_matrix(A, "A")
    m, n = A.shape
    if m < n:
        raise ValueError("qr_decompose needs m >= n")
    Q, R = np.linalg.qr(A, mode="complete")
    Q, R, mag = _normalize_qr(Q, R, n)
    scale = max(np.abs(A).max(), 1e-300)
    bad = np.flatnonzero(mag <= _RANK_TOL * scale)
    if bad.size:
        raise SingularChannelError(
            f"matrix is rank deficient at column {bad[0]}", int(bad[0])
        )
    return Q, R


def rotate_received(Q, y):
    """``Q^H y`` (conjugate transpose)."""
    Q = _as_matrix(Q, "Q")
    y = _as_vector(y, "y")
    if Q.shape[0] != y.shape[0]:
        raise ValueError("dimension mismatch between Q and y")
    return Q.conj().T @ y


def is_unimodular(T, tol=1e-9) -> bool:
    T = _as_matrix(T, "T")
    if T.shape[0] != T.shape[1]:
        raise ValueError("T must be square")
    if np.any(np.abs(T.real - T.real.round()) > tol):
        return False
    if np.any(np.abs(T.imag - T.imag.round()) > tol):
        return False
    return bool(abs(abs(np.linalg.det(T)) - 1.0) <= tol)


def orthogonality_defect(B) -> float:
    """``prod ||b_i|| / sqrt(det(B^H B))``; 1 for orthogonal columns."""
    B = _as_matrix(B, "B")
    gram = B.conj().T @ B
    _, logdet = np.linalg.slogdet(gram)
    return float(np.exp(np.sum(np.log(np.linalg.norm(B, axis=0))) - 0.5 * logdet))


@dataclass(frozen=True)
class Preprocessed:
    """Per-channel inputs of the tree search.

    ``y_rot`` and ``R`` are the top ``n_t`` rows of ``Q^H y_shift`` and the
    triangular factor; ``T`` maps reduced-domain decisions back.
    """

    y_rot: np.ndarray
    R: np.ndarray
    T: np.ndarray


def preprocess(H, y, noise_power, signal_variance, *, mmse=True, delta=0.75):
    """Full per-channel chain: extend, reduce, factor, shift and rotate."""
    H = _as_matrix(H, "H")
    n_t = H.shape[1]
    npow = noise_power if mmse else 0.0
    H_ext, y_ext = mmse_extend(H, y, npow, signal_variance)
    lr = lll_reduce(H_ext, delta)
    Q, R = qr_decompose(lr.reduced_basis)
    y_rot = rotate_received(Q, shift_scale(y_ext, H_ext))
    return Preprocessed(y_rot[:n_t], R[:n_t, :n_t], lr.transform)


def preprocess_batch(H, y, noise_power, signal_variance, *, mmse=True, delta=0.75):
    """Vectorised :func:`preprocess` over a leading batch axis.

    Returns ``(y_rot, R, T, ok)``; rows with ``ok == False`` hit a singular
    channel and hold zeros.
    """
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    nb, n_r, n_t = H.shape
    reg = np.sqrt((noise_power if mmse else 0.0) / (2.0 * signal_variance))
    H_ext = np.concatenate([H, np.broadcast_to(reg * np.eye(n_t), (nb, n_t, n_t))], axis=1)
    y_ext = np.concatenate([y, np.zeros((nb, n_t), dtype=np.complex128)], axis=1)
    T = np.zeros((nb, n_t, n_t), dtype=np.complex128)
    ok = np.ones(nb, dtype=bool)
    max_iter = 100_000 * n_t
    for b in range(nb):
        t, status, _, _ = _clll_kernel(H_ext[b], float(delta), max_iter)
        if status:
            ok[b] = False
        else:
            T[b] = t
    T = T.real.round() + 1j * T.imag.round()
    Ht = H_ext @ T
    Q, R = np.linalg.qr(Ht, mode="complete")
    Q, R, mag = _normalize_qr(Q, R, n_t)
    scale = np.abs(Ht).max(axis=(1, 2))
    ok &= np.all(mag > _RANK_TOL * np.maximum(scale, 1e-300)[:, None], axis=1)
    y_shift = (y_ext - H_ext.sum(axis=2) * (1 + 1j)) / 2
    y_rot = np.einsum("bij,bi->bj", Q.conj(), y_shift)
    y_rot = y_rot[:, :n_t]
    R = R[:, :n_t, :n_t]
    y_rot[~ok] = 0
    R[~ok] = 0
    T[~ok] = 0
    return y_rot, R, T, ok


# ---------------------------------------------------------------------------
# plain-text matrix format: "rows cols" header, one row per line, "a+bi"
# ---------------------------------------------------------------------------

def _fmt_entry(z: complex) -> str:
    im = repr(float(z.imag))
    if not im.startswith("-"):
        im = "+" + im
    return f"{float(z.real)!r}{im}i"


def format_matrix(M) -> str:
    M = np.asarray(M, dtype=np.complex128)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"expected a vector or matrix, got {M.ndim} dimensions")
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(_fmt_entry(z) for z in row) for row in M]
    return "\n".join(lines) + "\n"


def _parse_entry(tok: str, line: int) -> complex:
    t = tok.strip()
    if t.endswith("i"):
        t = t[:-1] + "j"
    try:
        z = complex(t)
    except ValueError:
        raise MatrixFormatError(f"cannot parse entry {tok!r}", line) from None
    if not (np.isfinite(z.real) and np.isfinite(z.imag)):
        raise MatrixFormatError(f"non-finite entry {tok!r}", line)
    return z


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.splitlines()]
    if not lines or not lines[0].strip():
        raise MatrixFormatError("missing 'rows cols' header", 1)
    head = lines[0].split()
    try:
        rows, cols = (int(h) for h in head)
    except ValueError:
        raise MatrixFormatError(f"bad header {lines[0]!r}", 1) from None
    if rows <= 0 or cols <= 0:
        raise MatrixFormatError("dimensions must be positive", 1)
    body = lines[1:]
    # trailing blank lines are tolerated
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise MatrixFormatError(
            f"expected {rows} rows, found {len(body)}", min(len(body), rows) + 2
        )
    out = np.empty((rows, cols), dtype=np.complex128)
    for r, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != cols:
            raise MatrixFormatError(f"expected {cols} entries, found {len(toks)}", r + 2)
        out[r] = [_parse_entry(t, r + 2) for t in toks]
    return out


def read_matrix(path) -> np.ndarray:
    if isinstance(path, io.TextIOBase):
        return parse_matrix(path.read())
    with open(os.fspath(path), encoding="utf-8") as fh:
        return parse_matrix(fh.read())


def write_matrix(path, M) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        fh.write(format_matrix(M))
