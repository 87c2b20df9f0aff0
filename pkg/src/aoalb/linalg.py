"""Dense complex linear algebra used by the subspace estimators.

The Hermitian eigensolver is a cyclic two-sided Jacobi method compiled with
numba.  All routines accept a single matrix or a stack of matrices in the
leading axes.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import (
    EmptySnapshotBlock,
    NoConvergence,
    NonSquare,
    NotHermitian,
    RankDeficient,
    ShapeMismatch,
)

HERMITIAN_RTOL = 1e-9
OFFDIAG_RTOL = 1e-12
MAX_SWEEPS = 100
# components below this magnitude are treated as zero by the phase convention
_PHASE_EPS = 1e-10


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


class LeastSquaresResult(NamedTuple):
    solution: np.ndarray
    residual: np.ndarray


@njit(cache=True)
def _off_norm(ar, ai):
    n = ar.shape[0]
    off = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                off += ar[i, j] ** 2 + ai[i, j] ** 2
    return np.sqrt(off)


@njit(cache=True)
def _jacobi_inplace(ar, ai, vr, vi, tol, max_sweeps):
    """Diagonalise the Hermitian matrix ``ar + i ai`` in place.

    Real and imaginary parts are kept in separate arrays and rotations are
    applied to contiguous rows so the inner loops vectorise.  ``vr + i vi``
    accumulates the transposed eigenvector matrix.  Returns the number of
    sweeps used, or -1 when the cap is hit.
    """
    n = ar.shape[0]
    # entries this small cannot keep the off-diagonal mass above tol
    skip = tol / n
    for sweep in range(max_sweeps + 1):
        if _off_norm(ar, ai) <= tol:
            return sweep
        if sweep == max_sweeps:
            return -1
        for p in range(n - 1):
            for q in range(p + 1, n):
                xr = ar[p, q]
                xi = ai[p, q]
                mag = np.sqrt(xr * xr + xi * xi)
                if mag <= skip:
                    continue
                er = xr / mag
                ei = xi / mag
                app = ar[p, p]
                aqq = ar[q, q]
                zeta = (aqq - app) / (2.0 * mag)
                t = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # G = diag(1, conj(e)) @ [[c, s], [-s, c]] with e = a_pq / |a_pq|;
                # rows of Gᴴ A, then columns follow by Hermitian symmetry
                ser = s * er
                sei = s * ei
                cer = c * er
                cei = c * ei
                for k in range(n):
                    pr = ar[p, k]
                    pi = ai[p, k]
                    qr = ar[q, k]
                    qi = ai[q, k]
                    ar[p, k] = c * pr - (ser * qr - sei * qi)
                    ai[p, k] = c * pi - (ser * qi + sei * qr)
                    ar[q, k] = s * pr + (cer * qr - cei * qi)
                    ai[q, k] = s * pi + (cer * qi + cei * qr)
                for k in range(n):
                    ar[k, p] = ar[p, k]
                    ai[k, p] = -ai[p, k]
                    ar[k, q] = ar[q, k]
                    ai[k, q] = -ai[q, k]
                ar[p, q] = 0.0
                ai[p, q] = 0.0
                ar[q, p] = 0.0
                ai[q, p] = 0.0
                ar[p, p] = app - t * mag
                ai[p, p] = 0.0
                ar[q, q] = aqq + t * mag
                ai[q, q] = 0.0
                # accumulate V G through its transpose, again row-wise
                for k in range(n):
                    pr = vr[p, k]
                    pi = vi[p, k]
                    qr = vr[q, k]
                    qi = vi[q, k]
                    vr[p, k] = c * pr - (ser * qr + sei * qi)
                    vi[p, k] = c * pi - (ser * qi - sei * qr)
                    vr[q, k] = s * pr + (cer * qr + cei * qi)
                    vi[q, k] = s * pi + (cer * qi - cei * qr)
    return -1


@njit(cache=True)
def _eig_batch(stack, max_sweeps):
    """Symmetrise, diagonalise, sort descending and fix phases per matrix.

    Returns eigenvalues, eigenvectors, sweeps used and the relative asymmetry
    of each input.
    """
    b, n, _ = stack.shape
    values = np.empty((b, n))
    vectors = np.zeros((b, n, n), dtype=np.complex128)
    sweeps = np.empty(b, dtype=np.int64)
    asym = np.zeros(b)
    ar = np.empty((n, n))
    ai = np.empty((n, n))
    vr = np.empty((n, n))
    vi = np.empty((n, n))
    for i in range(b):
        m = stack[i]
        fro2 = 0.0
        skew2 = 0.0
        for r in range(n):
            for c in range(n):
                x = m[r, c]
                y = m[c, r].conjugate()
                d = x - y
                fro2 += x.real ** 2 + x.imag ** 2
                skew2 += d.real ** 2 + d.imag ** 2
                h = 0.5 * (x + y)
                ar[r, c] = h.real
                ai[r, c] = h.imag
                vr[r, c] = 1.0 if r == c else 0.0
                vi[r, c] = 0.0
        fro = np.sqrt(fro2)
        asym[i] = np.sqrt(skew2) / fro if fro > 0 else 0.0
        sweeps[i] = _jacobi_inplace(ar, ai, vr, vi, OFFDIAG_RTOL * fro, max_sweeps)
        diag = np.empty(n)
        for k in range(n):
            diag[k] = ar[k, k]
        order = np.argsort(-diag, kind="mergesort")
        for k in range(n):
            col = order[k]
            values[i, k] = diag[col]
            # column ``col`` of V is row ``col`` of the accumulated transpose
            rot = 1.0 + 0.0j
            pivot = -1
            for r in range(n):
                z = vr[col, r] + 1j * vi[col, r]
                mag = abs(z)
                if mag > _PHASE_EPS:
                    rot = mag / z
                    pivot = r
                    break
            for r in range(n):
                vectors[i, r, k] = (vr[col, r] + 1j * vi[col, r]) * rot
            if pivot >= 0:
                vectors[i, pivot, k] = abs(vr[col, pivot] + 1j * vi[col, pivot])
    return values, vectors, sweeps, asym


def _as_stack(a: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise NonSquare(f"expected square matrices, got shape {a.shape}")
    lead = a.shape[:-2]
    n = a.shape[-1]
    return np.ascontiguousarray(a.reshape(-1, n, n), dtype=np.complex128), lead


def hermitian_eig(a: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a Hermitian matrix (or stack of them).

    Eigenvalues come back in descending order.  Each eigenvector's first
    component that is not numerically zero is made real and positive.
    """
    stack, lead = _as_stack(a)
    n = stack.shape[-1]
    values, vectors, sweeps, asym = _eig_batch(stack, MAX_SWEEPS)
    if np.any(asym > HERMITIAN_RTOL):
        raise NotHermitian(
            f"asymmetry {asym.max():.3e} exceeds {HERMITIAN_RTOL:g} relative"
        )
    if np.any(sweeps < 0):
        raise NoConvergence(f"Jacobi sweeps exceeded {MAX_SWEEPS}")
    return EigenDecomposition(
        values.reshape(lead + (n,)), vectors.reshape(lead + (n, n))
    )


def sample_covariance(snapshots: np.ndarray) -> np.ndarray:
    """Spatial covariance ``X Xᴴ / T`` of a sensors × T block (or a stack)."""
    x = np.asarray(snapshots)
    if x.ndim < 2:
        raise ShapeMismatch(f"expected sensors x snapshots, got shape {x.shape}")
    t = x.shape[-1]
    if t < 1:
        raise EmptySnapshotBlock("snapshot block has no columns")
    r = x @ np.swapaxes(x, -1, -2).conj() / t
    # exact Hermitian symmetry regardless of BLAS summation order
    return 0.5 * (r + np.swapaxes(r, -1, -2).conj())


@njit(cache=True)
def _householder_solve(a, b):
    """Least squares for each system in a stack via Householder QR.

    Returns solutions, residual norms and the smallest/largest |R_ii| ratio.
    """
    batch, m, n = a.shape
    k = b.shape[2]
    x = np.zeros((batch, n, k), dtype=np.complex128)
    residual = np.empty(batch)
    conditioning = np.empty(batch)
    r = np.empty((m, n), dtype=np.complex128)
    y = np.empty((m, k), dtype=np.complex128)
    for s in range(batch):
        r[:, :] = a[s]
        y[:, :] = b[s]
        for j in range(n):
            norm = 0.0
            for i in range(j, m):
                norm += r[i, j].real ** 2 + r[i, j].imag ** 2
            norm = np.sqrt(norm)
            if norm == 0.0:
                continue
            head = r[j, j]
            phase = head / abs(head) if abs(head) > 0 else 1.0 + 0.0j
            alpha = -phase * norm
            # v = column - alpha e_j, reflector H = I - 2 v vᴴ / (vᴴ v)
            r[j, j] = head - alpha
            vnorm2 = 0.0
            for i in range(j, m):
                vnorm2 += r[i, j].real ** 2 + r[i, j].imag ** 2
            for c in range(j + 1, n):
                dot = 0.0 + 0.0j
                for i in range(j, m):
                    dot += r[i, j].conjugate() * r[i, c]
                f = 2.0 * dot / vnorm2
                for i in range(j, m):
                    r[i, c] -= f * r[i, j]
            for c in range(k):
                dot = 0.0 + 0.0j
                for i in range(j, m):
                    dot += r[i, j].conjugate() * y[i, c]
                f = 2.0 * dot / vnorm2
                for i in range(j, m):
                    y[i, c] -= f * r[i, j]
            r[j, j] = alpha
        lo = np.inf
        hi = 0.0
        for j in range(n):
            d = abs(r[j, j])
            lo = min(lo, d)
            hi = max(hi, d)
        conditioning[s] = lo / hi if hi > 0 else 0.0
        if conditioning[s] == 0.0:
            residual[s] = np.nan
            continue
        for c in range(k):
            for i in range(n - 1, -1, -1):
                acc = y[i, c]
                for j in range(i + 1, n):
                    acc -= r[i, j] * x[s, j, c]
                x[s, i, c] = acc / r[i, i]
        res = 0.0
        for c in range(k):
            for i in range(n, m):
                res += y[i, c].real ** 2 + y[i, c].imag ** 2
        residual[s] = np.sqrt(res)
    return x, residual, conditioning


def least_squares(a: np.ndarray, b: np.ndarray) -> LeastSquaresResult:
    """Minimise ‖a x − b‖_F through a Householder QR factorisation.

    ``residual`` holds the Frobenius norm of ``a x − b`` per system.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-2] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    m, n = a.shape[-2:]
    if m < n:
        raise RankDeficient(f"underdetermined system with {m} rows and {n} columns")
    lead = a.shape[:-2]
    a3 = np.ascontiguousarray(a.reshape((-1, m, n)), dtype=np.complex128)
    b3 = np.ascontiguousarray(b.reshape((-1, m, b.shape[-1])), dtype=np.complex128)
    x, residual, conditioning = _householder_solve(a3, b3)
    if np.any(conditioning <= max(m, n) * np.finfo(float).eps):
        raise RankDeficient("matrix is rank deficient")
    return LeastSquaresResult(x.reshape(lead + x.shape[1:]), residual.reshape(lead))
