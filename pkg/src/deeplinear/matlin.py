"""Dense linear algebra for small real matrices.

Matrices are plain 2-D ``float64`` numpy arrays. Products, transposes and
Frobenius norms come straight from numpy; the factorizations (SVD, symmetric
eigendecomposition) are cyclic Jacobi schemes compiled with numba so that
per-iteration monitors stay cheap.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import ContractViolation, NumericalFailure

MAX_SWEEPS = 60
OFFDIAG_TOL = 1e-14
SYMMETRY_TOL = 1e-8
NEG_EIG_TOL = 1e-10
# Singular values / eigenvalues below this fraction of the largest are roundoff
# and are treated as exact zeros.
ZERO_REL_TOL = 1e-13


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (scalars become 1x1)."""
    m = np.array(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ContractViolation(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"{name} has non-finite entries")
    return m


def frobenius(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product <a, b> = Tr(a^T b)."""
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


@numba.njit(cache=True)
def _one_sided_jacobi(g, v, tol_abs):
    # Hestenes rotations on the columns of g (m x n, m >= n), accumulated in v.
    m, n = g.shape
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += g[i, p] * g[i, p]
                    beta += g[i, q] * g[i, q]
                    gamma += g[i, p] * g[i, q]
                if gamma == 0.0:
                    continue
                if abs(gamma) <= OFFDIAG_TOL * math.sqrt(alpha * beta) or abs(gamma) <= tol_abs:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = 1.0 / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                if zeta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    gp = g[i, p]
                    gq = g[i, q]
                    g[i, p] = c * gp - s * gq
                    g[i, q] = s * gp + c * gq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1


@numba.njit(cache=True)
def _two_sided_jacobi(a, q, tol_abs):
    # Classical cyclic Jacobi on a symmetric matrix; a is diagonalized in place.
    n = a.shape[0]
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                if abs(apr) <= OFFDIAG_TOL * math.sqrt(abs(a[p, p] * a[r, r])) or abs(apr) <= tol_abs:
                    a[p, r] = 0.0
                    a[r, p] = 0.0
                    continue
                rotated = True
                tau = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = 1.0 / (abs(tau) + math.sqrt(1.0 + tau * tau))
                if tau < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for k in range(n):
                    akp = a[k, p]
                    akr = a[k, r]
                    a[k, p] = c * akp - s * akr
                    a[k, r] = s * akp + c * akr
                for k in range(n):
                    apk = a[p, k]
                    ark = a[r, k]
                    a[p, k] = c * apk - s * ark
                    a[r, k] = s * apk + c * ark
                a[p, r] = 0.0
                a[r, p] = 0.0
                for k in range(n):
                    qkp = q[k, p]
                    qkr = q[k, r]
                    q[k, p] = c * qkp - s * qkr
                    q[k, r] = s * qkp + c * qkr
        if not rotated:
            return sweep + 1
    return -1


def _fix_signs(u: np.ndarray, *others: np.ndarray) -> None:
    # Largest-magnitude entry of each column of u made nonnegative; same flips on others.
    if u.size == 0:
        return
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u *= signs
    for o in others:
        o *= signs


def _complete_orthonormal(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``valid`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if valid[j]]
    out = u.copy()
    candidates = iter(np.eye(m))
    for j in range(k):
        if valid[j]:
            continue
        for e in candidates:
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nw = np.linalg.norm(w)
            if nw > 0.5:
                w /= nw
                out[:, j] = w
                basis.append(w)
                break
    return out


def svd_thin(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``a = U diag(S) V^T`` by one-sided Jacobi.

    Returns ``U`` (rows x k), ``S`` (k,) descending and ``V`` (cols x k) with
    ``k = min(rows, cols)``. Column signs are fixed so the largest-magnitude
    entry of each column of ``U`` is nonnegative.
    """
    a = as_matrix(a)
    transposed = a.shape[0] < a.shape[1]
    g = np.array(a.T if transposed else a, order="C")
    m, n = g.shape
    v = np.eye(n)
    scale = frobenius(g)
    sweeps = _one_sided_jacobi(g, v, (OFFDIAG_TOL * scale) ** 2)
    if sweeps < 0:
        raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")
    s = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[:, order]
    v = v[:, order]
    cutoff = max(ZERO_REL_TOL * s[0], 1e-300) if s.size else 0.0
    valid = s > cutoff
    u = np.zeros_like(g)
    u[:, valid] = g[:, valid] / s[valid]
    if not np.all(valid):
        u = _complete_orthonormal(u, valid)
        s[~valid] = 0.0
    if transposed:
        u, v = v, u
    _fix_signs(u, v)
    return u, s, v


def singular_values(a) -> np.ndarray:
    """Singular values of ``a`` in descending order (length min(rows, cols))."""
    a = as_matrix(a)
    if a.shape == (1, 1):
        return np.array([abs(a[0, 0])])
    if a.shape[0] == 1 or a.shape[1] == 1:
        return np.array([frobenius(a)])
    g = np.array(a.T if a.shape[0] < a.shape[1] else a, order="C")
    v = np.eye(g.shape[1])
    if _one_sided_jacobi(g, v, (OFFDIAG_TOL * frobenius(g)) ** 2) < 0:
        raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")
    return np.sort(np.sqrt(np.sum(g * g, axis=0)))[::-1]


def sigma_min(a) -> float:
    return float(singular_values(a)[-1])


def sigma_max(a) -> float:
    """Spectral norm."""
    return float(singular_values(a)[0])


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition ``S = Q diag(L) Q^T`` of a symmetric matrix, L descending."""
    s = as_matrix(s)
    n = s.shape[0]
    if s.shape[1] != n:
        raise ContractViolation(f"sym_eig needs a square matrix, got {s.shape}")
    scale = frobenius(s)
    asym = frobenius(s - s.T)
    if asym > SYMMETRY_TOL * max(1.0, scale):
        raise ContractViolation(f"matrix is not symmetric (||S - S^T||_F = {asym:.3e})")
    if n == 1:
        return np.ones((1, 1)), s[0].copy()
    a = np.array(0.5 * (s + s.T), order="C")
    q = np.eye(n)
    if _two_sided_jacobi(a, q, OFFDIAG_TOL * scale) < 0:
        raise NumericalFailure(f"Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps")
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    q = q[:, order]
    _fix_signs(q)
    return q, lam


def psd_power(s, p: float) -> np.ndarray:
    """Fractional power of a symmetric PSD matrix, ``Q diag(L^p) Q^T``.

    Eigenvalues slightly below zero (roundoff) are clamped to 0, and ``0^0``
    is taken as 1 so that ``p = 0`` always yields the identity.
    """
    return psd_powers(s, [p])[0]


def psd_powers(s, exponents) -> list[np.ndarray]:
    """Several fractional powers of one PSD matrix from a single eigendecomposition."""
    q, lam = sym_eig(s)
    floor = -NEG_EIG_TOL * max(1.0, float(np.max(np.abs(lam))))
    if lam[-1] < floor:
        raise ContractViolation(f"matrix is not PSD (eigenvalue {lam[-1]:.3e})")
    lam = np.where(lam > ZERO_REL_TOL * max(lam[0], 0.0), lam, 0.0)
    out = []
    for p in exponents:
        if p < 0:
            raise ContractViolation(f"psd_power needs p >= 0, got {p}")
        if p == 0:
            out.append(np.eye(lam.size))
        else:
            m = (q * lam**p) @ q.T
            out.append(0.5 * (m + m.T))
    return out
