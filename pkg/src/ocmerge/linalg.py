"""Dense float64 kernel: products, Frobenius geometry and a full SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Vectors
are always carried as n x 1 columns so every parameter is a matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NumericalError, ShapeError

EPS = np.finfo(np.float64).eps


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting other ranks."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name}: expected a non-empty 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: non-finite entries")


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed, sequential accumulation order.

    Entry (i, j) is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    i.e. exactly the naive triple loop, so results do not depend on the BLAS
    build or thread count.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def frobenius_inner(a, b) -> float:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"frobenius_inner: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def frobenius_norm(a) -> float:
    a = as_matrix(a, "a")
    # scale first so squares of large entries cannot overflow
    scale = float(np.max(np.abs(a)))
    if scale == 0.0 or not np.isfinite(scale):
        return scale if np.isfinite(scale) else float("inf")
    s = a / scale
    return scale * float(np.sqrt(np.sum(s * s)))


def diag_embed(sigma, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    k = min(shape)
    out[np.arange(k), np.arange(k)] = np.asarray(sigma)[:k]
    return out


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray      # m x m
    sigma: np.ndarray  # min(m, n), descending
    v: np.ndarray      # n x n

    def reconstruct(self) -> np.ndarray:
        m, n = self.u.shape[0], self.v.shape[0]
        return self.u @ diag_embed(self.sigma, (m, n)) @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            x, y = players[i], players[size - 1 - i]
            if x >= 0 and y >= 0:
                p.append(min(x, y))
                q.append(max(x, y))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Orthogonalise the columns of tall ``a`` (m >= n) by plane rotations.

    Returns ``(w, v, sweeps)`` with ``a @ v == w`` and mutually orthogonal
    columns of ``w``.
    """
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    if n == 1:
        return w, v, 0
    schedule = _round_robin(n)
    tol = m * EPS
    cap = 100 * max(m, n)
    for sweep in range(1, cap + 1):
        rotated = False
        for p, q in schedule:
            wp, wq = w[:, p], w[:, q]
            alpha = np.sum(wp * wp, axis=0)
            beta = np.sum(wq * wq, axis=0)
            gamma = np.sum(wp * wq, axis=0)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return w, v, sweep
    raise ConvergenceError(f"one-sided Jacobi did not converge in {cap} sweeps", cap)


def _complete_basis(u: np.ndarray, m: int) -> np.ndarray:
    """Extend orthonormal columns ``u`` (m x r) to an m x m orthogonal matrix."""
    cols = [u[:, i] for i in range(u.shape[1])]
    basis = np.column_stack(cols) if cols else np.zeros((m, 0))
    while basis.shape[1] < m:
        # unit vector least represented in the current span
        residual = 1.0 - np.sum(basis * basis, axis=1)
        k = int(np.argmax(residual))
        x = np.zeros(m)
        x[k] = 1.0
        for _ in range(2):
            x = x - basis @ (basis.T @ x)
        x /= np.linalg.norm(x)
        basis = np.column_stack([basis, x])
    return basis


def _fix_signs(u: np.ndarray, v: np.ndarray, k: int) -> None:
    """Make the first non-negligible entry of each U column non-negative."""
    for i in range(u.shape[1]):
        col = u[:, i]
        big = np.abs(col) > 1e-12 * np.max(np.abs(col))
        first = int(np.argmax(big))
        if col[first] < 0:
            u[:, i] = -col
            if i < k:
                v[:, i] = -v[:, i]


def svd_full(a) -> SvdResult:
    """Full SVD ``a = u @ diag(sigma) @ v.T`` via one-sided Jacobi.

    Both factors are square and orthogonal. Raises ``ConvergenceError`` after
    ``100 * max(m, n)`` sweeps without convergence.
    """
    a = as_matrix(a)
    _check_finite(a, "svd_full")
    m, n = a.shape
    transposed = m < n
    if transposed:
        a = a.T
        m, n = n, m
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        u, sigma, v = np.eye(m), np.zeros(n), np.eye(n)
    else:
        w, v, _ = _one_sided_jacobi(a / scale)
        norms = np.sqrt(np.sum(w * w, axis=0))
        order = np.argsort(-norms, kind="stable")
        norms, w, v = norms[order], w[:, order], v[:, order]
        # columns whose norm is at rounding level carry no direction
        keep = norms > norms[0] * max(m, n) * EPS
        r = int(np.count_nonzero(keep))
        ur = w[:, :r] / norms[:r]
        # one Gram-Schmidt pass cleans up residual rotation error
        for i in range(1, r):
            x = ur[:, i] - ur[:, :i] @ (ur[:, :i].T @ ur[:, i])
            ur[:, i] = x / np.linalg.norm(x)
        u = _complete_basis(ur, m)
        sigma = norms * scale
    if transposed:
        u, v = v, u
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _fix_signs(u, v, len(sigma))
    return SvdResult(u=u, sigma=sigma, v=v)
