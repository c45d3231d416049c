"""Dense float64 linear algebra used by the subspace machinery.

Matrices are plain 2-D ``numpy.ndarray`` objects.  The SVD is a one-sided
(Hestenes) Jacobi iteration with round-robin pair ordering so each step
rotates a set of disjoint column pairs at once; tall inputs are first reduced
to their square triangular factor by Householder QR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed summation order over the inner index.

    Accumulates ``a[:, k] * b[k, :]`` for k = 0, 1, ... so every entry equals
    the naive triple loop bit for bit.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return _check_finite(out, "matmul")


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def _complete_basis(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged in ``keep`` by unit vectors
    orthogonal to all kept columns.

    Each new column is the unit vector e_k with the largest residual after
    projecting out the current basis (lowest k on ties), re-orthogonalized
    twice, so the result is deterministic and always well conditioned.
    """
    m = q.shape[0]
    out = q.copy()
    basis = np.array([q[:, j] for j in range(q.shape[1]) if keep[j]]).reshape(-1, m)
    for j in range(q.shape[1]):
        if keep[j]:
            continue
        # residual of every e_k: I - B'B, column k
        resid = np.eye(m) - basis.T @ basis
        norms = np.einsum("ij,ij->j", resid, resid)
        k = int(np.argmax(norms))
        if norms[k] <= 1e-12:
            raise ConvergenceError("could not complete orthonormal basis")
        v = np.eye(m)[:, k]
        for _ in range(2):
            v = v - basis.T @ (basis @ v)
        v /= np.linalg.norm(v)
        basis = np.vstack([basis, v])
        out[:, j] = v
    return out


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall matrix (m >= n): a = Q R, Q m x n orthonormal."""
    m, n = a.shape
    r = a.copy()
    vs = []
    for k in range(n):
        x = r[k:, k]
        normx = np.linalg.norm(x)
        v = x.copy()
        if normx == 0.0:
            vs.append(None)
            continue
        v[0] += normx if x[0] >= 0 else -normx
        v /= np.linalg.norm(v)
        r[k:, k:] -= 2.0 * np.outer(v, v @ r[k:, k:])
        vs.append(v)
    q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v = vs[k]
        if v is not None:
            q[k:, :] -= 2.0 * np.outer(v, v @ q[k:, :])
    return q, np.triu(r[:n, :])


def _jacobi_columns(w: np.ndarray, accumulate: bool = True):
    """Orthogonalize the columns of ``w`` (m x n, m >= n).

    Returns (w, v, sweeps) with w_out = w_in @ v having mutually orthogonal
    columns; v is None unless ``accumulate``.  Columns are kept in round-robin tournament order so that the
    pairs of a round are the views ``[:, :h]`` and ``[:, h:][:, ::-1]``;
    an odd n is padded with a zero column that never rotates.
    """
    m, n = w.shape
    size = n + (n % 2)
    h = size // 2
    arr = np.zeros((m + n if accumulate else m, size))
    arr[:m, :n] = w
    if accumulate:
        arr[m:, :n] = np.eye(n)
    ids = np.arange(size)
    step = np.r_[0, size - 1, 1 : size - 1]
    for sweep in range(1, SVD_MAX_SWEEPS + 1):
        off = 0.0
        for _ in range(size - 1):
            x = arr[:, :h]
            y = arr[:, h:][:, ::-1]
            xw, yw = x[:m], y[:m]
            alpha = np.einsum("ij,ij->j", xw, xw)
            beta = np.einsum("ij,ij->j", yw, yw)
            gamma = np.einsum("ij,ij->j", xw, yw)
            scale = np.sqrt(alpha * beta)
            live = scale > 0
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / scale[live]
            if rel.size:
                off = max(off, float(rel.max()))
            rotate = rel > SVD_TOL
            if np.any(rotate):
                g = np.where(rotate, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = np.where(rotate, 1.0 / np.sqrt(1.0 + t * t), 1.0)
                s = np.where(rotate, c * t, 0.0)
                x0 = x.copy()
                x[...] = c * x0 - s * y
                y[...] = s * x0 + c * y
            arr = arr[:, step]
            ids = ids[step]
        if off <= SVD_TOL:
            order = np.argsort(ids)[:n]
            arr = arr[:, order]
            return arr[:m], (arr[m:] if accumulate else None), sweep
    raise ConvergenceError(
        f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps "
        f"(residual off-diagonal ratio {off:.3e})"
    )


def svd(a, compute_v: bool = True) -> SvdResult:
    """Thin SVD ``a = U diag(s) V'`` with r = min(m, n) columns.

    Singular values are descending; every column of U has its
    largest-magnitude entry positive.  With ``compute_v=False`` the result's
    V is None (cheaper when only the left subspace is wanted).
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < 1 or n < 1:
        raise ValueError(f"svd needs a non-empty matrix, got shape {a.shape}")
    _check_finite(a, "svd input")
    transposed = m < n
    work = (a.T if transposed else a).copy()
    q = None
    if work.shape[0] > work.shape[1]:
        # Jacobi on the square triangular factor; U is mapped back through Q
        q, work = householder_qr(work)
    w, v, _ = _jacobi_columns(work, accumulate=compute_v or transposed)

    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    smax = float(sigma.max()) if sigma.size else 0.0
    cutoff = smax * max(work.shape) * np.finfo(np.float64).eps
    keep = sigma > cutoff
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not np.all(keep):
        u = _complete_basis(u, keep)
    if q is not None:
        u = q @ u

    order = np.argsort(-sigma, kind="stable")
    sigma, u = sigma[order], u[:, order]
    if v is not None:
        v = v[:, order]

    if transposed:
        u, v = v, u
    # sign convention: largest-magnitude entry of each U column positive
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    if compute_v:
        v = v * signs
    else:
        v = None
    return SvdResult(U=u, singular_values=sigma, V=v)


def rank_for_threshold(s, frobenius_sq: float, eps_th: float) -> int:
    """Smallest k whose leading singular-value energy reaches ``eps_th`` of
    the total; 0 when the matrix is all zeros."""
    if not 0.0 < eps_th < 1.0:
        raise ValueError(f"eps_th must lie in (0, 1), got {eps_th}")
    if frobenius_sq <= 0.0:
        return 0
    energy = np.cumsum(np.asarray(s, dtype=np.float64) ** 2)
    hits = np.nonzero(energy >= eps_th * frobenius_sq)[0]
    if hits.size == 0:
        return int(energy.size)
    return int(hits[0]) + 1
