"""Small dense linear algebra: Jacobi SVD, PSD square root, Gaussian fit.

Matrices here are at most a few hundred square, so the one-sided Jacobi
SVD favors robustness over asymptotic speed.  Everything runs in float64
and returns float64; callers cast when composing with float32 model math.
"""
from __future__ import annotations

import numpy as np


def svd(w: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Thin SVD via one-sided Jacobi: w = u @ diag(s) @ v.T.

    Returns (u, s, v) with u (m,k), s (k,) descending non-negative,
    v (n,k), k = min(m,n).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("svd expects a 2-d matrix")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd input contains non-finite values")
    m, n = w.shape
    if m < n:
        u, s, v = svd(w.T, tol=tol, max_sweeps=max_sweeps)
        return v, s, u

    a = w.copy()
    v = np.eye(n)
    scale = max(1.0, np.linalg.norm(w))
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                apq = float(ap @ aq)
                if abs(apq) <= tol * scale * scale:
                    continue
                app = float(ap @ ap)
                aqq = float(aq @ aq)
                off = max(off, abs(apq) / max(np.sqrt(app * aqq), 1e-300))
                # rotation angle zeroing the (p,q) inner product
                theta = 0.5 * np.arctan2(2.0 * apq, app - aqq)
                c = np.cos(theta)
                s_ = np.sin(theta)
                anew_p = c * ap + s_ * aq
                anew_q = -s_ * ap + c * aq
                a[:, p] = anew_p
                a[:, q] = anew_q
                vp = v[:, p].copy()
                v[:, p] = c * vp + s_ * v[:, q]
                v[:, q] = -s_ * vp + c * v[:, q]
        if off < 1e-12:
            break

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma)
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    eps_rank = np.finfo(np.float64).eps * scale * max(m, n)
    for j in range(n):
        if sigma[j] > eps_rank:
            u[:, j] = a[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            u[:, j] = _orthonormal_fill(u, j, m)
    return u, sigma, v


def _orthonormal_fill(u: np.ndarray, j: int, m: int) -> np.ndarray:
    """A unit vector orthogonal to the first j columns of u."""
    for k in range(m):
        cand = np.zeros(m)
        cand[k] = 1.0
        cand -= u[:, :j] @ (u[:, :j].T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-8:
            return cand / nrm
    raise RuntimeError("could not complete orthonormal basis")


def sqrtm_psd(a: np.ndarray, sym_tol: float = 1e-6, eig_floor: float = -1e-6):
    """Symmetric PSD square root: returns b with b @ b ~= a.

    Eigenvalues in [eig_floor, 0) are treated as round-off and clamped to
    zero; anything below eig_floor is an error rather than a clamp.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("sqrtm_psd expects a square matrix")
    scale = max(1.0, np.abs(a).max())
    asym = np.abs(a - a.T).max()
    if asym > sym_tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    sym = 0.5 * (a + a.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() < eig_floor * scale:
        raise ValueError(f"matrix is not PSD (eigenvalue {evals.min():.3e})")
    evals = np.clip(evals, 0.0, None)
    b = (evecs * np.sqrt(evals)) @ evecs.T
    return 0.5 * (b + b.T)


def gaussian_fit(x: np.ndarray):
    """Column mean and unbiased sample covariance of an (N,d) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("gaussian_fit expects an (N, d) matrix")
    n = x.shape[0]
    if n < 2:
        raise ValueError("gaussian_fit needs at least 2 samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / (n - 1)
    return mu, 0.5 * (cov + cov.T)
