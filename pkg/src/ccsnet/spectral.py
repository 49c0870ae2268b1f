"""Extreme eigenvalues of symmetric operators known only through products.

The default solver is Lanczos with full reorthogonalisation, run on a batch
of independent operators at once (one per row). It builds the same Krylov
space that power iteration walks through but keeps every iterate, so the
extreme Ritz values converge far faster than the plain power sequence when
the spectrum has nearly equal magnitudes at both ends. Convergence is
declared when the residual bound ``|beta_j * s_j|`` of both extreme Ritz
pairs falls below ``tol`` times the spectral scale; for symmetric operators
that bound also bounds the eigenvalue error.

``method="power"`` keeps the two-stage shifted power iteration (dominant
eigenvalue, then the dominant eigenvalue of ``H - mu I``) for comparison.
"""

from __future__ import annotations

import numpy as np

from ccsnet.errors import NumericError


def _checked(w):
    if not np.all(np.isfinite(w)):
        raise NumericError("operator returned non-finite values")
    return w


def batched_lanczos_extremes(op, batch, dim, tol=1e-6, max_iter=1000, seed=0, check_every=8):
    """Smallest and largest eigenvalue of ``batch`` symmetric operators.

    ``op`` maps an array (batch, dim) to (batch, dim), applying operator ``i``
    to row ``i``. Returns two arrays of length ``batch``.
    """
    rng = np.random.default_rng(seed)
    steps = min(dim, max_iter)
    # the basis grows on demand; a full (batch, dim, dim) block rarely fits
    basis = np.zeros((batch, min(steps, 32) + 1, dim))
    alpha = np.zeros((batch, steps))
    beta = np.zeros((batch, steps))
    lo = np.zeros(batch)
    hi = np.zeros(batch)
    active = np.ones(batch, dtype=bool)

    q = rng.standard_normal((batch, dim))
    basis[:, 0] = q / np.linalg.norm(q, axis=1, keepdims=True)

    for j in range(steps):
        if basis.shape[1] < j + 2:
            grown = np.zeros((batch, min(2 * basis.shape[1], steps + 1), dim))
            grown[:, : basis.shape[1]] = basis
            basis = grown
        w = _checked(op(basis[:, j]))
        a = np.einsum("bd,bd->b", w, basis[:, j])
        alpha[:, j] = a
        # full reorthogonalisation, twice for stability
        for _ in range(2):
            coeff = np.einsum("bkd,bd->bk", basis[:, : j + 1], w)
            w = w - np.einsum("bk,bkd->bd", coeff, basis[:, : j + 1])
        b = np.linalg.norm(w, axis=1)
        beta[:, j] = b
        scale = np.maximum(np.abs(alpha[:, : j + 1]).max(axis=1), beta[:, : j + 1].max(axis=1))
        broke = active & (b <= 1e-12 * np.maximum(scale, 1e-300))
        safe = np.where(b > 0, b, 1.0)
        basis[:, j + 1] = np.where(broke[:, None], 0.0, w / safe[:, None])

        last = j + 1 == steps
        if not (broke.any() or last or (j + 1) % check_every == 0):
            continue
        rows = np.flatnonzero(active)
        m = j + 1
        tri = np.zeros((rows.size, m, m))
        idx = np.arange(m)
        tri[:, idx, idx] = alpha[rows, :m]
        tri[:, idx[:-1], idx[1:]] = beta[rows, : m - 1]
        tri[:, idx[1:], idx[:-1]] = beta[rows, : m - 1]
        vals, vecs = np.linalg.eigh(tri)
        res_lo = np.abs(beta[rows, j] * vecs[:, -1, 0])
        res_hi = np.abs(beta[rows, j] * vecs[:, -1, -1])
        spread = np.maximum(np.abs(vals[:, 0]), np.abs(vals[:, -1]))
        done = broke[rows] | last | (np.maximum(res_lo, res_hi) <= tol * spread)
        done |= spread == 0.0
        fin = rows[done]
        lo[fin] = vals[done, 0]
        hi[fin] = vals[done, -1]
        active[fin] = False
        if not active.any():
            break
    return lo, hi


def _power(op, start, tol, max_iter):
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iter):
        w = _checked(op(v))
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0 or np.linalg.norm(w - lam * v) <= tol * abs(lam):
            break
        v = w / norm
    return lam


def extreme_eigenvalues(op, dim, tol=1e-6, max_iter=1000, seed=0, method="lanczos"):
    """(lambda_min, lambda_max) of a symmetric operator ``op: R^dim -> R^dim``."""
    if method == "power":
        rng = np.random.default_rng(seed)
        mu = _power(op, rng.standard_normal(dim), tol, max_iter)
        nu = _power(lambda v: op(v) - mu * v, rng.standard_normal(dim), tol, max_iter) + mu
        return min(mu, nu), max(mu, nu)
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    lo, hi = batched_lanczos_extremes(
        lambda v: np.asarray(op(v[0]), dtype=np.float64)[None, :], 1, dim, tol, max_iter, seed
    )
    return float(lo[0]), float(hi[0])
