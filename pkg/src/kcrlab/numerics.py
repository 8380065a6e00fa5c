"""Dense linear algebra, seeded sampling and the finite-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

import copy

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

UNIFORM_CLAMP = 1e-12
_MAX_SWEEPS = 64


def as_matrix(a, name="matrix") -> np.ndarray:
    """Convert to a finite 2-D float64 array (copying only when needed)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(f"{name}: non-finite entry at index {tuple(int(i) for i in bad)}")
    return arr


class Rng:
    """Seeded generator addressed by ``(seed, stream)``.

    Identical seed, stream and call sequence reproduce identical draws.
    ``fork`` derives an independent child stream without touching this one.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    def fork(self, stream: int) -> "Rng":
        return Rng(self.seed, self.stream * 1_000_003 + int(stream) + 1)

    def clone(self) -> "Rng":
        return copy.deepcopy(self)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        if not 0 <= k <= n:
            raise ArgumentError(f"cannot draw {k} distinct indices from {n}")
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: Rng) -> np.ndarray:
    """I.i.d. standard Gumbel draws, ``-log(-log(u))`` with clamped uniforms."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if int(np.prod(shape)) == 0:
        return np.zeros(shape)
    return gumbel_from_uniform(rng.uniform(shape))


def _round_robin(m: int):
    """Pairings for one sweep: ``m - 1`` rounds of ``m // 2`` disjoint pairs."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(a):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled in round-robin order so each round applies
    ``n // 2`` disjoint rotations at once. Returns ``(eigenvalues, V)`` with
    eigenvalues sorted descending (stable: ties keep the lower original index
    first) and ``A = V diag(w) V^T``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got shape {a.shape}")
    check_finite(a, "sym_eig input")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    scale = np.max(np.abs(a))
    if np.max(np.abs(a - a.T)) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise NumericError("sym_eig: input is not symmetric within tolerance")
    A = 0.5 * (a + a.T)
    V = np.eye(n)
    if n > 1:
        m = n + (n % 2)
        rounds = []
        for pairs in _round_robin(m):
            p = np.array([min(i, j) for i, j in pairs if max(i, j) < n], dtype=np.intp)
            q = np.array([max(i, j) for i, j in pairs if max(i, j) < n], dtype=np.intp)
            rounds.append((p, q))
        fro = np.linalg.norm(A)
        prev = np.inf
        for _ in range(_MAX_SWEEPS):
            off = np.linalg.norm(A - np.diag(np.diag(A)))
            # stop at the rounding floor, or once progress stalls below 1e-11 relative
            if off <= 1e-14 * fro or (off <= 1e-11 * fro and off > 0.25 * prev):
                break
            prev = off
            for p, q in rounds:
                apq = A[p, q]
                active = np.abs(apq) > 1e-300
                if not np.any(active):
                    continue
                pa, qa, apq = p[active], q[active], apq[active]
                theta = (A[qa, qa] - A[pa, pa]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t[theta == 0.0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # the round's rotations act on disjoint (p, q) pairs, so they form one orthogonal R
                R = np.eye(n)
                R[pa, pa] = c
                R[qa, qa] = c
                R[pa, qa] = -s
                R[qa, pa] = s
                A = R @ A @ R.T
                V = V @ R.T
            A = 0.5 * (A + A.T)
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def pseudo_inverse(a, tol=None) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix via its eigenpairs.

    Eigenvalues at or below ``tol`` (default ``1e-10 * lambda_max``) are
    treated as zero.
    """
    w, V = sym_eig(a)
    if w.size == 0:
        return np.zeros((0, 0))
    if tol is None:
        tol = 1e-10 * max(w[0], 0.0)
    if tol < 0:
        raise ArgumentError("tol must be non-negative")
    inv = np.zeros_like(w)
    keep = w > tol
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def finite_diff_grad(f, at, step=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``.

    The step is relative: ``h = step * max(1, |x_i|)`` per entry.
    """
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: f is non-finite when perturbing entry {np.unravel_index(i, x.shape)}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
