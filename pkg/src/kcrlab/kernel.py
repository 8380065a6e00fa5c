"""Gram matrices, kernel complexity, truncated nuclear norms and their Nystrom
approximation, plus the gradient-descent recursion on a linear head.

Conventions: features ``F`` are ``n x d_feat``; ``K = F F^T`` and
``K_n = K / n``. Eigenvalues ``lam`` always refer to ``K_n``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateKernelError, DimensionError, NumericError, StepSizeError
from .numerics import Rng, as_matrix, sym_eig

EIG_CLAMP = 1e-10
DROP_RATIO = 1e-12
DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class KernelSpectrum:
    eigenvalues: np.ndarray
    n: int
    r0: int

    @property
    def trace(self) -> float:
        return math.fsum(self.eigenvalues)


@dataclass(frozen=True)
class NystromFactors:
    """Landmark factorization of ``K``.

    ``factor`` is ``C Q Lambda^{-1/2}`` so that the Nystrom approximation is
    ``K~ = factor @ factor.T``. ``U_tilde`` holds the orthonormal eigenvectors
    of ``K~`` ordered by descending eigenvalue; ``P = F^T U_tilde``.
    """

    landmark_indices: np.ndarray
    Q: np.ndarray
    Lambda: np.ndarray
    factor: np.ndarray
    U_tilde: np.ndarray
    approx_eigenvalues: np.ndarray
    P: np.ndarray
    epoch_stamp: int = 0

    @property
    def r0(self) -> int:
        return self.U_tilde.shape[1]


@dataclass
class BoundReport:
    """Unit-constant KCR bounds: ``train_residual -/+ (kc + x/n)``."""

    epoch: int
    train_residual: float
    kc: float
    akc: float
    x: float
    n: int
    lower: float
    upper: float
    constants: str = field(default="unit-constant")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("epoch", "train_residual", "kc", "akc", "x", "lower", "upper")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gram(F, normalize=False) -> np.ndarray:
    F = as_matrix(F, "features")
    if F.shape[0] == 0 or F.shape[1] == 0:
        raise DimensionError(f"gram: empty feature matrix {F.shape}")
    K = F @ F.T
    K = 0.5 * (K + K.T)
    return K / F.shape[0] if normalize else K


def _clamped(w):
    w = np.where(w < -EIG_CLAMP, w, np.maximum(w, 0.0))
    if np.any(w < 0):
        raise NumericError(f"matrix is not PSD: eigenvalue {w.min():.3e}")
    return w


def spectrum(K_n, r0=None) -> KernelSpectrum:
    """Descending, clamped eigenvalues of a normalized gram matrix."""
    K_n = as_matrix(K_n, "K_n")
    n = K_n.shape[0]
    if K_n.shape[1] != n:
        raise DimensionError("spectrum: K_n must be square")
    w, _ = sym_eig(K_n)
    r0 = n if r0 is None else min(int(r0), n)
    return KernelSpectrum(_clamped(w)[:r0], n, r0)


def spectrum_from_features(F) -> KernelSpectrum:
    """Spectrum of ``F F^T / n`` computed on the smaller of the two grams.

    ``F F^T`` and ``F^T F`` share their nonzero eigenvalues, so for tall
    feature matrices only a ``d_feat x d_feat`` problem is solved.
    """
    F = as_matrix(F, "features")
    n, d = F.shape
    if n == 0 or d == 0:
        raise DimensionError(f"spectrum_from_features: empty feature matrix {F.shape}")
    r0 = min(n, d)
    small = F.T @ F if d < n else F @ F.T
    w, _ = sym_eig(0.5 * (small + small.T) / n)
    return KernelSpectrum(_clamped(w)[:r0], n, r0)


def _suffix_sums(values):
    """Exact-rounded suffix sums ``s[h] = sum(values[h:])`` for h = 0..len."""
    vals = [float(v) for v in values]
    return [math.fsum(vals[h:]) for h in range(len(vals) + 1)]


def _kc_minimize(suffix, n):
    best, best_h = math.inf, 0
    for h, tail in enumerate(suffix):
        val = h / n + math.sqrt(max(tail, 0.0) / n)
        if val < best:
            best, best_h = val, h
    return best, best_h


def kc_exact(spec: KernelSpectrum):
    """Kernel complexity ``min_h h/n + sqrt(tail_h / n)``; ties go to the smaller h."""
    lam = list(spec.eigenvalues[: spec.r0])
    lam += [0.0] * (spec.r0 - len(lam))
    return _kc_minimize(_suffix_sums(lam), spec.n)


def tnn_exact(spec: KernelSpectrum, r: int) -> float:
    if not 0 <= r <= spec.r0:
        raise ArgumentError(f"tnn_exact: r={r} outside [0, {spec.r0}]")
    return math.fsum(float(v) for v in spec.eigenvalues[r: spec.r0])


def _top_gram_eigpairs(X, r0):
    """Top eigenpairs of ``X X^T`` (solving the dual when X is wide-short)."""
    m, d = X.shape
    if d < m:
        w, V = sym_eig(X.T @ X)
        w = np.maximum(w, 0.0)
        keep = w > DROP_RATIO * max(w[0], 0.0) if w.size and w[0] > 0 else np.zeros(w.size, bool)
        w, V = w[keep], V[:, keep]
        Q = (X @ V) / np.sqrt(w)
    else:
        G = X @ X.T
        w, Q = sym_eig(0.5 * (G + G.T))
        keep = w > DROP_RATIO * max(w[0], 0.0) if w.size and w[0] > 0 else np.zeros(w.size, bool)
        w, Q = w[keep], Q[:, keep]
    return w[:r0], Q[:, :r0]


def nystrom(F, landmark_indices=None, r0=None, rng: Rng | None = None, m_land=None, epoch_stamp=0) -> NystromFactors:
    """Nystrom factors of ``K = F F^T`` from a landmark subset.

    With ``landmark_indices`` omitted, ``m_land`` indices are drawn uniformly
    without replacement from ``rng``. Landmark eigenvalues at or below
    ``1e-12 * max`` are dropped, which may shrink the returned rank.
    """
    F = as_matrix(F, "features")
    n, d = F.shape
    if landmark_indices is None:
        if rng is None or m_land is None:
            raise ArgumentError("nystrom: give landmark_indices or (rng, m_land)")
        landmark_indices = np.sort(rng.choice(n, int(m_land)))
    idx = np.asarray(landmark_indices, dtype=np.intp)
    if not 1 <= idx.size <= n or np.any(idx < 0) or np.any(idx >= n) or np.unique(idx).size != idx.size:
        raise ArgumentError(f"nystrom: invalid landmark set of size {idx.size} for n={n}")
    cap = min(n, d, idx.size) if r0 is None else int(r0)
    if cap > idx.size:
        raise ArgumentError(f"nystrom: r0={cap} exceeds landmark count {idx.size}")
    F_I = F[idx]
    if not np.any(F_I):
        raise DegenerateKernelError("nystrom: landmark gram is identically zero")
    Lam, Q = _top_gram_eigpairs(F_I, cap)
    if Lam.size == 0:
        raise DegenerateKernelError("nystrom: landmark gram has no positive eigenvalue")
    C = F @ F_I.T
    factor = (C @ Q) / np.sqrt(Lam)
    # eigenvectors of K~ = factor factor^T from the small r x r problem
    M = factor.T @ factor
    s, V = sym_eig(0.5 * (M + M.T))
    keep = s > DROP_RATIO * s[0]
    s, V = s[keep], V[:, keep]
    U = (factor @ V) / np.sqrt(s)
    P = F.T @ U
    return NystromFactors(idx, Q, Lam, factor, U, s / n, P, int(epoch_stamp))


def tnn_approx(F, U_r) -> float:
    """``tr(K_n) - tr(U^T K_n U)`` evaluated as ``(|F|^2 - |F^T U|^2) / n``."""
    F = as_matrix(F, "features")
    U_r = np.asarray(U_r, dtype=np.float64).reshape(F.shape[0], -1) if np.size(U_r) == 0 else as_matrix(U_r, "U_r")
    if U_r.shape[0] != F.shape[0]:
        raise DimensionError(f"tnn_approx: U has {U_r.shape[0]} rows, F has {F.shape[0]}")
    n = F.shape[0]
    val = (np.sum(F * F) - np.sum((F.T @ U_r) ** 2)) / n
    return max(float(val), 0.0)


def tnn_approx_grad(F, U_r) -> np.ndarray:
    """Gradient of the separable TNN w.r.t. ``F`` with ``U_r`` held fixed."""
    F = as_matrix(F, "features")
    U_r = np.asarray(U_r, dtype=np.float64).reshape(F.shape[0], -1)
    if U_r.shape[0] != F.shape[0]:
        raise DimensionError(f"tnn_approx_grad: U has {U_r.shape[0]} rows, F has {F.shape[0]}")
    n = F.shape[0]
    return (2.0 / n) * (F - U_r @ (U_r.T @ F))


def akc(F, factors: NystromFactors):
    """Approximate kernel complexity from Nystrom eigenvector scores."""
    F = as_matrix(F, "features")
    n = F.shape[0]
    if factors.U_tilde.shape[0] != n:
        raise DimensionError("akc: factors were computed on a different sample count")
    scores = np.sum((F.T @ factors.U_tilde) ** 2, axis=0) / n
    trace = math.fsum(np.sum(F * F, axis=1)) / n
    suffix = [trace]
    running = trace
    for s in scores:
        running -= float(s)
        suffix.append(running)
    suffix = [max(v, 0.0) for v in suffix]
    return _kc_minimize(suffix, n)


def gd_linear_probe(F, Y, eta_step, t):
    """Full-batch gradient descent on a zero-initialized linear head.

    Returns the final weights and ``|F W_k - Y|_F^2`` for k = 0..t. The
    residual ``R_k = F W_k - Y`` is carried alongside ``W`` by its own update
    ``R <- R - (eta/n) F F^T R``; recomputing ``F W - Y`` would leave an
    absolute error near ``eps * |Y|`` that swamps residuals decaying towards 0.
    """
    F = as_matrix(F, "features")
    Y = as_matrix(Y, "labels")
    if Y.shape[0] != F.shape[0]:
        raise DimensionError("gd_linear_probe: F and Y row counts differ")
    if eta_step < 0 or t < 0:
        raise ArgumentError("gd_linear_probe: eta_step and t must be non-negative")
    n = F.shape[0]
    W = np.zeros((F.shape[1], Y.shape[1]))
    R = F @ W - Y
    residuals = [float(np.sum(R * R))]
    for k in range(1, int(t) + 1):
        step = (eta_step / n) * (F.T @ R)
        W = W - step
        R = R - F @ step
        res = float(np.sum(R * R))
        if not math.isfinite(res) or res > DIVERGENCE_LIMIT:
            raise StepSizeError(f"gradient descent diverged at iteration {k} (residual {res:.3e}); reduce eta_step")
        residuals.append(res)
    return W, residuals


def gd_residual_curve(K_n, Y, eta_step, t):
    """Closed-form ``|(I - eta K_n)^k Y|_F^2`` for k = 0..t via the spectrum of K_n.

    Eigen-directions with zero eigenvalue never decay and carry their full
    projection of Y at every k.
    """
    K_n = as_matrix(K_n, "K_n")
    Y = as_matrix(Y, "labels")
    if K_n.shape[0] != K_n.shape[1] or K_n.shape[0] != Y.shape[0]:
        raise DimensionError("gd_residual_curve: shape mismatch")
    scale = np.max(np.abs(K_n)) if K_n.size else 0.0
    if np.max(np.abs(K_n - K_n.T), initial=0.0) > 1e-10 * max(scale, np.finfo(float).tiny):
        raise NumericError("gd_residual_curve: K_n is not symmetric")
    w, V = sym_eig(K_n)
    w = np.where(np.abs(w) <= EIG_CLAMP * max(w[0], 0.0), 0.0, w) if w.size else w
    if w.size and eta_step * w[0] >= 2.0:
        warnings.warn(f"eta_step * lambda_max = {eta_step * w[0]:.3g} >= 2: iteration is unstable", RuntimeWarning)
    proj = np.sum((V.T @ Y) ** 2, axis=1)
    factor = (1.0 - eta_step * w) ** 2
    # k = 0 is |Y|_F^2 itself; V is orthogonal, so this is the same value without rotation error
    out = [float(np.sum(Y * Y))]
    decay = factor.copy()
    for k in range(1, int(t) + 1):
        out.append(float(np.sum(decay * proj)))
        decay = decay * factor
    return out


def gd_residual_closed_form(K_n, Y, eta_step, t) -> float:
    return gd_residual_curve(K_n, Y, eta_step, t)[-1]


def _snap(v, step):
    return math.floor(v / step + 0.5) * step


def _symmetric_pair(residual, kc_used, c):
    """Snap ``residual`` and the half-width onto one dyadic grid.

    On a grid a few bits coarser than the largest magnitude, ``r - w`` and
    ``r + w`` are exact, so ``upper - lower`` equals ``2 * w`` bit for bit.
    ``kc_used`` is then nudged (by an ulp or so) until ``kc + c`` rounds to
    the snapped width, keeping the identity checkable from stored fields.
    """
    w = kc_used + c
    top = max(abs(residual), w, 1e-300)
    step = 2.0 ** (math.frexp(top)[1] - 50)
    r = _snap(residual, step)
    w = math.ceil(w / step) * step  # rounding up keeps kc >= 0
    kc = w - c
    for _ in range(8):
        got = kc + c
        if got == w:
            break
        kc = math.nextafter(kc, math.inf if got < w else -math.inf)
    else:  # pragma: no cover - rounding never needs more than a couple of ulps
        raise NumericError("could not represent the bound half-width exactly")
    return r, kc, w


def kcr_bounds(train_residual, kc_used, n, x, epoch=0, kc=None) -> BoundReport:
    """Unit-constant lower/upper bounds ``train_residual -/+ (kc_used + x/n)``.

    ``kc_used`` is whichever complexity the caller bounds with (exact KC or
    A-KC); it is stored in the ``akc`` slot, ``kc`` records the exact value
    when known. Stored values sit on a dyadic grid (shift at most 2**-49 of
    the larger of residual and width) so that ``upper - lower == 2 * (akc + x / n)`` holds exactly.
    """
    if train_residual < 0 or kc_used < 0 or x < 0 or n < 1:
        raise ArgumentError("kcr_bounds: residual, kc and x must be non-negative, n >= 1")
    c = x / n
    r, akc_v, w = _symmetric_pair(float(train_residual), float(kc_used), c)
    return BoundReport(
        epoch=int(epoch),
        train_residual=r,
        kc=float(akc_v if kc is None else kc),
        akc=akc_v,
        x=float(x),
        n=int(n),
        lower=r - w,
        upper=r + w,
    )
