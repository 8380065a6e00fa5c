"""Differentiable channel selection over MLP channels and the FLOPs cost model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, sigmoid
from .errors import ArgumentError, DimensionError
from .numerics import Rng, sample_gumbel

TAU_FLOOR = 1e-3


@dataclass
class ChannelSelector:
    """Architecture parameters for one block's MLP channels."""

    alpha: np.ndarray
    tau: float = 4.5
    d_min: int = 8
    tau_init: float = 4.5

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if not np.all(np.isfinite(self.alpha)):
            raise ArgumentError("alpha must be finite")
        if not self.tau > 0:
            raise ArgumentError("tau must be positive")
        self.d_min = max(1, min(int(self.d_min), self.alpha.size))

    @property
    def width(self) -> int:
        return self.alpha.size


def gumbel_pair(D: int, rng: Rng):
    eps1 = sample_gumbel((D,), rng)
    eps2 = sample_gumbel((D,), rng)
    return eps1, eps2


def soft_mask(sel: ChannelSelector, rng: Rng | None = None, noise=None) -> np.ndarray:
    """``sigmoid((alpha + eps1 - eps2) / tau)``; ``noise=(eps1, eps2)`` overrides sampling."""
    if noise is None:
        if rng is None:
            raise ArgumentError("soft_mask needs an rng or explicit noise")
        noise = gumbel_pair(sel.width, rng)
    eps1, eps2 = noise
    return sigmoid((sel.alpha + eps1 - eps2) / sel.tau)


def soft_mask_tensor(alpha: Tensor, tau: float, eps1, eps2) -> Tensor:
    return ((alpha + (eps1 - eps2)) * (1.0 / tau)).sigmoid()


def harden(sel: ChannelSelector):
    """0/1 mask keeping channels with ``alpha >= 0``, floored at ``d_min`` channels."""
    alpha = sel.alpha
    g = (alpha >= 0).astype(np.int64)
    if g.sum() < sel.d_min:
        # stable sort on -alpha: ties resolve toward the lower index
        top = np.argsort(-alpha, kind="stable")[: sel.d_min]
        g = np.zeros_like(g)
        g[top] = 1
    return g, int(g.sum())


def apply_mask(Z, mask) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 1 or mask.size != Z.shape[-1]:
        raise DimensionError(f"mask length {mask.size} does not match width {Z.shape[-1]}")
    return Z * mask


def gather(Z, g) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    g = np.asarray(g)
    if g.size != Z.shape[-1]:
        raise DimensionError(f"mask length {g.size} does not match width {Z.shape[-1]}")
    return Z[..., np.flatnonzero(g)]


def scatter(Zt, g, D: int) -> np.ndarray:
    Zt = np.asarray(Zt, dtype=np.float64)
    g = np.asarray(g)
    keep = np.flatnonzero(g)
    if g.size != D or keep.size != Zt.shape[-1]:
        raise DimensionError(f"scatter: {Zt.shape[-1]} columns for {keep.size} selected of {D}")
    out = np.zeros(Zt.shape[:-1] + (D,))
    out[..., keep] = Zt
    return out


def flops_block(l_j: int, D_tilde: int) -> int:
    if l_j < 1 or D_tilde < 0:
        raise ArgumentError("flops_block needs l_j >= 1 and D_tilde >= 0")
    return int(l_j) * (2 * int(D_tilde) ** 2 + int(D_tilde))


@dataclass
class CostModel:
    """Per-block ``(mlp_layers, selector)`` pairs and the cost weight ``lam``."""

    blocks: list = field(default_factory=list)
    lam: float = 0.0

    def hard_widths(self):
        return [harden(sel)[1] for _, sel in self.blocks]


def flops_total(model: CostModel) -> int:
    return sum(flops_block(l, harden(sel)[1]) for l, sel in model.blocks)


def expected_width(sel: ChannelSelector) -> float:
    """Noise-free expected width ``sum(sigmoid(alpha/tau))``, floored at ``d_min``."""
    return max(float(np.sum(sigmoid(sel.alpha / sel.tau))), float(sel.d_min))


def soft_cost(model: CostModel) -> float:
    """Cost with each block width replaced by its expected width."""
    total = 0.0
    for l, sel in model.blocks:
        s = expected_width(sel)
        total += l * (2.0 * s * s + s)
    return total


def soft_cost_tensor(layers, alphas, taus, d_mins=None) -> Tensor:
    """Differentiable soft cost over alpha tensors (one per block).

    A block whose expected width is below its floor contributes the floor's
    cost as a constant, matching ``soft_cost``.
    """
    d_mins = d_mins if d_mins is not None else [1] * len(layers)
    total = None
    for l, alpha, tau, d_min in zip(layers, alphas, taus, d_mins):
        s = (alpha * (1.0 / tau)).sigmoid().sum()
        if float(s.data) < d_min:
            s = Tensor(float(d_min))
        cost = (s * s * 2.0 + s) * float(l)
        total = cost if total is None else total + cost
    return total


def soft_cost_grad(model: CostModel):
    """Analytic gradient of ``soft_cost`` w.r.t. each block's alpha."""
    grads = []
    for l, sel in model.blocks:
        p = sigmoid(sel.alpha / sel.tau)
        s = p.sum()
        if s < sel.d_min:
            grads.append(np.zeros_like(p))
            continue
        grads.append(l * (4.0 * s + 1.0) * p * (1.0 - p) / sel.tau)
    return grads


def search_cost_term(model: CostModel) -> float:
    if model.lam == 0:
        return 0.0
    cost = soft_cost(model)
    if cost <= 0:
        raise ArgumentError("search_cost_term: soft cost must be positive")
    return model.lam * math.log(cost)


def anneal(tau: float, decay: float) -> float:
    if not 0 < decay <= 1:
        raise ArgumentError("decay must lie in (0, 1]")
    return max(tau * decay, TAU_FLOOR)


def architecture_dict(layers, masks) -> dict:
    """JSON-ready description of a hardened architecture."""
    blocks = []
    for l, g in zip(layers, masks):
        g = [int(v) for v in g]
        d = sum(g)
        blocks.append({"mask": g, "D_tilde": d, "mlp_layers": int(l), "flops": flops_block(l, d)})
    return {"blocks": blocks, "total_flops": sum(b["flops"] for b in blocks)}
