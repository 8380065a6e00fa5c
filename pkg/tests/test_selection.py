import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kcrlab.autograd import Tensor
from kcrlab.errors import ArgumentError, DimensionError
from kcrlab.numerics import Rng, finite_diff_grad
from kcrlab.selection import (ChannelSelector, CostModel, anneal, apply_mask, architecture_dict, flops_block,
                              flops_total, gather, harden, scatter, search_cost_term, soft_cost, soft_cost_grad,
                              soft_cost_tensor, soft_mask, soft_mask_tensor)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_soft_mask_examples():
    sel = ChannelSelector(np.array([0.7, -1.3, 0.0]), tau=2.0)
    e = np.array([0.4, -0.2, 1.1])
    assert np.allclose(soft_mask(sel, noise=(e, e)), [sig(0.35), sig(-0.65), 0.5])
    zero = np.zeros(2)
    assert np.allclose(soft_mask(ChannelSelector(np.zeros(2), tau=3.0), noise=(zero, zero)), 0.5)
    got = soft_mask(ChannelSelector(np.array([2.0, -2.0]), tau=0.5), noise=(zero, zero))
    assert np.allclose(got, [0.98201, 0.01799], atol=5e-6)
    with pytest.raises(ArgumentError):
        soft_mask(sel)


def test_soft_mask_gradient_is_sigmoid_derivative():
    alpha = Tensor(np.array([0.3, -0.8]), requires_grad=True)
    e1, e2 = np.array([0.1, 0.5]), np.array([-0.2, 0.05])
    g = soft_mask_tensor(alpha, 1.5, e1, e2)
    g.sum().backward()
    assert np.allclose(alpha.grad, g.data * (1 - g.data) / 1.5)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), tau=st.floats(0.05, 5), seed=st.integers(0, 1000))
def test_soft_mask_monotone_in_alpha(a, b, tau, seed):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    noise = tuple(Rng(seed).fork(k).normal(1) for k in range(2))
    m_lo = soft_mask(ChannelSelector(np.array([lo]), tau=tau), noise=noise)[0]
    m_hi = soft_mask(ChannelSelector(np.array([hi]), tau=tau), noise=noise)[0]
    assert m_hi >= m_lo
    assert 0.0 <= m_lo <= 1.0


def test_low_temperature_limit():
    rng = Rng(4)
    e1, e2 = rng.normal(200), rng.normal(200)
    alpha = rng.normal(200) * 3
    logit = alpha + e1 - e2
    keep = np.abs(logit) >= 1
    m = soft_mask(ChannelSelector(alpha, tau=1e-3), noise=(e1, e2))
    assert np.all(np.abs(m[keep] - (logit[keep] > 0)) <= 1e-3)


@pytest.mark.parametrize("tau", [0.5, 1.0, 4.5])
def test_monte_carlo_mean_at_zero(tau):
    sel = ChannelSelector(np.zeros(1), tau=tau)
    rng = Rng(11, int(tau * 10))
    draws = [soft_mask(sel, rng)[0] for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.02


def test_harden_examples():
    g, d = harden(ChannelSelector(np.array([1.2, -0.3, 0.0]), d_min=1))
    assert g.tolist() == [1, 0, 1] and d == 2
    g, d = harden(ChannelSelector(np.array([-3.0, -0.5, -0.5, -2.0]), d_min=1))
    assert g.tolist() == [0, 1, 0, 0] and d == 1
    g, d = harden(ChannelSelector(np.array([0.0, 2.0, 5.0]), d_min=1))
    assert d == 3


@settings(max_examples=60, deadline=None)
@given(alpha=st.lists(st.floats(-3, 3), min_size=1, max_size=20), c=st.floats(0.01, 100), d_min=st.integers(1, 20))
def test_harden_scale_invariant_and_floored(alpha, c, d_min):
    a = np.array(alpha)
    g1, d1 = harden(ChannelSelector(a, d_min=d_min))
    g2, _ = harden(ChannelSelector(c * a, d_min=d_min))
    assert np.array_equal(g1, g2)
    assert min(d_min, len(a)) <= d1 <= len(a)


def test_mask_ops_examples():
    Z = np.arange(12, dtype=float).reshape(4, 3)
    assert np.array_equal(apply_mask(Z, np.ones(3)), Z)
    assert np.array_equal(apply_mask(Z, np.zeros(3)), np.zeros_like(Z))
    assert np.array_equal(apply_mask(Z, np.eye(3)[1]), Z * [0, 1, 0])
    g = np.array([1, 0, 1])
    assert np.array_equal(gather(Z, g), Z[:, [0, 2]])
    assert np.array_equal(scatter(gather(Z, g), g, 3), Z * [1, 0, 1])
    assert np.array_equal(gather(Z, np.ones(3, int)), Z)
    with pytest.raises(DimensionError):
        apply_mask(Z, np.ones(2))
    with pytest.raises(DimensionError):
        scatter(Z, g, 3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), D=st.integers(1, 16))
def test_scatter_gather_equals_hard_mask(seed, D):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(5, D))
    g = rng.integers(0, 2, D)
    assert np.array_equal(scatter(gather(Z, g), g, D), apply_mask(Z, g))


def test_flops_examples():
    assert flops_block(2, 64) == 16512
    assert flops_block(1, 1) == 3
    assert flops_block(3, 0) == 0
    with pytest.raises(ArgumentError):
        flops_block(0, 3)
    sels = [ChannelSelector(np.array(a), d_min=1) for a in ([1.0, 1.0, -1.0], [1.0, -1.0, -1.0])]
    model = CostModel([(2, sels[0]), (1, sels[1])])
    assert flops_total(model) == flops_block(2, 2) + flops_block(1, 1)
    arch = architecture_dict([2, 1], [harden(s)[0] for s in sels])
    assert arch["total_flops"] == flops_total(model)
    assert [b["D_tilde"] for b in arch["blocks"]] == [2, 1]


def test_soft_cost_examples():
    sel = ChannelSelector(np.zeros(4), tau=1.0, d_min=1)
    assert soft_cost(CostModel([(1, sel)])) == pytest.approx(10.0)
    big = ChannelSelector(np.full(6, 1e3), tau=1.0, d_min=1)
    model = CostModel([(2, big)])
    assert soft_cost(model) == pytest.approx(flops_total(model))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d_min=st.integers(1, 8))
def test_soft_cost_at_least_floor(seed, d_min):
    alpha = np.random.default_rng(seed).normal(size=8) * 10
    sel = ChannelSelector(alpha, tau=0.7, d_min=d_min)
    assert soft_cost(CostModel([(2, sel)])) >= flops_block(2, d_min)


def test_soft_cost_gradient_matches_fd_and_tensor():
    rng = np.random.default_rng(3)
    a1, a2 = rng.normal(size=6), rng.normal(size=5)

    def total(flat):
        m = CostModel([(2, ChannelSelector(flat[:6], tau=1.3, d_min=1)),
                       (1, ChannelSelector(flat[6:], tau=1.3, d_min=1))])
        return soft_cost(m)

    flat = np.concatenate([a1, a2])
    num = finite_diff_grad(total, flat)
    model = CostModel([(2, ChannelSelector(a1, tau=1.3, d_min=1)), (1, ChannelSelector(a2, tau=1.3, d_min=1))])
    ana = np.concatenate(soft_cost_grad(model))
    assert np.max(np.abs(num - ana)) <= 1e-4 * np.max(np.abs(ana))
    t1, t2 = Tensor(a1, requires_grad=True), Tensor(a2, requires_grad=True)
    c = soft_cost_tensor([2, 1], [t1, t2], [1.3, 1.3], [1, 1])
    c.backward()
    assert float(c.data) == pytest.approx(soft_cost(model))
    assert np.allclose(np.concatenate([t1.grad, t2.grad]), ana)


def test_soft_cost_below_floor_has_no_gradient():
    sel = ChannelSelector(np.full(10, -50.0), tau=1.0, d_min=3)
    model = CostModel([(1, sel)])
    assert soft_cost(model) == flops_block(1, 3)
    assert np.all(soft_cost_grad(model)[0] == 0)


def test_search_cost_term_examples():
    big = ChannelSelector(np.full(64, 1e4), tau=1.0)
    model = CostModel([(2, big)], lam=0.1)
    assert search_cost_term(model) == pytest.approx(0.1 * math.log(16512))
    assert search_cost_term(model) == pytest.approx(0.97119, abs=1e-5)  # 0.971184...
    assert search_cost_term(CostModel([(2, big)], lam=0.0)) == 0.0
    # a single surviving channel at l=1 gives 2 + 1 = 3; ln of a unit cost would be 0
    one = CostModel([(1, ChannelSelector(np.array([1e4]), d_min=1))], lam=5.0)
    assert search_cost_term(one) == pytest.approx(5.0 * math.log(3))


def test_anneal_examples():
    assert anneal(4.5, 0.95) == pytest.approx(4.275)
    assert anneal(4.5, 1.0) == 4.5
    tau = 4.5
    for _ in range(500):
        tau = anneal(tau, 0.5)
    assert tau == 1e-3
    with pytest.raises(ArgumentError):
        anneal(1.0, 0.0)


def test_selector_validation():
    with pytest.raises(ArgumentError):
        ChannelSelector(np.array([np.nan]))
    with pytest.raises(ArgumentError):
        ChannelSelector(np.zeros(2), tau=0.0)
    assert ChannelSelector(np.zeros(3), d_min=10).d_min == 3
