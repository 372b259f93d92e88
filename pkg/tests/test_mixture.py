import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngem.diffnet import init_net
from ngem.errors import ConfigError, ShapeError
from ngem.mixture import (
    ANALYTIC,
    REFERENCE,
    MixtureParams,
    categorical_fim,
    categorical_fim_pinv,
    gaussian_log_prob,
    head_backward,
    head_transform,
    log_mixture_density,
    loss_and_grad,
    natural_gradient,
    ngem_grad,
    ngem_loss,
    nll_grad,
    nll_loss,
    precondition_categorical,
    precondition_gaussian,
    responsibilities,
    sgem_grad,
    sgem_loss,
    softmax,
)
from ngem.oracle import finite_diff_gradient, moore_penrose_residuals, naive_mixture_log_density

HALF_LOG_2PI = 0.9189385332046727  # 0.5 * log(2 pi)


def make_params(logits, means, scales):
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    means = np.asarray(means, dtype=float).reshape(logits.shape[0], logits.shape[1], -1)
    scales = np.asarray(scales, dtype=float).reshape(means.shape)
    return MixtureParams(logits, means, scales)


def random_params(rng, B=4, K=3, Dy=2):
    return make_params(rng.standard_normal((B, K)),
                       rng.standard_normal((B, K, Dy)),
                       rng.uniform(0.5, 2.0, (B, K, Dy)))


# head transform

def test_head_transform_softplus_zero():
    p = head_transform(np.zeros((1, 3)), 1, 1)
    assert p.scales[0, 0, 0] == pytest.approx(math.log(2) + 1e-6, abs=1e-15)


def test_head_transform_large_negative_floors_sigma():
    raw = np.array([[0.0, 0.0, -800.0]])
    assert head_transform(raw, 1, 1).scales[0, 0, 0] == pytest.approx(1e-6, rel=1e-12)


def test_head_transform_shape_error():
    with pytest.raises(ShapeError):
        head_transform(np.zeros((2, 5)), 2, 1)


def test_head_transform_identity_map():
    raw = np.array([[0.1, -0.1, 1.0, 2.0, 0.5, -1.0]])
    p = head_transform(raw, 2, 1, scale_map="identity")
    assert np.allclose(p.scales.ravel(), [0.5, 1e-6])
    with pytest.raises(ConfigError):
        head_transform(raw, 2, 1, scale_map="exp")


@pytest.mark.parametrize("scale_map", ["softplus", "identity"])
def test_head_backward_chain_matches_finite_differences(rng, scale_map):
    K, Dy, B = 3, 2, 5
    raw = rng.standard_normal((B, K + 2 * K * Dy))
    if scale_map == "identity":
        raw[:, K + K * Dy:] = rng.uniform(0.5, 2.0, (B, K * Dy))
    y = rng.standard_normal((B, Dy))

    def f(flat):
        return nll_loss(head_transform(flat.reshape(raw.shape), K, Dy, scale_map), y)

    p = head_transform(raw, K, Dy, scale_map)
    analytic = head_backward(p, nll_grad(p, y)).ravel()
    fd = finite_diff_gradient(f, raw.ravel(), h=1e-6)
    assert np.abs(analytic - fd).max() <= 1e-5


# densities

def test_gaussian_log_prob_values():
    assert gaussian_log_prob([0.0], [1.0], [0.0]) == pytest.approx(-0.91894, abs=1e-5)
    assert gaussian_log_prob([0.0, 0.0], [1.0, 1.0], [0.0, 0.0]) == pytest.approx(-1.83788, abs=1e-5)
    # -0.5 log(2 pi) - ln 2 - (3 - 1)^2 / (2 * 4)
    assert gaussian_log_prob([1.0], [2.0], [3.0]) == pytest.approx(-2.11209, abs=1e-5)
    assert gaussian_log_prob([1.0], [2.0], [3.0]) == pytest.approx(
        -HALF_LOG_2PI - math.log(2.0) - 0.5, abs=1e-14)


def test_log_mixture_k1_reduces_to_component(rng):
    p = random_params(rng, B=6, K=1, Dy=2)
    y = rng.standard_normal((6, 2))
    expected = gaussian_log_prob(p.means[:, 0], p.scales[:, 0], y)
    assert np.allclose(log_mixture_density(p, y), expected, atol=1e-14)


def test_log_mixture_identical_components(rng):
    mu, s = rng.standard_normal((3, 1, 2)), rng.uniform(0.5, 2, (3, 1, 2))
    p = make_params(np.zeros((3, 2)), np.repeat(mu, 2, axis=1), np.repeat(s, 2, axis=1))
    y = rng.standard_normal((3, 2))
    assert np.allclose(log_mixture_density(p, y), gaussian_log_prob(mu[:, 0], s[:, 0], y), atol=1e-14)


def test_log_mixture_matches_naive_oracle(rng):
    for _ in range(20):
        p = random_params(rng, B=8, K=3, Dy=2)
        y = rng.standard_normal((8, 2))
        naive = naive_mixture_log_density(p.weights, p.means, p.scales, y)
        assert np.abs(log_mixture_density(p, y) - naive).max() <= 1e-10
        assert nll_loss(p, y) == pytest.approx(-naive.mean(), abs=1e-10)


def test_log_mixture_stable_far_from_modes():
    p = make_params([[0.0, 0.0]], [[0.0], [1.0]], [[1e-3], [1e-3]])
    val = log_mixture_density(p, np.array([[50.0]]))
    assert np.isfinite(val).all()


def test_nll_k1_at_mean():
    p = make_params([[0.0]], [[1.5]], [[1.0]])
    assert nll_loss(p, np.array([[1.5]])) == pytest.approx(0.91894, abs=1e-5)


def test_losses_invariant_to_logit_shift(rng):
    p = random_params(rng)
    y = rng.standard_normal((4, 2))
    q = make_params(p.logits + 7.25, p.means, p.scales)
    rho = responsibilities(p, y)
    assert nll_loss(q, y) == pytest.approx(nll_loss(p, y), abs=1e-12)
    assert sgem_loss(q, rho, y) == pytest.approx(sgem_loss(p, rho, y), abs=1e-12)
    assert np.allclose(responsibilities(q, y), rho, atol=1e-14)


# responsibilities

def test_responsibilities_symmetry():
    p = make_params([[0.0, 0.0, 0.0]], [[0.3], [0.3], [0.3]], [[1.1], [1.1], [1.1]])
    assert np.allclose(responsibilities(p, np.array([[2.0]])), 1 / 3, atol=1e-15)


def test_responsibilities_k1(rng):
    p = random_params(rng, K=1)
    assert np.all(responsibilities(p, rng.standard_normal((4, 2))) == 1.0)


def test_responsibilities_far_component():
    p = make_params([[0.0, 0.0]], [[0.0], [40.0]], [[1.0], [1.0]])
    rho = responsibilities(p, np.array([[0.0]]))
    # second component sits exp(-800) below the first
    assert rho[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert rho[0, 1] <= 1e-12


def test_responsibilities_rows(rng):
    p = random_params(rng, B=10, K=5, Dy=1)
    rho = responsibilities(p, 3 * rng.standard_normal((10, 1)))
    assert np.allclose(rho.sum(axis=1), 1.0, atol=1e-9)
    assert (rho >= 0).all() and (rho <= 1).all()


# sGEM / nGEM losses

def test_sgem_k1_equals_nll(rng):
    p = random_params(rng, K=1)
    y = rng.standard_normal((4, 2))
    assert sgem_loss(p, responsibilities(p, y), y) == pytest.approx(nll_loss(p, y), abs=1e-12)


def test_sgem_minus_nll_is_entropy_of_rho(rng):
    for _ in range(10):
        p = random_params(rng, B=1)
        y = rng.standard_normal((1, 2))
        rho = responsibilities(p, y)
        h = -(rho * np.log(rho)).sum()
        gap = sgem_loss(p, rho, y) - nll_loss(p, y)
        assert gap == pytest.approx(h, abs=1e-10)
        assert gap >= -1e-12


def test_sgem_shape_error(rng):
    p = random_params(rng)
    with pytest.raises(ShapeError):
        sgem_loss(p, np.ones((3, 3)) / 3, rng.standard_normal((4, 2)))
    with pytest.raises(ShapeError):
        nll_loss(p, np.zeros((4, 3)))


def test_ngem_equals_sgem(rng):
    for _ in range(10):
        p = random_params(rng)
        y = rng.standard_normal((4, 2))
        rho = responsibilities(p, y)
        assert ngem_loss(p, rho, y) == pytest.approx(sgem_loss(p, rho, y), abs=1e-12)


def test_ngem_at_means_with_rho_equal_pi():
    pi = np.array([[0.2, 0.8]])
    p = make_params(np.log(pi), [[0.0], [0.0]], [[1.0], [1.0]])
    y = np.array([[0.0]])
    h = -(pi * np.log(pi)).sum()
    assert ngem_loss(p, pi, y) == pytest.approx(h + HALF_LOG_2PI, abs=1e-12)


def test_ngem_matches_scalar_recomputation(rng):
    p = random_params(rng, B=3, K=2, Dy=1)
    y = rng.standard_normal((3, 1))
    rho = responsibilities(p, y)
    total = 0.0
    for b in range(3):
        pi = np.exp(p.logits[b]) / np.exp(p.logits[b]).sum()
        for k in range(2):
            m, s, v = p.means[b, k, 0], p.scales[b, k, 0], y[b, 0]
            log_n = -math.log(s) - 0.5 * math.log(2 * math.pi) - (v - m) ** 2 / (2 * s * s)
            total -= rho[b, k] * (math.log(pi[k]) + log_n)
    assert ngem_loss(p, rho, y) == pytest.approx(total / 3, abs=1e-12)


# gradients

def _flat(params):
    return np.concatenate([params.logits.ravel(), params.means.ravel(), params.scales.ravel()])


def _unflat(v, B, K, Dy):
    a, b = B * K, B * K + B * K * Dy
    return make_params(v[:a].reshape(B, K), v[a:b].reshape(B, K, Dy), v[b:].reshape(B, K, Dy))


def _gflat(g):
    return np.concatenate([g.logits.ravel(), g.means.ravel(), g.scales.ravel()])


def test_nll_and_sgem_gradients_match_finite_differences(rng):
    B, K, Dy = 3, 3, 2
    p = random_params(rng, B, K, Dy)
    y = rng.standard_normal((B, Dy))
    rho = responsibilities(p, y)
    fd_nll = finite_diff_gradient(lambda v: nll_loss(_unflat(v, B, K, Dy), y), _flat(p), h=1e-6)
    fd_sgem = finite_diff_gradient(lambda v: sgem_loss(_unflat(v, B, K, Dy), rho, y), _flat(p), h=1e-6)
    assert np.abs(_gflat(nll_grad(p, y)) - fd_nll).max() <= 1e-7
    assert np.abs(_gflat(sgem_grad(p, rho, y)) - fd_sgem).max() <= 1e-7
    # the gradient identity, checked purely with finite differences
    assert np.abs(fd_nll - fd_sgem).max() <= 1e-7


def test_network_gradient_equality(rng):
    for seed in range(20):
        net = init_net([2, 6], 3, 1, seed=seed)
        x, y = rng.standard_normal((5, 2)), 2 * rng.standard_normal((5, 1))
        raw, trace = net.forward(x)
        p = head_transform(raw, 3, 1)
        g1 = net.backward(trace, head_backward(p, nll_grad(p, y)))
        g2 = net.backward(trace, head_backward(p, sgem_grad(p, responsibilities(p, y), y)))
        assert np.abs(g1 - g2).max() <= 1e-8


def test_loss_and_grad_dispatch(rng):
    p = random_params(rng)
    y = rng.standard_normal((4, 2))
    for loss in ("nll", "sgem", "ngem"):
        value, g = loss_and_grad(loss, p, y)
        assert np.isfinite(value)
        assert g.preconditioned == (loss == "ngem")
    with pytest.raises(ConfigError):
        loss_and_grad("mse", p, y)


# preconditioners

def test_precondition_gaussian_identity_case():
    dm, ds = precondition_gaussian(np.array([0.3]), np.array([-0.8]), np.array([1.0]), 1.0)
    assert dm[0] == 0.3 and ds[0] == -0.4


def test_precondition_gaussian_sigma2_pi_half():
    dm, ds = precondition_gaussian(np.array([1.0]), np.array([1.0]), np.array([2.0]), 0.5)
    assert dm[0] == pytest.approx(8.0) and ds[0] == pytest.approx(4.0)


def test_precondition_gaussian_clamps_pi():
    dm, _ = precondition_gaussian(np.array([1.0]), np.array([1.0]), np.array([1.0]), 0.0)
    assert dm[0] == pytest.approx(1e6)


def test_categorical_fim_uniform():
    F = categorical_fim([0.5, 0.5])
    assert np.allclose(F, [[0.25, -0.25], [-0.25, 0.25]])
    assert np.allclose(F @ np.ones(2), 0)


def test_categorical_pinv_matches_numpy(rng):
    for K in range(2, 6):
        pi = rng.dirichlet(np.ones(K))
        G = categorical_fim_pinv(pi)
        assert np.abs(G - np.linalg.pinv(categorical_fim(pi), rcond=1e-10, hermitian=True)).max() <= 1e-8
        assert max(moore_penrose_residuals(categorical_fim(pi), G)) <= 1e-10


def test_closed_form_inverse_is_not_moore_penrose():
    pi = np.array([0.2, 0.3, 0.5])
    F = categorical_fim(pi)
    G = np.diag(1 / pi) - np.ones((3, 3))
    r1, r2, r3, r4 = moore_penrose_residuals(F, G)
    assert r1 <= 1e-12 and r2 <= 1e-12
    # F G = I - pi 1^T is only symmetric for uniform pi
    assert r3 > 0.1 and r4 > 0.1
    G_uniform = np.diag(np.full(4, 4.0)) - np.ones((4, 4))
    assert max(moore_penrose_residuals(categorical_fim(np.full(4, 0.25)), G_uniform)) <= 1e-12


def test_categorical_fixed_point(rng):
    pi = rng.dirichlet(np.ones(4), size=3)
    zero = np.zeros_like(pi)
    assert np.abs(precondition_categorical(zero, pi, pi, ANALYTIC)).max() <= 1e-12
    uniform = np.full((2, 4), 0.25)
    assert np.abs(precondition_categorical(zero, uniform, uniform, REFERENCE)).max() <= 1e-12
    # off-uniform the reference direction at rho = pi is K pi - 1, pulling toward uniform weights
    ref = precondition_categorical(zero, pi, pi, REFERENCE)
    assert np.allclose(ref, 4 * pi - 1, atol=1e-12)


def test_categorical_analytic_matches_explicit_pinv(rng):
    for _ in range(50):
        K = int(rng.integers(2, 6))
        pi = rng.dirichlet(np.ones(K))
        rho = rng.dirichlet(np.ones(K))
        expected = np.linalg.pinv(categorical_fim(pi), rcond=1e-10, hermitian=True) @ (pi - rho)
        got = precondition_categorical((pi - rho)[None], rho[None], pi[None], ANALYTIC)[0]
        assert np.abs(got - expected).max() <= 1e-8
        # equals 1 - rho/pi up to a constant logit shift
        diff = got - (1 - rho / pi)
        assert np.ptp(diff) <= 1e-9


def test_categorical_reference_is_weighted_loss_gradient(rng):
    # reference mode = d/dpsi of -sum_k (rho_k / pi_k) log softmax(psi)_k with the ratio frozen
    K = 4
    psi = rng.standard_normal(K)
    rho = rng.dirichlet(np.ones(K))
    pi = softmax(psi)
    ratio = rho / pi

    def f(v):
        return float(-(ratio * (v - np.log(np.exp(v).sum()))).sum())

    fd = finite_diff_gradient(f, psi, h=1e-6)
    got = precondition_categorical((pi - rho)[None], rho[None], pi[None], REFERENCE)[0]
    assert np.abs(got - fd).max() <= 1e-7


def test_categorical_modes_differ_beyond_shift():
    pi = np.array([[0.2, 0.3, 0.5]])
    rho = np.array([[0.6, 0.3, 0.1]])
    a = precondition_categorical(pi - rho, rho, pi, ANALYTIC)
    r = precondition_categorical(pi - rho, rho, pi, REFERENCE)
    assert np.ptp(a - r) > 1e-3


def test_categorical_unknown_mode():
    with pytest.raises(ConfigError):
        precondition_categorical(np.zeros((1, 2)), np.ones((1, 2)) / 2, np.ones((1, 2)) / 2, "exact")


def test_gaussian_block_matches_reweighted_loss(rng):
    # folding rho/pi into the loss gives the same mean/scale natural gradients once
    # the sigma^2 and sigma^2/2 factors are applied
    B, K, Dy = 3, 2, 2
    p = random_params(rng, B, K, Dy)
    y = rng.standard_normal((B, Dy))
    rho = responsibilities(p, y)
    nat = natural_gradient(p, rho, y)
    w = rho / p.weights
    means, scales = p.means, p.scales

    def f_mu(v):
        q = make_params(p.logits, v.reshape(means.shape), scales)
        return float(-(w * (np.log(q.weights) + _component_logpdf(q, y))).sum(axis=1).mean())

    def f_sigma(v):
        q = make_params(p.logits, means, v.reshape(scales.shape))
        return float(-(w * (np.log(q.weights) + _component_logpdf(q, y))).sum(axis=1).mean())

    g_mu = finite_diff_gradient(f_mu, means.ravel(), h=1e-6).reshape(means.shape)
    g_sg = finite_diff_gradient(f_sigma, scales.ravel(), h=1e-6).reshape(scales.shape)
    assert np.abs(nat.means - scales**2 * g_mu).max() <= 1e-6
    assert np.abs(nat.scales - 0.5 * scales**2 * g_sg).max() <= 1e-6


def _component_logpdf(q, y):
    r = (y[:, None, :] - q.means) / q.scales
    return (-np.log(q.scales) - 0.5 * math.log(2 * math.pi) - 0.5 * r * r).sum(axis=2)


def test_natural_gradient_k1_reduction(rng):
    p = random_params(rng, B=5, K=1, Dy=2)
    y = rng.standard_normal((5, 2))
    nat = natural_gradient(p, responsibilities(p, y), y)
    g = nll_grad(p, y)
    assert np.abs(nat.means - p.scales**2 * g.means).max() <= 1e-10
    assert np.abs(nat.scales - 0.5 * p.scales**2 * g.scales).max() <= 1e-10
    assert np.all(nat.logits == 0)


def test_zero_upstream_gives_zero_natural_gradient(rng):
    sigma = rng.uniform(0.5, 2, (3, 2, 1))
    pi = rng.dirichlet(np.ones(2), size=3)
    dm, ds = precondition_gaussian(np.zeros_like(sigma), np.zeros_like(sigma), sigma, pi[:, :, None])
    assert not dm.any() and not ds.any()
    assert not precondition_categorical(np.zeros_like(pi), pi, pi, ANALYTIC).round(12).any()


def test_natural_gradient_identity_on_means_at_unit_case(rng):
    p = make_params([[0.0]], [[0.4]], [[1.0]])
    y = np.array([[1.7]])
    nat = natural_gradient(p, responsibilities(p, y), y)
    assert nat.means[0, 0, 0] == pytest.approx(nll_grad(p, y).means[0, 0, 0], abs=1e-15)
    assert nat.preconditioned


def test_descent_direction(rng):
    B, K, Dy = 4, 3, 1
    p = random_params(rng, B, K, Dy)
    y = rng.standard_normal((B, Dy))
    rho = responsibilities(p, y)
    step = 1e-4
    for name, value, grad in [
        ("nll", lambda q: nll_loss(q, y), nll_grad(p, y)),
        ("sgem", lambda q: sgem_loss(q, rho, y), sgem_grad(p, rho, y)),
        ("ngem", lambda q: ngem_loss(q, rho, y), ngem_grad(p, rho, y)),
        ("ngem-natural", lambda q: ngem_loss(q, rho, y), natural_gradient(p, rho, y)),
    ]:
        q = _unflat(_flat(p) - step * _gflat(grad), B, K, Dy)
        assert value(q) < value(p), name


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_properties(K, Dy, B, seed):
    rng = np.random.default_rng(seed)
    p = make_params(3 * rng.standard_normal((B, K)), 3 * rng.standard_normal((B, K, Dy)),
                    rng.uniform(0.1, 3.0, (B, K, Dy)))
    y = 3 * rng.standard_normal((B, Dy))
    rho = responsibilities(p, y)
    assert np.allclose(rho.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(p.weights.sum(axis=1), 1.0, atol=1e-12)
    assert abs(ngem_loss(p, rho, y) - sgem_loss(p, rho, y)) <= 1e-9 * max(1, abs(sgem_loss(p, rho, y)))
    assert sgem_loss(p, rho, y) >= nll_loss(p, y) - 1e-9
    g1, g2 = _gflat(nll_grad(p, y)), _gflat(sgem_grad(p, rho, y))
    assert np.array_equal(g1, g2)
    nat = natural_gradient(p, rho, y, ANALYTIC)
    assert np.allclose(nat.logits.sum(axis=1), 0.0, atol=1e-6)
