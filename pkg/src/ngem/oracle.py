"""Brute-force references used by the test-suite and ``ngem verify``.

Nothing here imports the modules it checks: densities and Hessians are
re-derived directly from the closed-form Gaussian / categorical expressions.
Random draws use a Philox counter-based generator keyed by the seed, so
results do not depend on chunking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_CHUNK = 50_000


@dataclass
class McEstimate:
    value: np.ndarray
    stderr: np.ndarray
    n_samples: int

    def within(self, expected, n_se: float = 3.0, atol: float = 0.0) -> np.ndarray:
        """Elementwise ``|value - expected| <= n_se * SE + atol``."""
        return np.abs(self.value - expected) <= n_se * self.stderr + atol


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def finite_diff_gradient(f, theta, h: float = 1e-5):
    """Central differences of a scalar function, one coordinate at a time."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta.flat[i]
        theta.flat[i] = old + h
        fp = f(theta)
        theta.flat[i] = old - h
        fm = f(theta)
        theta.flat[i] = old
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def naive_mixture_log_density(weights, means, scales, y):
    """``log sum_k w_k prod_d N(y_d; m_kd, s_kd)`` by direct exponentiation.

    weights: (B, K); means, scales: (B, K, Dy); y: (B, Dy).
    """
    y = np.asarray(y)[:, None, :]
    dens = np.exp(-0.5 * ((y - means) / scales) ** 2) / (np.sqrt(2.0 * math.pi) * scales)
    return np.log((np.asarray(weights) * dens.prod(axis=2)).sum(axis=1))


def _mean_and_se(total, total_sq, n):
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    return mean, np.sqrt(var / max(n - 1, 1))


def mc_fisher_gaussian(mu, sigma, n_samples: int, seed: int) -> McEstimate:
    """Monte-Carlo negative expected Hessian of a diagonal Gaussian log density.

    Coordinates are ``[mu_1..mu_D, sigma_1..sigma_D]``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    D = mu.size
    rng = _rng(seed)
    total = np.zeros((2 * D, 2 * D))
    total_sq = np.zeros_like(total)
    done = 0
    while done < n_samples:
        m = min(_CHUNK, n_samples - done)
        r = sigma * rng.standard_normal((m, D))  # x - mu
        neg_h = np.zeros((m, 2 * D, 2 * D))
        idx = np.arange(D)
        neg_h[:, idx, idx] = 1.0 / sigma**2
        neg_h[:, idx, D + idx] = neg_h[:, D + idx, idx] = 2.0 * r / sigma**3
        neg_h[:, D + idx, D + idx] = 3.0 * r * r / sigma**4 - 1.0 / sigma**2
        total += neg_h.sum(axis=0)
        total_sq += (neg_h * neg_h).sum(axis=0)
        done += m
    value, se = _mean_and_se(total, total_sq, n_samples)
    return McEstimate(value, se, n_samples)


def mc_fisher_categorical(pi, n_samples: int, seed: int) -> McEstimate:
    """Negative expected Hessian of ``log Cat(z; softmax(psi))`` in logit space.

    The per-sample Hessian ``pi pi^T - diag(pi)`` does not depend on the drawn
    category, so the estimate is exact and its standard error is zero.
    """
    pi = np.asarray(pi, dtype=np.float64)
    rng = _rng(seed)
    K = pi.size
    total = np.zeros((K, K))
    total_sq = np.zeros((K, K))
    hess = np.outer(pi, pi) - np.diag(pi)
    done = 0
    while done < n_samples:
        m = min(_CHUNK, n_samples - done)
        z = rng.choice(K, size=m, p=pi)
        # the draw only fixes the one-hot outcome; the logit Hessian ignores it
        total += z.size * -hess
        total_sq += z.size * hess * hess
        done += m
    value, se = _mean_and_se(total, total_sq, n_samples)
    return McEstimate(value, se, n_samples)


def moore_penrose_residuals(A, G):
    """Max-abs residuals of the four Moore-Penrose conditions for ``G = A^+``."""
    AG, GA = A @ G, G @ A
    return (
        np.abs(AG @ A - A).max(),
        np.abs(GA @ G - G).max(),
        np.abs(AG - AG.T).max(),
        np.abs(GA - GA.T).max(),
    )


def complete_fim_layout(K: int, Dy: int):
    """Index arrays into the complete-data FIM: per-component (mu, sigma) and logits."""
    comp = [np.arange(k * 2 * Dy, (k + 1) * 2 * Dy) for k in range(K)]
    logits = np.arange(2 * K * Dy, 2 * K * Dy + K)
    return comp, logits


def mc_complete_fim(weights, means, scales, n_samples: int, seed: int) -> McEstimate:
    """Monte-Carlo complete-data FIM of a diagonal Gaussian mixture.

    Samples ``(z, x)`` from the joint and averages ``-d^2 log p(x, z)`` over
    ``[mu_1, sigma_1, ..., mu_K, sigma_K, psi_1..psi_K]`` (each mu/sigma block
    has Dy entries).
    """
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64).reshape(w.size, -1)
    sg = np.asarray(scales, dtype=np.float64).reshape(w.size, -1)
    K, D = mu.shape
    P = 2 * K * D + K
    comp, logit_idx = complete_fim_layout(K, D)
    cat_block = np.diag(w) - np.outer(w, w)
    rng = _rng(seed)
    total = np.zeros((P, P))
    total_sq = np.zeros((P, P))
    done = 0
    while done < n_samples:
        m = min(_CHUNK, n_samples - done)
        z = rng.choice(K, size=m, p=w)
        eps = rng.standard_normal((m, D))
        neg_h = np.zeros((m, P, P))
        neg_h[:, logit_idx[:, None], logit_idx[None, :]] = cat_block
        for k in range(K):
            rows = np.nonzero(z == k)[0]
            r = sg[k] * eps[rows]
            i_mu, i_sg = comp[k][:D], comp[k][D:]
            neg_h[rows[:, None], i_mu[None, :], i_mu[None, :]] = 1.0 / sg[k] ** 2
            cross = 2.0 * r / sg[k] ** 3
            neg_h[rows[:, None], i_mu[None, :], i_sg[None, :]] = cross
            neg_h[rows[:, None], i_sg[None, :], i_mu[None, :]] = cross
            neg_h[rows[:, None], i_sg[None, :], i_sg[None, :]] = 3.0 * r * r / sg[k] ** 4 - 1.0 / sg[k] ** 2
        total += neg_h.sum(axis=0)
        total_sq += (neg_h * neg_h).sum(axis=0)
        done += m
    value, se = _mean_and_se(total, total_sq, n_samples)
    return McEstimate(value, se, n_samples)


def predicted_complete_fim(weights, scales):
    """Block-diagonal prediction: ``pi_k diag(1/s^2, 2/s^2)`` blocks and ``diag(pi) - pi pi^T``."""
    w = np.asarray(weights, dtype=np.float64)
    sg = np.asarray(scales, dtype=np.float64).reshape(w.size, -1)
    K, D = sg.shape
    comp, logit_idx = complete_fim_layout(K, D)
    F = np.zeros((2 * K * D + K,) * 2)
    for k in range(K):
        diag = np.concatenate([1.0 / sg[k] ** 2, 2.0 / sg[k] ** 2])
        F[comp[k], comp[k]] = w[k] * diag
    F[np.ix_(logit_idx, logit_idx)] = np.diag(w) - np.outer(w, w)
    return F


def adam_scalar(theta0: float, grad_fn, lr: float, steps: int,
                b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out longhand, returning the trajectory."""
    theta, m, v = theta0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        path.append(theta)
    return path
