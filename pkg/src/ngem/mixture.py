"""Diagonal Gaussian mixture head.

Covers the raw-output parametrization, log densities, E-step
responsibilities, the NLL / sGEM / nGEM losses, and preconditioning of
distribution-parameter gradients with the complete-data Fisher blocks.

Gradient convention: ``DistGradients`` always hold derivatives of the
batch-*mean* loss, one row per sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ngem.errors import ConfigError, ShapeError

SIGMA_MIN = 1e-6
PI_MIN = 1e-6
RATIO_MAX = 1e6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

ANALYTIC = "analytic"
REFERENCE = "reference"
CATEGORICAL_MODES = (ANALYTIC, REFERENCE)


def softplus(v):
    return np.logaddexp(0.0, v)


def sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


def raw_scale_for(sigma: float) -> float:
    """Raw head value that maps to ``sigma`` under ``softplus(raw) + SIGMA_MIN``."""
    s = sigma - SIGMA_MIN
    return float(s + np.log(-np.expm1(-s)))


def log_softmax(a):
    m = a.max(axis=-1, keepdims=True)
    z = a - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(a):
    return np.exp(log_softmax(a))


def logsumexp(a):
    m = a.max(axis=-1)
    return m + np.log(np.exp(a - m[..., None]).sum(axis=-1))


@dataclass
class MixtureParams:
    logits: np.ndarray  # B x K
    means: np.ndarray  # B x K x Dy
    scales: np.ndarray  # B x K x Dy
    raw_scales: np.ndarray = None  # kept for head_backward
    scale_map: str = "softplus"

    @property
    def K(self) -> int:
        return self.logits.shape[1]

    @property
    def Dy(self) -> int:
        return self.means.shape[2]

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def log_weights(self):
        return log_softmax(self.logits)

    @property
    def weights(self):
        return softmax(self.logits)


@dataclass
class DistGradients:
    logits: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    preconditioned: bool = False

    def __mul__(self, a):
        return DistGradients(a * self.logits, a * self.means, a * self.scales, self.preconditioned)

    __rmul__ = __mul__


def head_transform(raw, K: int, Dy: int, scale_map: str = "softplus") -> MixtureParams:
    """Split the raw head into logits, means and positive scales.

    ``scale_map="softplus"`` (networks) gives ``softplus(raw) + SIGMA_MIN``;
    ``"identity"`` (directly fitted mixtures) reads sigma itself, floored at
    ``SIGMA_MIN``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    B = raw.shape[0]
    if raw.ndim != 2 or raw.shape[1] != K + 2 * K * Dy:
        raise ShapeError(f"raw head shape {raw.shape} != (B, {K + 2 * K * Dy})")
    logits = raw[:, :K]
    means = raw[:, K:K + K * Dy].reshape(B, K, Dy)
    raw_scales = raw[:, K + K * Dy:].reshape(B, K, Dy)
    if scale_map == "softplus":
        scales = softplus(raw_scales) + SIGMA_MIN
    elif scale_map == "identity":
        scales = np.maximum(raw_scales, SIGMA_MIN)
    else:
        raise ConfigError(f"unknown scale map {scale_map!r}")
    return MixtureParams(logits, means, scales, raw_scales, scale_map)


def head_backward(params: MixtureParams, grads: DistGradients):
    """Chain distribution-parameter gradients back to the raw head output."""
    B = params.batch_size
    if params.scale_map == "softplus":
        d_scale_raw = grads.scales * sigmoid(params.raw_scales)
    else:
        d_scale_raw = np.where(params.raw_scales >= SIGMA_MIN, grads.scales, 0.0)
    return np.concatenate(
        [grads.logits, grads.means.reshape(B, -1), d_scale_raw.reshape(B, -1)], axis=1
    )


def gaussian_log_prob(mu, sigma, y):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    mu, sigma, y = np.asarray(mu), np.asarray(sigma), np.asarray(y)
    r = (y - mu) / sigma
    return -(np.log(sigma) + HALF_LOG_2PI + 0.5 * r * r).sum(axis=-1)


def component_log_probs(params: MixtureParams, y):
    """``log N(y_b; mu_bk, sigma_bk)`` as a B x K matrix."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (params.batch_size, params.Dy):
        raise ShapeError(f"targets shape {y.shape} != ({params.batch_size}, {params.Dy})")
    return gaussian_log_prob(params.means, params.scales, y[:, None, :])


def _joint(params, y):
    return params.log_weights + component_log_probs(params, y)


def log_mixture_density(params: MixtureParams, y):
    return logsumexp(_joint(params, y))


def responsibilities(params: MixtureParams, y):
    """E-step posterior over components, rows summing to one."""
    return softmax(_joint(params, y))


def _check_rho(params, rho):
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != params.logits.shape:
        raise ShapeError(f"responsibilities shape {rho.shape} != {params.logits.shape}")
    return rho


def nll_loss(params: MixtureParams, y) -> float:
    return float(-log_mixture_density(params, y).mean())


def sgem_loss(params: MixtureParams, rho, y) -> float:
    rho = _check_rho(params, rho)
    return float(-(rho * _joint(params, y)).sum(axis=1).mean())


def ngem_loss(params: MixtureParams, rho, y) -> float:
    """Cross-entropy H(rho, pi) plus rho-weighted component NLLs."""
    rho = _check_rho(params, rho)
    cross_entropy = -(rho * params.log_weights).sum(axis=1)
    component_nll = -(rho * component_log_probs(params, y)).sum(axis=1)
    return float((cross_entropy + component_nll).mean())


def _weighted_grads(params, y, w):
    """Gradients of ``mean_b -sum_k w_bk (log pi_bk + log N_bk)`` for constant w."""
    B = params.batch_size
    y = np.asarray(y, dtype=np.float64)
    resid = y[:, None, :] - params.means
    inv_var = 1.0 / (params.scales * params.scales)
    wk = w[:, :, None]
    d_means = -wk * resid * inv_var
    d_scales = -wk * (resid * resid * inv_var - 1.0) / params.scales
    d_logits = params.weights * w.sum(axis=1, keepdims=True) - w
    return DistGradients(d_logits / B, d_means / B, d_scales / B)


def nll_grad(params: MixtureParams, y) -> DistGradients:
    # d(-logsumexp(a))/da = -softmax(a); the softmax is the posterior.
    return _weighted_grads(params, y, softmax(_joint(params, y)))


def sgem_grad(params: MixtureParams, rho, y) -> DistGradients:
    return _weighted_grads(params, y, _check_rho(params, rho))


# Same scalar as sGEM, regrouped, so the raw gradients coincide too.
ngem_grad = sgem_grad


def precondition_gaussian(d_mu, d_sigma, sigma, pi):
    """Apply ``(pi_k F_k)^-1`` with ``F_k = diag(1/sigma^2, 2/sigma^2)``.

    ``pi`` broadcasts against the trailing dimension (shape ``(..., 1)`` for
    batched inputs).
    """
    scale = sigma * sigma / np.maximum(pi, PI_MIN)
    return scale * d_mu, 0.5 * scale * d_sigma


def categorical_fim(pi):
    pi = np.asarray(pi, dtype=np.float64)
    return np.diag(pi) - np.outer(pi, pi)


def categorical_fim_pinv(pi):
    """Moore-Penrose pseudo-inverse of ``diag(pi) - pi pi^T``.

    ``diag(pi)^-1 - 1 1^T`` is a reflexive generalized inverse; projecting it
    onto the complement of the null space ``span(1)`` gives the Moore-Penrose
    inverse.
    """
    pi = np.asarray(pi, dtype=np.float64)
    K = pi.size
    G = np.diag(1.0 / pi) - np.ones((K, K))
    P = np.eye(K) - np.full((K, K), 1.0 / K)
    return P @ G @ P


def precondition_categorical(d_logits, rho, pi, mode: str = REFERENCE):
    """Natural gradient for the logits block, row-wise over the batch.

    ``d_logits`` is the per-sample gradient of H(rho, pi), i.e. ``pi - rho``.

    analytic: ``pinv(F) d_logits`` in closed form. For ``d_logits = pi - rho``
    this is ``1 - rho/pi`` shifted to zero mean.
    reference: the logit gradient of ``-sum_k (rho_k/pi_k) log pi_k`` with the
    ratio held constant, ``-rho/pi + pi * sum(rho/pi)``.
    """
    pi = np.maximum(np.asarray(pi, dtype=np.float64), PI_MIN)
    if mode == ANALYTIC:
        v = d_logits - d_logits.mean(axis=-1, keepdims=True)
        u = v / pi - v.sum(axis=-1, keepdims=True)
        return u - u.mean(axis=-1, keepdims=True)
    if mode == REFERENCE:
        ratio = np.clip(rho / pi, 0.0, RATIO_MAX)
        return -ratio + pi * ratio.sum(axis=-1, keepdims=True)
    raise ConfigError(f"unknown categorical mode {mode!r}; expected one of {CATEGORICAL_MODES}")


def natural_gradient(params: MixtureParams, rho, y, mode: str = REFERENCE) -> DistGradients:
    """Complete-data natural gradient of the nGEM loss w.r.t. (logits, means, scales)."""
    rho = _check_rho(params, rho)
    B = params.batch_size
    raw = ngem_grad(params, rho, y) * B  # per-sample gradients
    pi = params.weights
    d_mu, d_sigma = precondition_gaussian(raw.means, raw.scales, params.scales, pi[:, :, None])
    d_logits = precondition_categorical(raw.logits, rho, pi, mode)
    return DistGradients(d_logits / B, d_mu / B, d_sigma / B, preconditioned=True)


def loss_and_grad(loss: str, params: MixtureParams, y, mode: str = REFERENCE):
    """Loss value and the distribution-boundary gradient for one batch."""
    if loss == "nll":
        return nll_loss(params, y), nll_grad(params, y)
    rho = responsibilities(params, y)
    if loss == "sgem":
        return sgem_loss(params, rho, y), sgem_grad(params, rho, y)
    if loss == "ngem":
        return ngem_loss(params, rho, y), natural_gradient(params, rho, y, mode)
    raise ConfigError(f"unknown loss {loss!r}")
