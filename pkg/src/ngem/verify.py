"""Theorem checks run by ``ngem verify`` and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ngem import oracle
from ngem.diffnet import init_net
from ngem.harness import RunConfig, Trainer, make_dataset
from ngem.data import split_and_batch
from ngem.mixture import (
    categorical_fim,
    categorical_fim_pinv,
    head_backward,
    head_transform,
    natural_gradient,
    nll_grad,
    responsibilities,
    sgem_grad,
)

MC_SAMPLES = 1_000_000


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_instance(rng, K=None, Dy=None, B=None):
    """A small random MDN plus a batch drawn near its outputs."""
    K = K or int(rng.integers(1, 5))
    Dy = Dy or int(rng.integers(1, 3))
    B = B or int(rng.integers(1, 9))
    Dx = int(rng.integers(1, 4))
    hidden = [int(h) for h in rng.integers(2, 9, size=rng.integers(0, 3))]
    net = init_net([Dx, *hidden], K, Dy, seed=int(rng.integers(1 << 31)))
    net = net.with_params(net.theta + 0.3 * rng.standard_normal(net.n_params))
    x = rng.standard_normal((B, Dx))
    y = 2.0 * rng.standard_normal((B, Dy))
    return net, x, y


def param_gradient(net, x, y, loss):
    raw, trace = net.forward(x)
    p = head_transform(raw, net.K, net.Dy)
    if loss == "nll":
        g = nll_grad(p, y)
    else:
        g = sgem_grad(p, responsibilities(p, y), y)
    return net.backward(trace, head_backward(p, g))


def check_gradient_equality(n_instances=100, seed=0, tol=1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        net, x, y = random_instance(rng)
        diff = param_gradient(net, x, y, "nll") - param_gradient(net, x, y, "sgem")
        worst = max(worst, float(np.abs(diff).max()))
    return CheckResult("gradient equality NLL vs sGEM", worst <= tol,
                       f"max |diff| = {worst:.2e} over {n_instances} instances (tol {tol:g})")


def check_trajectories_identical(steps=200, seed=3) -> CheckResult:
    """Train nll and sgem side by side and compare parameters after every update."""
    cfg = RunConfig(optimizer="adam", lr=1e-3, seed=seed, dataset="two_sinusoids",
                    n_per_mode=200, batch_size=32, hidden=(16, 16), train_frac=0.8)
    ds = make_dataset(cfg)
    stream, _ = split_and_batch(ds, cfg.train_frac, cfg.batch_size, cfg.seed)
    a = Trainer(replace(cfg, loss="nll"), ds)
    b = Trainer(replace(cfg, loss="sgem"), ds)
    epoch, first_mismatch = 1, None
    while a.iteration < steps and first_mismatch is None:
        for xb, yb in stream.epoch(epoch):
            a.step(xb, yb)
            b.step(xb, yb)
            if not np.array_equal(a.model.theta, b.model.theta):
                first_mismatch = a.iteration
                break
            if a.iteration >= steps:
                break
        epoch += 1
    ok = first_mismatch is None
    detail = (f"bit-identical over {a.iteration} Adam updates" if ok
              else f"diverged at update {first_mismatch}")
    return CheckResult("nll/sgem trajectories identical", ok, detail)


def check_gaussian_fim(sigmas=(1.0, 2.0, 0.5), n=MC_SAMPLES, seed=11) -> CheckResult:
    notes, ok = [], True
    for i, s in enumerate(sigmas):
        est = oracle.mc_fisher_gaussian([0.0], [s], n, seed + i)
        predicted = np.diag([1.0 / s**2, 2.0 / s**2])
        inside = bool(est.within(predicted).all())
        tight = bool((3 * np.diag(est.stderr) <= 0.02 * np.diag(predicted)).all())
        ok &= inside and tight
        notes.append(f"sigma={s:g}: diag={np.round(np.diag(est.value), 4).tolist()}")
    return CheckResult("Gaussian FIM diag(1/s^2, 2/s^2)", ok, "; ".join(notes))


def check_categorical_fim(n=MC_SAMPLES, seed=12, trials=20, tol=1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok, worst_mp = True, 0.0
    for t in range(trials):
        K = int(rng.integers(2, 7))
        pi = rng.dirichlet(np.ones(K))
        F = categorical_fim(pi)
        if t < 3:
            est = oracle.mc_fisher_categorical(pi, n, seed + t)
            ok &= bool(est.within(F, atol=1e-15).all())
        worst_mp = max(worst_mp, max(oracle.moore_penrose_residuals(F, categorical_fim_pinv(pi))))
    ok &= worst_mp <= tol
    return CheckResult("categorical FIM diag(pi) - pi pi^T and pseudo-inverse", ok,
                       f"MC matches; worst Moore-Penrose residual {worst_mp:.1e} (tol {tol:g})")


def check_block_diagonal(weights=(0.3, 0.7), means=(-1.0, 2.0), scales=(0.8, 1.5),
                         n=MC_SAMPLES, seed=13) -> CheckResult:
    est = oracle.mc_complete_fim(weights, np.reshape(means, (-1, 1)),
                                 np.reshape(scales, (-1, 1)), n, seed)
    predicted = oracle.predicted_complete_fim(weights, np.reshape(scales, (-1, 1)))
    inside = est.within(predicted, atol=1e-12)
    comp, logits = oracle.complete_fim_layout(len(weights), 1)
    diag_idx = np.concatenate(comp)
    tight = bool((3 * est.stderr[diag_idx, diag_idx] <= 0.02 * predicted[diag_idx, diag_idx]).all())
    ok = bool(inside.all()) and tight
    off = np.abs(est.value - predicted)[predicted == 0]
    return CheckResult("complete-data FIM block-diagonal", ok,
                       f"{int(inside.sum())}/{inside.size} entries within 3 SE; "
                       f"max |off-block| {off.max():.1e}")


def check_k1_reduction(n_instances=50, seed=14, tol=1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        net, x, y = random_instance(rng, K=1)
        p = head_transform(net.forward(x)[0], 1, net.Dy)
        rho = responsibilities(p, y)
        nat = natural_gradient(p, rho, y)
        expected = p.scales**2 * nll_grad(p, y).means
        worst = max(worst, float(np.abs(nat.means - expected).max()))
    return CheckResult("K=1 reduces to sigma^2-weighted NLL", worst <= tol,
                       f"max |diff| = {worst:.1e} (tol {tol:g})")


def run_all(n_samples=MC_SAMPLES):
    return [
        check_gradient_equality(),
        check_trajectories_identical(),
        check_gaussian_fim(n=n_samples),
        check_categorical_fim(n=n_samples),
        check_block_diagonal(n=n_samples),
        check_k1_reduction(),
    ]
