"""Training loop, evaluation metrics, timing and metrics CSV output."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import entr

from ngem import data as datasets
from ngem.diffnet import init_free_mixture, init_net
from ngem.errors import ConfigError, NgemError
from ngem.mixture import (
    CATEGORICAL_MODES,
    MixtureParams,
    head_backward,
    head_transform,
    log_mixture_density,
    loss_and_grad,
    nll_loss,
)
from ngem.optim import Optimizer

log = logging.getLogger(__name__)

LOSSES = ("nll", "sgem", "ngem")
DATASETS = ("two_gaussians", "two_sinusoids", "csv")
CSV_COLUMNS = ("iteration", "train_loss", "test_nll", "entropy", "rmse_min", "wall_ms")


@dataclass
class RunConfig:
    loss: str = "ngem"
    categorical_mode: str = "reference"
    optimizer: str = "sgd"
    lr: float = 1e-2
    components: int = 2
    epochs: int = 50
    batch_size: int = 1
    seed: int = 1
    dataset: str = "two_gaussians"
    n_per_mode: int = 100
    data_seed: int = None  # defaults to seed
    csv_path: str = None
    target_columns: tuple = ()
    normalize: bool = True
    train_frac: float = 1.0
    hidden: tuple = (128, 128, 128, 128)
    eval_every: int = 100
    direct_gmm: bool = False
    max_iters: int = None

    def validate(self) -> "RunConfig":
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.categorical_mode not in CATEGORICAL_MODES:
            raise ConfigError(f"categorical_mode must be one of {CATEGORICAL_MODES}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "csv" and not (self.csv_path and self.target_columns):
            raise ConfigError("csv dataset needs csv_path and target_columns")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.components < 1 or self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("components, epochs, batch_size and eval_every must be >= 1")
        return self


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name, ftype, text):
    text = text.strip()
    try:
        if name in ("hidden",):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if name == "target_columns":
            return tuple(v.strip() for v in text.split(",") if v.strip())
        if name in ("data_seed", "max_iters", "csv_path"):
            if text.lower() in ("", "none"):
                return None
            return text if name == "csv_path" else int(text)
        if ftype == "bool":
            return _BOOL[text.lower()]
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
    except (ValueError, KeyError):
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


def load_config(path, **overrides) -> RunConfig:
    """Read a config file; a relative ``csv_path`` is taken from the file's directory."""
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), **overrides)
    if cfg.csv_path and not Path(cfg.csv_path).is_absolute():
        cfg = replace(cfg, csv_path=str(path.parent / cfg.csv_path))
    return cfg


def make_dataset(cfg: RunConfig):
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.dataset == "two_gaussians":
        return datasets.gen_two_gaussians(cfg.n_per_mode, seed)
    if cfg.dataset == "two_sinusoids":
        return datasets.gen_two_sinusoids(cfg.n_per_mode, seed)
    return datasets.load_csv(cfg.csv_path, cfg.target_columns, cfg.normalize)


def make_model(cfg: RunConfig, ds):
    Dy = ds.y.shape[1]
    if cfg.direct_gmm:
        return init_free_mixture(cfg.components, Dy, cfg.seed, ds.x.shape[1])
    return init_net([ds.x.shape[1], *cfg.hidden], cfg.components, Dy, cfg.seed)


def entropy(pi) -> float:
    """Shannon entropy in nats with 0 log 0 = 0."""
    pi = np.asarray(pi, dtype=np.float64)
    return float(min(entr(pi).sum(), math.log(pi.size)))


def mean_entropy(weights) -> float:
    """Average over rows of the per-input mixture-weight entropy."""
    w = np.asarray(weights, dtype=np.float64)
    return float(np.minimum(entr(w).sum(axis=1), math.log(w.shape[1])).mean())


def rmse_min(params: MixtureParams, y) -> float:
    """Root-mean-square over samples of the distance to the closest component mean."""
    d2 = ((params.means - np.asarray(y)[:, None, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1).mean()))


def ground_truth_params(truth: dict, n: int) -> MixtureParams:
    w = np.asarray(truth["weights"], dtype=np.float64)
    K = w.size
    return MixtureParams(
        np.broadcast_to(np.log(w), (n, K)).copy(),
        np.broadcast_to(truth["means"], (n, *np.shape(truth["means"]))).copy(),
        np.broadcast_to(truth["scales"], (n, *np.shape(truth["scales"]))).copy(),
    )


def ground_truth_nll(ds) -> float:
    return nll_loss(ground_truth_params(ds.ground_truth, len(ds)), ds.y)


@dataclass
class MetricsRecord:
    iteration: int
    train_loss: float
    test_nll: float
    entropy: float
    rmse_min: float
    wall_ms: float
    means: np.ndarray = None  # K x Dy snapshot for shared-parameter models


@dataclass
class TrainResult:
    model: object
    metrics: list
    divergence: dict = None
    iterations: int = 0

    @property
    def final(self) -> MetricsRecord:
        return self.metrics[-1]


class Divergence(NgemError):
    def __init__(self, iteration, tensor):
        super().__init__(f"non-finite {tensor} at iteration {iteration}")
        self.iteration = iteration
        self.tensor = tensor


class Trainer:
    """One model plus its optimizer; ``step`` is one E-step plus one parameter update."""

    def __init__(self, cfg: RunConfig, ds):
        self.cfg = cfg
        self.model = make_model(cfg, ds)
        self.opt = Optimizer(cfg.optimizer, cfg.lr)
        self.iteration = 0

    def step(self, xb, yb) -> float:
        # overflow is caught by the finiteness checks below, so keep numpy quiet
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._step(xb, yb)

    def _step(self, xb, yb) -> float:
        cfg, model = self.cfg, self.model
        raw, trace = model.forward(xb)
        params = head_transform(raw, model.K, model.Dy, model.scale_map)
        # nll: plain backprop; sgem/ngem: E-step then (preconditioned) M-step
        loss, grads = loss_and_grad(cfg.loss, params, yb, cfg.categorical_mode)
        if not math.isfinite(loss):
            raise Divergence(self.iteration + 1, _first_bad(params) or "loss")
        grad = model.backward(trace, head_backward(params, grads))
        if not np.all(np.isfinite(grad)):
            raise Divergence(self.iteration + 1, "parameter gradient")
        self.model = model.with_params(self.opt.step(model.theta, grad))
        self.iteration += 1
        return loss

    def evaluate(self, ds) -> dict:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._evaluate(ds)

    def _evaluate(self, ds) -> dict:
        raw, _ = self.model.forward(ds.x)
        params = head_transform(raw, self.model.K, self.model.Dy, self.model.scale_map)
        out = {
            "test_nll": float(-log_mixture_density(params, ds.y).mean()),
            "entropy": mean_entropy(params.weights),
            "rmse_min": rmse_min(params, ds.y),
            "means": None,
        }
        if self.cfg.direct_gmm:
            out["means"] = params.means[0].copy()
        return out

    def objective(self, ds) -> float:
        raw, _ = self.model.forward(ds.x)
        params = head_transform(raw, self.model.K, self.model.Dy, self.model.scale_map)
        return loss_and_grad(self.cfg.loss, params, ds.y, self.cfg.categorical_mode)[0]


def _first_bad(params):
    for name in ("logits", "means", "scales"):
        if not np.all(np.isfinite(getattr(params, name))):
            return name
    return None


def train(cfg: RunConfig, ds=None, timing: bool = True) -> TrainResult:
    """Run a full training job and collect metrics every ``eval_every`` updates.

    Divergence stops the run; the result keeps the metrics gathered so far and
    a ``divergence`` record naming the iteration and tensor.
    """
    cfg.validate()
    ds = make_dataset(cfg) if ds is None else ds
    stream, test = datasets.split_and_batch(ds, cfg.train_frac, cfg.batch_size, cfg.seed)
    eval_set = test if len(test) else stream.ds
    trainer = Trainer(cfg, ds)
    metrics = []
    elapsed = 0.0
    losses = []

    def record(train_loss):
        ev = trainer.evaluate(eval_set)
        metrics.append(MetricsRecord(trainer.iteration, train_loss, ev["test_nll"],
                                     ev["entropy"], ev["rmse_min"], elapsed * 1e3 if timing else 0.0,
                                     ev["means"]))

    record(trainer.objective(stream.ds))
    divergence = None
    try:
        for xb, yb in _batches(stream, cfg.epochs):
            if cfg.max_iters is not None and trainer.iteration >= cfg.max_iters:
                break
            t0 = time.perf_counter()
            losses.append(trainer.step(xb, yb))
            elapsed += time.perf_counter() - t0
            if trainer.iteration % cfg.eval_every == 0:
                record(float(np.mean(losses)))
                losses.clear()
    except Divergence as exc:
        divergence = {"iteration": exc.iteration, "tensor": exc.tensor}
        log.warning("run diverged: %s", exc)
    if losses and metrics[-1].iteration != trainer.iteration:
        record(float(np.mean(losses)))
    return TrainResult(trainer.model, metrics, divergence, trainer.iteration)


def benchmark_overhead(cfg: RunConfig, updates: int, block: int = 250, warmup: int = 50):
    """Wall-clock seconds for ``updates`` nGEM and NLL updates on the same config.

    The two runs advance in alternating blocks so machine-load drift hits both
    equally; warmup updates are excluded.
    """
    ds = make_dataset(cfg)
    trainers = {}
    for loss in ("ngem", "nll"):
        c = replace(cfg, loss=loss)
        stream, _ = datasets.split_and_batch(ds, c.train_frac, c.batch_size, c.seed)
        trainers[loss] = (Trainer(c, ds), _cycle(stream))
    for tr, batches in trainers.values():
        for _ in range(warmup if updates else 0):
            tr.step(*next(batches))
    wall = {"ngem": 0.0, "nll": 0.0}
    done = 0
    while done < updates:
        n = min(block, updates - done)
        for loss, (tr, batches) in trainers.items():
            chunk = [next(batches) for _ in range(n)]
            t0 = time.perf_counter()
            for xb, yb in chunk:
                tr.step(xb, yb)
            wall[loss] += time.perf_counter() - t0
        done += n
    return wall["ngem"], wall["nll"]


def _batches(stream, epochs):
    for epoch in range(1, epochs + 1):
        yield from stream.epoch(epoch)


def _cycle(stream):
    epoch = 1
    while True:
        yield from stream.epoch(epoch)
        epoch += 1


def emit_csv(metrics, path) -> None:
    """Write metrics with 17 significant digits; mean snapshots become extra columns."""
    header = list(CSV_COLUMNS)
    snap = next((m.means for m in metrics if m.means is not None), None)
    if snap is not None:
        K, Dy = snap.shape
        header += [f"mean_{k}_{d}" for k in range(K) for d in range(Dy)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for m in metrics:
            row = [str(m.iteration)] + [_fmt(getattr(m, c)) for c in CSV_COLUMNS[1:]]
            if snap is not None:
                row += [_fmt(v) for v in np.ravel(m.means)]
            w.writerow(row)


def _fmt(v) -> str:
    return "%.17g" % v


def read_metrics_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]
