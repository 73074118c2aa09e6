"""Adversarial tight-match training loop.

Half-and-half batches (n_b per domain), per-iteration pseudo-labels,
the combined objective cls + lambda*dom + alpha*mdd, and SGD with
momentum and weight decay. Fully deterministic given (seed, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .divergence import SampleSet, mdd_batch, mdd_full
from .models import AtmModel, adversarial_loss

CSV_HEADER = "epoch,cls_loss,dom_loss,mdd_loss,total_loss,source_acc,target_acc,pseudo_acc,mdd_value"


class TrainError(Exception):
    pass


class NumericFailure(TrainError):
    """Raised when a loss goes non-finite; names the epoch and step."""


@dataclass
class TrainConfig:
    alpha: float = 0.01
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0
    term_mask: tuple = (True, True, True)
    grl_coeff: float = 1.0
    grl_ramp: bool = False
    lr_decay: tuple | None = None  # (gamma, beta) for lr*(1+gamma*progress)^-beta
    early_stop_tol: float = 1e-6
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise TrainError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.alpha < 0 or self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise TrainError("invalid optimizer hyperparameters")
        for name in ("alpha", "lam", "lr", "momentum", "weight_decay"):
            if not math.isfinite(getattr(self, name)):
                raise TrainError(f"{name} must be finite")
        self.term_mask = tuple(bool(b) for b in self.term_mask)
        if len(self.term_mask) != 3:
            raise TrainError("term_mask needs exactly 3 booleans")

    @property
    def n_b(self):
        return self.batch_size // 2


def _format_cell(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, cls_loss, dom_loss, mdd_loss, total_loss,
               source_acc, target_acc, pseudo_acc, mdd_value):
        self.rows.append((epoch, cls_loss, dom_loss, mdd_loss, total_loss,
                          source_acc, target_acc, pseudo_acc, mdd_value))

    def column(self, name):
        idx = CSV_HEADER.split(",").index(name)
        return [row[idx] for row in self.rows]

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            lines.append(",".join(_format_cell(x) for x in row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv())


def half_half_sampler(source: SampleSet, target: SampleSet, n_b: int,
                      seed: int, epoch: int):
    """Yield (source-index, target-index) batches for one epoch.

    Every source sample appears once before any repeats; the other
    domain recycles round-robin from its per-epoch shuffled order.
    """
    if n_b < 1:
        raise TrainError(f"n_b must be >= 1, got {n_b}")
    rng = np.random.default_rng([seed, epoch])
    src_order = rng.permutation(source.n)
    tgt_order = rng.permutation(target.n)
    n_batches = max(1, -(-source.n // n_b))
    for b in range(n_batches):
        src_idx = np.array([src_order[(b * n_b + k) % source.n] for k in range(n_b)])
        tgt_idx = np.array([tgt_order[(b * n_b + k) % target.n] for k in range(n_b)])
        yield src_idx, tgt_idx


def pseudo_label(model: AtmModel, xt: np.ndarray) -> np.ndarray:
    return model.pseudo_labels(xt)


def sgd_update(param: Tensor, grad: np.ndarray, velocity: np.ndarray,
               lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v. In place."""
    if grad.shape != param.data.shape or velocity.shape != param.data.shape:
        raise TrainError(f"shape mismatch in sgd_update: {param.data.shape} vs {grad.shape}")
    velocity *= momentum
    velocity += grad + weight_decay * param.data
    param.data -= lr * velocity


def step(model: AtmModel, batch, config: TrainConfig, opt_state: dict,
         lr: float, grl_coeff: float):
    """One optimization step on a half-and-half batch.

    Returns the loss components as floats; total follows the logged
    decomposition cls + lambda*dom + alpha*mdd.
    """
    xs, ys, xt = batch
    parts = adversarial_loss(model, Tensor(xs), ys, Tensor(xt),
                             lam=config.lam, grl_coeff=grl_coeff)
    yt = np.argmax(parts.pt.data, axis=1)
    mdd = mdd_batch(parts.fs, parts.ft, ys, yt, term_mask=config.term_mask)
    objective = parts.descent_objective + config.alpha * mdd

    components = {
        "cls_loss": parts.cls_loss,
        "dom_loss": parts.dom_loss,
        "mdd_loss": mdd.item(),
        "total_loss": parts.cls_loss + config.lam * parts.dom_loss + config.alpha * mdd.item(),
    }
    if not all(math.isfinite(v) for v in components.values()):
        raise NumericFailure(f"non-finite loss components: {components}")

    dc.backward(objective)
    for name, param in model.params.items():
        if name not in opt_state:
            opt_state[name] = np.zeros_like(param.data)
        sgd_update(param, param.grad, opt_state[name],
                   lr, config.momentum, config.weight_decay)
    model.zero_grads()
    return components


def _accuracy(model: AtmModel, s: SampleSet):
    if s.labels is None:
        return float("nan")
    pred = model.pseudo_labels(s.features)
    return float(np.mean(pred == s.labels))


def _mdd_on_features(model: AtmModel, source: SampleSet, target: SampleSet):
    fs = model.forward_features(Tensor(source.features)).data
    ft = model.forward_features(Tensor(target.features)).data
    return mdd_full(SampleSet(fs), SampleSet(ft))


def _grl_schedule(config: TrainConfig, progress: float) -> float:
    if not config.grl_ramp:
        return config.grl_coeff
    return config.grl_coeff * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


def _lr_schedule(config: TrainConfig, progress: float) -> float:
    if config.lr_decay is None:
        return config.lr
    gamma, beta = config.lr_decay
    return config.lr * (1.0 + gamma * progress) ** (-beta)


def run(source: SampleSet, target: SampleSet, config: TrainConfig,
        model: AtmModel):
    """Train for up to max_epochs, logging one metrics row per epoch.

    Stops early once the logged total loss moves by less than the
    configured tolerance for `early_stop_patience` consecutive epochs.
    """
    if source.labels is None:
        raise TrainError("source domain must be labeled")
    log = MetricsLog()
    opt_state: dict = {}
    flat_epochs = 0
    prev_total = None

    for epoch in range(config.max_epochs):
        progress = epoch / max(1, config.max_epochs - 1) if config.max_epochs > 1 else 0.0
        lr = _lr_schedule(config, progress)
        grl_coeff = _grl_schedule(config, progress)

        sums = {"cls_loss": 0.0, "dom_loss": 0.0, "mdd_loss": 0.0, "total_loss": 0.0}
        n_steps = 0
        for src_idx, tgt_idx in half_half_sampler(source, target, config.n_b,
                                                  config.seed, epoch):
            batch = (source.features[src_idx], source.labels[src_idx],
                     target.features[tgt_idx])
            try:
                components = step(model, batch, config, opt_state, lr, grl_coeff)
            except NumericFailure as err:
                raise NumericFailure(f"epoch {epoch}, step {n_steps}: {err}") from None
            for k in sums:
                sums[k] += components[k]
            n_steps += 1

        means = {k: v / n_steps for k, v in sums.items()}
        target_acc = _accuracy(model, target)
        log.append(epoch, means["cls_loss"], means["dom_loss"], means["mdd_loss"],
                   means["total_loss"], _accuracy(model, source), target_acc,
                   target_acc, _mdd_on_features(model, source, target))

        if prev_total is not None and abs(means["total_loss"] - prev_total) < config.early_stop_tol:
            flat_epochs += 1
            if flat_epochs >= config.early_stop_patience:
                break
        else:
            flat_epochs = 0
        prev_total = means["total_loss"]

    return model, log
