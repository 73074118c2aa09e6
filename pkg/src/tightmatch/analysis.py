"""Evaluation and diagnostics: target accuracy, proxy A-distance,
the 8-cell intra-loss ablation grid, pseudo-label tracking and
feature export."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Tensor
from .divergence import SampleSet
from .models import AtmModel
from .trainer import MetricsLog, TrainConfig, run

# Term masks for ablation settings T1..T8, matching the bullet layout:
# T1 uses nothing, T8 uses all three terms.
ABLATION_MASKS = {
    "T1": (False, False, False),
    "T2": (True, False, False),
    "T3": (False, True, False),
    "T4": (False, False, True),
    "T5": (True, True, False),
    "T6": (True, False, True),
    "T7": (False, True, True),
    "T8": (True, True, True),
}


class AnalysisError(Exception):
    pass


def target_accuracy(model: AtmModel, target: SampleSet) -> float:
    if target.labels is None:
        raise AnalysisError("target labels required for evaluation")
    pred = model.pseudo_labels(target.features)
    return float(np.mean(pred == target.labels))


def _logistic_fit(x, y, iters=800, lr=0.5, tol=1e-8):
    # full-batch gradient descent on standardized inputs; deterministic
    mean, std = x.mean(axis=0), x.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    xn = (x - mean) / scale
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(iters):
        z = xn @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        gw = xn.T @ (p - y) / len(y)
        gb = float(np.mean(p - y))
        if np.abs(gw).max() < tol and abs(gb) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b, mean, scale


def a_distance(source_feats: np.ndarray, target_feats: np.ndarray, seed: int) -> float:
    """Proxy divergence 2(1 - 2*eps) from the test error of a linear
    logistic source-vs-target classifier, clamped to [0, 2]."""
    source_feats = np.asarray(source_feats, dtype=np.float64)
    target_feats = np.asarray(target_feats, dtype=np.float64)
    if source_feats.shape[0] < 4 or target_feats.shape[0] < 4:
        raise AnalysisError("need >= 4 samples per domain")
    rng = np.random.default_rng(seed)

    def split(feats):
        order = rng.permutation(feats.shape[0])
        half = feats.shape[0] // 2
        return feats[order[:half]], feats[order[half:]]

    s_train, s_test = split(source_feats)
    t_train, t_test = split(target_feats)
    x_train = np.vstack([s_train, t_train])
    y_train = np.concatenate([np.ones(len(s_train)), np.zeros(len(t_train))])
    x_test = np.vstack([s_test, t_test])
    y_test = np.concatenate([np.ones(len(s_test)), np.zeros(len(t_test))])

    w, b, mean, scale = _logistic_fit(x_train, y_train)
    pred = (((x_test - mean) / scale) @ w + b) >= 0.0
    eps = float(np.mean(pred != y_test.astype(bool)))
    return float(np.clip(2.0 * (1.0 - 2.0 * eps), 0.0, 2.0))


@dataclass
class AblationCell:
    setting_id: str
    term_mask: tuple
    accs: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        vals = [a for a in self.accs if not np.isnan(a)]
        return float(np.mean(vals)) if vals else float("nan")


def ablation_grid(source: SampleSet, target: SampleSet, base_config: TrainConfig,
                  seeds, model_factory) -> list:
    """Run the trainer for all 8 term masks x seeds; failures are logged
    per cell without aborting the grid."""
    seeds = list(seeds)
    if not seeds:
        raise AnalysisError("need at least one seed")
    cells = []
    for setting_id, mask in ABLATION_MASKS.items():
        cell = AblationCell(setting_id=setting_id, term_mask=mask)
        for seed in seeds:
            config = replace(base_config, term_mask=mask, seed=seed)
            try:
                model, log = run(source, target, config, model_factory(seed))
                cell.accs.append(target_accuracy(model, target))
                cell.errors.append(None)
            except Exception as err:  # keep the grid going
                cell.accs.append(float("nan"))
                cell.errors.append(str(err))
        cells.append(cell)
    return cells


def ablation_csv(cells, seeds) -> str:
    lines = ["setting,term1,term2,term3,seed,target_acc"]
    for cell in cells:
        t1, t2, t3 = (int(b) for b in cell.term_mask)
        for seed, acc in zip(seeds, cell.accs):
            lines.append(f"{cell.setting_id},{t1},{t2},{t3},{seed},{format(acc, '.17g')}")
        lines.append(f"{cell.setting_id},{t1},{t2},{t3},mean,{format(cell.mean_acc, '.17g')}")
    return "\n".join(lines) + "\n"


def pseudo_accuracy_curve(log: MetricsLog):
    """(epoch, pseudo_acc) pairs from a metrics log."""
    if not log.rows:
        raise AnalysisError("empty metrics log")
    return list(zip(log.column("epoch"), log.column("pseudo_acc")))


def export_features(model: AtmModel, sets, path):
    """Write learned features as CSV rows: feature...,label,domain_tag."""
    lines = []
    for s in sets:
        feats = model.forward_features(Tensor(s.features)).data
        labels = s.labels if s.labels is not None else np.full(s.n, -1, dtype=np.int64)
        for row, label in zip(feats, labels):
            cells = [format(v, ".17g") for v in row]
            lines.append(",".join(cells + [str(int(label)), s.domain_tag]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
