"""Density-divergence family: the tight-match loss plus baseline metrics.

All the non-differentiable measures work directly on numpy arrays; the
batch loss is built from diffcore ops so it participates in backward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


class DivergenceError(Exception):
    pass


@dataclass
class SampleSet:
    """A matrix of row-vector samples with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray | None = None
    domain_tag: str = "source"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DivergenceError(f"features must be a non-empty matrix, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DivergenceError(
                    f"label count {self.labels.shape} does not match {self.features.shape[0]} rows")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class FiniteDist:
    """A probability vector over a finite alphabet with a point embedding.

    Defaults to one-hot rows, the canonical embedding of a k-symbol
    alphabet into R^k.
    """

    probs: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.size < 1:
            raise DivergenceError("probs must be a 1-D vector")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise DivergenceError("probs must be non-negative and sum to 1 within 1e-12")
        if self.points is None:
            self.points = np.eye(self.probs.size)
        else:
            self.points = np.asarray(self.points, dtype=np.float64)
            if self.points.ndim != 2 or self.points.shape[0] != self.probs.size:
                raise DivergenceError("points must embed every alphabet symbol")
            for i in range(self.points.shape[0]):
                for j in range(i + 1, self.points.shape[0]):
                    if np.array_equal(self.points[i], self.points[j]):
                        raise DivergenceError(f"embedding rows {i} and {j} coincide")

    @property
    def k(self):
        return self.probs.size


def _pairwise_sq(a, b):
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0)


def _pairwise_l1(a, b):
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)


def mdd_population(p: FiniteDist, q: FiniteDist, ell: str = "sq_l2") -> float:
    """Exact population divergence by double sums over the two supports."""
    if p.points.shape[1] != q.points.shape[1]:
        raise DivergenceError(
            f"embedding dimensions differ: {p.points.shape[1]} vs {q.points.shape[1]}")
    if ell == "sq_l2":
        dist = _pairwise_sq
    elif ell == "l1":
        dist = _pairwise_l1
    else:
        raise DivergenceError(f"unknown norm order {ell!r}; expected 'sq_l2' or 'l1'")

    cross = p.probs @ dist(p.points, q.points) @ q.probs
    intra_p = p.probs @ dist(p.points, p.points) @ p.probs
    intra_q = q.probs @ dist(q.points, q.points) @ q.probs
    return float(cross + intra_p + intra_q)


def mdd_full(s: SampleSet, t: SampleSet) -> float:
    """All-pairs finite-sample divergence, the brute-force batch oracle.

    Iid copies are realized as all ordered pairs within each set,
    including i=j pairs (which contribute 0).
    """
    if s.dim != t.dim:
        raise DivergenceError(f"dimension mismatch: {s.dim} vs {t.dim}")
    # canonical operand order makes symmetry exact in floating point
    a, b = s.features, t.features
    if (a.shape, a.tobytes()) > (b.shape, b.tobytes()):
        a, b = b, a
    cross = _pairwise_sq(a, b).mean()
    intra_s = _pairwise_sq(a, a).mean()
    intra_t = _pairwise_sq(b, b).mean()
    return float(cross + (intra_s + intra_t))


def same_label_pairs(labels):
    """Unordered index pairs (i<j) sharing a label."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(labels.size, k=1)
    keep = labels[i] == labels[j]
    return i[keep], j[keep]


def mdd_batch(sf: dc.Tensor, tf: dc.Tensor, ys, yt,
              term_mask=(True, True, True)) -> dc.Tensor:
    """Differentiable batch loss: relative-position cross term plus the
    two same-label intra-domain density terms.

    A term with zero qualifying pairs contributes exactly 0.
    """
    ys = np.asarray(ys, dtype=np.int64)
    yt = np.asarray(yt, dtype=np.int64)
    n_b = sf.shape[0]
    if tf.shape[0] != n_b:
        raise DivergenceError(f"row-count mismatch: {sf.shape[0]} vs {tf.shape[0]}")
    if ys.shape != (n_b,) or yt.shape != (n_b,):
        raise DivergenceError("label sequences must match the batch row count")

    total = dc.Tensor(0.0)
    if term_mask[0]:
        diff = dc.sub(sf, tf)
        total = total + dc.sum_all(dc.square(diff)) * (1.0 / n_b)
    if term_mask[1]:
        i, j = same_label_pairs(ys)
        if i.size:
            diff = dc.sub(dc.gather_rows(sf, i), dc.gather_rows(sf, j))
            total = total + dc.sum_all(dc.square(diff)) * (1.0 / i.size)
    if term_mask[2]:
        i, j = same_label_pairs(yt)
        if i.size:
            diff = dc.sub(dc.gather_rows(tf, i), dc.gather_rows(tf, j))
            total = total + dc.sum_all(dc.square(diff)) * (1.0 / i.size)
    return total


def energy_distance(s: SampleSet, t: SampleSet) -> float:
    """2 E||X-Y|| - E||X-X'|| - E||Y-Y'|| with the plain Euclidean norm."""
    if s.dim != t.dim:
        raise DivergenceError(f"dimension mismatch: {s.dim} vs {t.dim}")
    cross = np.sqrt(_pairwise_sq(s.features, t.features)).mean()
    intra_s = np.sqrt(_pairwise_sq(s.features, s.features)).mean()
    intra_t = np.sqrt(_pairwise_sq(t.features, t.features)).mean()
    return float(2.0 * cross - intra_s - intra_t)


def mmd_gaussian(s: SampleSet, t: SampleSet, bandwidth: float) -> float:
    """Biased (V-statistic) Gaussian-kernel MMD estimate; always >= 0."""
    if bandwidth <= 0:
        raise DivergenceError(f"bandwidth must be positive, got {bandwidth}")
    if s.dim != t.dim:
        raise DivergenceError(f"dimension mismatch: {s.dim} vs {t.dim}")
    denom = 2.0 * bandwidth ** 2
    k_ss = np.exp(-_pairwise_sq(s.features, s.features) / denom).mean()
    k_tt = np.exp(-_pairwise_sq(t.features, t.features) / denom).mean()
    k_st = np.exp(-_pairwise_sq(s.features, t.features) / denom).mean()
    return float(k_ss + k_tt - 2.0 * k_st)


def _check_alphabets(p: FiniteDist, q: FiniteDist):
    if p.k != q.k or not np.array_equal(p.points, q.points):
        raise DivergenceError("distributions are defined on different alphabets")


def jeffreys_kl(p: FiniteDist, q: FiniteDist) -> float:
    """Symmetric KL, D(P||Q)+D(Q||P); +inf when the supports differ."""
    _check_alphabets(p, q)
    pv, qv = p.probs, q.probs
    if np.any((pv > 0) & (qv == 0)) or np.any((qv > 0) & (pv == 0)):
        return math.inf
    mask = pv > 0
    forward = float(np.sum(pv[mask] * np.log(pv[mask] / qv[mask])))
    mask = qv > 0
    reverse = float(np.sum(qv[mask] * np.log(qv[mask] / pv[mask])))
    return forward + reverse


def total_variation(p: FiniteDist, q: FiniteDist) -> float:
    _check_alphabets(p, q)
    return float(0.5 * np.abs(p.probs - q.probs).sum())


@dataclass
class LemmaAuditReport:
    """Empirical check of the claimed bounds MDD <= Jeffreys and MDD <= 4*TV^2.

    The bounds are recorded, not asserted: under the one-hot embedding
    MDD(P, P) is strictly positive for any non-degenerate P, so both
    inequalities fail near P = Q. The report keeps the MDD(P, P)
    statistics that exhibit this.
    """

    trials: int
    frac_lemma1_holds: float
    frac_lemma2_holds: float
    max_violation_magnitude: float
    mdd_pp_mean: float
    mdd_pp_max: float
    per_trial: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        payload = {
            "trials": self.trials,
            "frac_lemma1": self.frac_lemma1_holds,
            "frac_lemma2": self.frac_lemma2_holds,
            "max_violation": self.max_violation_magnitude,
            "mdd_pp_mean": self.mdd_pp_mean,
            "mdd_pp_max": self.mdd_pp_max,
        }
        return json.dumps({k: _float17(v) for k, v in payload.items()}, indent=2)


def _float17(x):
    if isinstance(x, float):
        return float(format(x, ".17g"))
    return x


def lemma_audit(trials: int, alphabet_size: int, seed: int) -> LemmaAuditReport:
    """Sample random distribution pairs and measure how often the
    Jeffreys and total-variation bounds actually hold."""
    if trials < 1:
        raise DivergenceError("trials must be >= 1")
    if not 2 <= alphabet_size <= 16:
        raise DivergenceError("alphabet_size must be in [2, 16]")

    rng = np.random.default_rng(seed)
    l1_hold = l2_hold = 0
    max_violation = 0.0
    mdd_pp = np.empty(trials)
    rows = []
    for trial in range(trials):
        p = FiniteDist(rng.dirichlet(np.ones(alphabet_size)))
        q = FiniteDist(rng.dirichlet(np.ones(alphabet_size)))
        mdd = mdd_population(p, q)
        jeff = jeffreys_kl(p, q)
        tv = total_variation(p, q)
        holds1 = mdd <= jeff
        holds2 = mdd <= 4.0 * tv ** 2
        l1_hold += holds1
        l2_hold += holds2
        if not holds1 and math.isfinite(jeff):
            max_violation = max(max_violation, mdd - jeff)
        if not holds2:
            max_violation = max(max_violation, mdd - 4.0 * tv ** 2)
        mdd_pp[trial] = mdd_population(p, p)
        rows.append((mdd, jeff, tv))

    return LemmaAuditReport(
        trials=trials,
        frac_lemma1_holds=l1_hold / trials,
        frac_lemma2_holds=l2_hold / trials,
        max_violation_magnitude=max_violation,
        mdd_pp_mean=float(mdd_pp.mean()),
        mdd_pp_max=float(mdd_pp.max()),
        per_trial=rows,
    )
