"""Network assembly for adversarial tight matching.

Feature learner (MLP) -> softmax predictor, plus a domain discriminator
fed by the flattened outer product of features and class probabilities.
The minimax is realized with a gradient-reversal stage so a single
backward pass trains both players.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DISC_CLAMP = 1e-7


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a relu MLP, input first, feature width last."""

    layer_widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ModelError(f"need >= 2 positive layer widths, got {widths}")

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def feature_dim(self):
        return self.layer_widths[-1]


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class AtmModel:
    """Feature learner F, predictor, gradient reversal and discriminator D."""

    def __init__(self, spec: MlpSpec, n_classes: int, disc_hidden: int = 32,
                 grl_coeff: float = 1.0, seed: int = 0):
        if n_classes < 2:
            raise ModelError("need at least 2 classes")
        if grl_coeff < 0:
            raise ModelError("grl_coeff must be >= 0")
        self.spec = spec
        self.n_classes = int(n_classes)
        self.grl_coeff = float(grl_coeff)
        rng = np.random.default_rng(seed)

        self.params: dict[str, Tensor] = {}
        widths = spec.layer_widths
        for i in range(len(widths) - 1):
            self._add(f"feat.{i}.W", _glorot(rng, widths[i], widths[i + 1]))
            self._add(f"feat.{i}.b", np.zeros((1, widths[i + 1])))
        self._add("pred.W", _glorot(rng, spec.feature_dim, n_classes))
        self._add("pred.b", np.zeros((1, n_classes)))
        disc_in = spec.feature_dim * n_classes
        disc_widths = (disc_in, disc_hidden, disc_hidden, 1)
        for i in range(3):
            self._add(f"disc.{i}.W", _glorot(rng, disc_widths[i], disc_widths[i + 1]))
            self._add(f"disc.{i}.b", np.zeros((1, disc_widths[i + 1])))

    def _add(self, name, values):
        self.params[name] = Tensor(values, requires_grad=True)

    @property
    def n_feature_layers(self):
        return len(self.spec.layer_widths) - 1

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    # ----- forward pieces -------------------------------------------------

    def forward_features(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.input_dim:
            raise ModelError(f"input width {x.shape[1]} != spec width {self.spec.input_dim}")
        h = x
        for i in range(self.n_feature_layers):
            h = dc.relu(dc.add(dc.matmul(h, self.params[f"feat.{i}.W"]),
                               self.params[f"feat.{i}.b"]))
        return h

    def predict(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.spec.feature_dim:
            raise ModelError(f"feature width {f.shape[1]} != {self.spec.feature_dim}")
        logits = dc.add(dc.matmul(f, self.params["pred.W"]), self.params["pred.b"])
        return dc.softmax_rows(logits)

    def discriminate(self, h: Tensor) -> Tensor:
        expected = self.spec.feature_dim * self.n_classes
        if h.shape[1] != expected:
            raise ModelError(f"discriminator input width {h.shape[1]} != {expected}")
        z = h
        for i in range(2):
            z = dc.relu(dc.add(dc.matmul(z, self.params[f"disc.{i}.W"]),
                               self.params[f"disc.{i}.b"]))
        z = dc.sigmoid(dc.add(dc.matmul(z, self.params["disc.2.W"]),
                              self.params["disc.2.b"]))
        return dc.clamp(z, DISC_CLAMP, 1.0 - DISC_CLAMP)

    def pseudo_labels(self, x: np.ndarray) -> np.ndarray:
        # argmax ties break toward the lowest class index
        f = self.forward_features(Tensor(x))
        p = self.predict(f)
        return np.argmax(p.data, axis=1)

    # ----- checkpoints ----------------------------------------------------

    def save(self, path):
        blob = {name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for name, t in self.params.items()}
        meta = {"layer_widths": list(self.spec.layer_widths),
                "n_classes": self.n_classes,
                "grl_coeff": self.grl_coeff,
                "disc_hidden": int(self.params["disc.0.W"].shape[1])}
        with open(path, "w") as fh:
            json.dump({"meta": meta, "params": blob}, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            blob = json.load(fh)
        meta = blob["meta"]
        model = cls(MlpSpec(tuple(meta["layer_widths"])), meta["n_classes"],
                    disc_hidden=meta["disc_hidden"], grl_coeff=meta["grl_coeff"])
        for name, rec in blob["params"].items():
            model.params[name] = Tensor(
                np.array(rec["values"], dtype=np.float64).reshape(rec["shape"]),
                requires_grad=True)
        return model


# ---------------------------------------------------------------------------
# conditioning pieces


def multilinear_map(f: Tensor, p: Tensor) -> Tensor:
    """Row-wise flattened outer product: h[i, a*C + b] = f[i, a] * p[i, b]."""
    if f.shape[0] != p.shape[0]:
        raise ModelError(f"row mismatch: {f.shape[0]} vs {p.shape[0]}")
    n, df = f.shape
    c = p.shape[1]
    out = (f.data[:, :, None] * p.data[:, None, :]).reshape(n, df * c)

    def back(g):
        g3 = g.reshape(n, df, c)
        return ((g3 * p.data[:, None, :]).sum(axis=2),
                (g3 * f.data[:, :, None]).sum(axis=1))

    return dc._node(out, (f, p), back)


def entropy_weight(p: Tensor) -> Tensor:
    """Per-row weight 1 + exp(-H(p)), normalized to batch mean 1."""
    sums = p.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ModelError("entropy_weight rows must sum to 1 within 1e-6")
    neg_ent = dc.sum_rows(dc.mul(p, dc.log(p)))
    raw = dc.exp(neg_ent) + 1.0
    return dc.div(raw, dc.mean(raw))


@dataclass
class AdvLossParts:
    """Classification and domain terms of the adversarial objective.

    ``dom`` carries the discriminator's log-likelihood sign: it is what
    D maximizes. ``descent_objective`` is the scalar a single backward
    pass descends; the gradient-reversal stage inside the domain path
    makes that one pass update D to maximize and F to minimize.
    """

    cls: Tensor
    dom: Tensor
    lam: float
    # forward activations, kept so further loss terms can share the graph
    fs: Tensor | None = None
    ft: Tensor | None = None
    ps: Tensor | None = None
    pt: Tensor | None = None

    @property
    def cls_loss(self) -> float:
        return self.cls.item()

    @property
    def dom_loss(self) -> float:
        return self.dom.item()

    @property
    def total(self) -> float:
        return self.cls_loss + self.lam * self.dom_loss

    @property
    def descent_objective(self) -> Tensor:
        return self.cls - self.lam * self.dom


def cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = p.shape
    if labels.shape != (n,):
        raise ModelError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ModelError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = dc.mul(dc.log(p), Tensor(onehot))
    return -dc.sum_all(picked) * (1.0 / n)


def adversarial_loss(model: AtmModel, xs: Tensor, ys, xt: Tensor,
                     lam: float = 1.0, grl_coeff: float | None = None) -> AdvLossParts:
    """Source cross-entropy plus the entropy-conditioned domain term.

    Features and predictions pass through gradient reversal before the
    conditioning map, so all domain-term influence on F is reversed.
    """
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ModelError("empty batch")
    coeff = model.grl_coeff if grl_coeff is None else grl_coeff

    fs = model.forward_features(xs)
    ft = model.forward_features(xt)
    ps = model.predict(fs)
    pt = model.predict(ft)

    cls = cross_entropy(ps, ys)

    fs_r, ps_r = dc.grad_reverse(fs, coeff), dc.grad_reverse(ps, coeff)
    ft_r, pt_r = dc.grad_reverse(ft, coeff), dc.grad_reverse(pt, coeff)
    ds = model.discriminate(multilinear_map(fs_r, ps_r))
    dt = model.discriminate(multilinear_map(ft_r, pt_r))
    ws = entropy_weight(ps_r)
    wt = entropy_weight(pt_r)
    dom = dc.mean(dc.mul(ws, dc.log(ds))) + dc.mean(dc.mul(wt, dc.log(1.0 - dt)))

    return AdvLossParts(cls=cls, dom=dom, lam=float(lam), fs=fs, ft=ft, ps=ps, pt=pt)
