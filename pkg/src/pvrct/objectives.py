"""Binary losses (BCE, focal, MSE) and confusion-matrix metrics.

Label 1 is the positive class. Losses take predicted probabilities and
return ``(loss, dloss/dprob)``; probabilities are clamped to
``[eps, 1 - eps]`` and the gradient is evaluated at the clamped value.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, MissingClassError


@dataclass
class LossParams:
    gamma: float = 2.0
    alpha: float = 0.75
    prob_clamp_eps: float = 1e-7
    # False drops alpha entirely: the unweighted focal form
    alpha_balanced: bool = True

    def validate(self, prefix="loss_params"):
        if not self.gamma >= 0:
            raise ConfigError(f"{prefix}.gamma", "must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"{prefix}.alpha", "must lie in (0, 1)")
        if not 0 < self.prob_clamp_eps < 0.5:
            raise ConfigError(f"{prefix}.prob_clamp_eps", "must lie in (0, 0.5)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _prepare(probs, labels, eps):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != y.shape:
        raise ValueError(f"probs and labels differ in length: {p.size} vs {y.size}")
    return np.clip(p, eps, 1.0 - eps), y


def bce_loss(probs, labels, clamp_eps: float = 1e-7):
    p, y = _prepare(probs, labels, clamp_eps)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    grad = -(y / p - (1 - y) / (1 - p)) / n
    return float(loss), grad


def focal_loss(probs, labels, params: LossParams = None):
    """Alpha-balanced focal loss.

    ``-(1/N) sum[a (1-p)^g y log p + (1-a) p^g (1-y) log(1-p)]``; with
    ``alpha_balanced=False`` both weights are 1.
    """
    params = params or LossParams()
    g = float(params.gamma)
    a_pos, a_neg = (params.alpha, 1.0 - params.alpha) if params.alpha_balanced else (1.0, 1.0)
    p, y = _prepare(probs, labels, params.prob_clamp_eps)
    n = p.size
    logp, log1mp = np.log(p), np.log1p(-p)
    q = 1.0 - p
    pos = a_pos * y * q ** g * logp
    neg = a_neg * (1 - y) * p ** g * log1mp
    loss = -np.mean(pos + neg)
    if g == 0:
        d_pos = a_pos * y / p
        d_neg = -a_neg * (1 - y) / q
    else:
        d_pos = a_pos * y * (-g * q ** (g - 1) * logp + q ** g / p)
        d_neg = a_neg * (1 - y) * (g * p ** (g - 1) * log1mp - p ** g / q)
    grad = -(d_pos + d_neg) / n
    return float(loss), grad


def mse_loss(outputs, targets):
    """Mean squared error and its gradient ``2 (o - t) / N``."""
    o = np.asarray(outputs, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if o.size == 0:
        raise ValueError("empty batch")
    d = o - t
    return float(np.mean(d * d)), 2.0 * d / o.size


def threshold_decisions(probs, threshold: float = 0.5):
    """1 where ``prob >= threshold``, else 0."""
    return (np.asarray(probs, dtype=np.float64) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return asdict(self)

    def to_csv(self):
        """Rows are truth, columns are prediction, negative class first."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred", "0", "1"])
        w.writerow(["0", self.tn, self.fp])
        w.writerow(["1", self.fn, self.tp])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        tn, fp = int(rows[1][1]), int(rows[1][2])
        fn, tp = int(rows[2][1]), int(rows[2][2])
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)


def confusion(decisions, labels) -> ConfusionMatrix:
    d = np.asarray(decisions).reshape(-1).astype(np.int64)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if d.shape != y.shape:
        raise ValueError(f"decisions and labels differ in length: {d.size} vs {y.size}")
    return ConfusionMatrix(
        tp=int(np.sum((d == 1) & (y == 1))),
        fp=int(np.sum((d == 1) & (y == 0))),
        tn=int(np.sum((d == 0) & (y == 0))),
        fn=int(np.sum((d == 0) & (y == 1))),
    )


def _rates(cm):
    if cm.tp + cm.fn == 0:
        raise MissingClassError("no positive samples: sensitivity undefined", field="labels")
    if cm.tn + cm.fp == 0:
        raise MissingClassError("no negative samples: specificity undefined", field="labels")
    return cm.tp / (cm.tp + cm.fn), cm.tn / (cm.tn + cm.fp)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    sens, spec = _rates(cm)
    return (sens + spec) / 2.0


@dataclass(frozen=True)
class MetricReport:
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    accuracy: float

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def metric_report(cm: ConfusionMatrix) -> MetricReport:
    sens, spec = _rates(cm)
    return MetricReport(
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=(sens + spec) / 2.0,
        accuracy=(cm.tp + cm.tn) / cm.total,
    )
