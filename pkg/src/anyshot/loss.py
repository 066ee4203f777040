"""Cross-entropy, focal and penalty-rebalanced losses with analytic gradients.

The rebalanced loss for one class slot with score ``p`` and reference level
``p_star`` is::

    p_t  = p / (1 + p_star - p) ** beta    if y == 1
         = 1 - p                           otherwise
    L    = max(0, -alpha_t * (1 - p_t) ** gamma * log(p_t))

``beta = 0`` recovers focal loss; additionally ``gamma = 0`` and
``alpha_t = 1`` recovers cross-entropy.  ``alpha_t`` is ``alpha`` for
positives and ``1 - alpha`` for negatives.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, EmptyInput, NumericalError

DEFAULT_EPSILON = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    beta: float = 5.0
    gamma: float = 2.0
    lambda_mix: float = 0.1
    p_star_mode: str = "dynamic"
    p_star_value: float = 1.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lambda_mix}")
        if self.p_star_mode not in ("fixed", "dynamic"):
            raise ConfigError(f"p_star_mode must be 'fixed' or 'dynamic', got {self.p_star_mode!r}")
        if not 0.0 < self.p_star_value <= 1.0:
            raise ConfigError(f"p_star_value must be in (0, 1], got {self.p_star_value}")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ConfigError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")

    def replace(self, **changes) -> "LossConfig":
        return LossConfig(**{**asdict(self), **changes})

    def to_flat(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "lambda": self.lambda_mix,
            "p_star_mode": self.p_star_mode,
            "p_star_value": self.p_star_value,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "LossConfig":
        kw = {}
        for key in ("alpha", "beta", "gamma", "p_star_value", "epsilon"):
            if key in flat:
                kw[key] = float(flat[key])
        if "lambda" in flat:
            kw["lambda_mix"] = float(flat["lambda"])
        if "p_star_mode" in flat:
            kw["p_star_mode"] = str(flat["p_star_mode"])
        return cls(**kw)


@dataclass(frozen=True)
class AnchorPrediction:
    """Per-class sigmoid scores of one anchor with its one-hot target."""

    scores: np.ndarray
    label: np.ndarray
    group: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.float64)
        if scores.shape != label.shape or scores.ndim != 1:
            raise DomainError("scores and label must be 1-D vectors of equal length")
        if label.sum() > 1 or np.any((label != 0) & (label != 1)):
            raise DomainError("label must be one-hot or all zeros")
        if np.any(scores <= 0) or np.any(scores >= 1):
            raise DomainError("scores must lie in (0, 1)")
        if self.group not in ("seen", "novel", "background"):
            raise DomainError(f"unknown anchor group {self.group!r}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "label", label)


def _check_prob(p, p_star=None):
    if not (0.0 <= p <= 1.0) or not math.isfinite(p):
        raise DomainError(f"p must be in [0, 1], got {p}")
    if p_star is not None and not (0.0 < p_star <= 1.0):
        raise DomainError(f"p_star must be in (0, 1], got {p_star}")


def penalty(p: float, p_star: float) -> float:
    """``log(1 + p_star - p)``: negative when p > p_star, zero when equal."""
    _check_prob(p, p_star)
    return math.log1p(p_star - p)


def dynamic_p_star(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput("dynamic p_star needs at least one score")
    return float(scores.max())


def rebalanced_pt(p: float, p_star: float, beta: float, y: int) -> float:
    _check_prob(p, p_star)
    if beta < 0:
        raise DomainError("beta must be non-negative")
    if y:
        return p / (1.0 + p_star - p) ** beta
    return 1.0 - p


def elementwise_loss(p, y, p_star, beta, alpha, gamma, epsilon=DEFAULT_EPSILON):
    """Vectorized loss and dL/dp for arrays of class slots.

    ``p_star`` is treated as a constant (no gradient flows through a dynamic
    maximum).  Scores are clamped to ``[epsilon, 1 - epsilon]``; the gradient is
    zero outside that interval and wherever the loss is clamped at zero.
    Returns ``(loss, grad)`` broadcast to a common shape.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    p_star = np.asarray(p_star, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    pc = np.clip(p, epsilon, 1.0 - epsilon)
    inside = (p >= epsilon) & (p <= 1.0 - epsilon)

    base = 1.0 + p_star - pc
    pt_pos = pc * base ** (-beta)
    pt = np.where(y, pt_pos, 1.0 - pc)
    dpt_dp = np.where(y, base ** (-beta - 1.0) * (base + beta * pc), -1.0)
    alpha_t = np.where(y, alpha, 1.0 - alpha)

    # p_t >= 1 only happens in the expected case where -log p_t <= 0, so the
    # max(0, .) clamp zeroes the loss there; the modulating base is floored
    # at zero to keep fractional gamma real.
    one_minus = np.maximum(1.0 - pt, 0.0)
    log_pt = np.log(pt)
    mod = one_minus ** gamma
    raw = -alpha_t * mod * log_pt
    active = (raw > 0) & (pt < 1.0)
    loss = np.where(active, raw, 0.0)

    safe_om = np.where(active, one_minus, 1.0)
    dmod = gamma * safe_om ** (gamma - 1.0) if gamma != 0 else 0.0
    dL_dpt = alpha_t * (dmod * log_pt - mod / pt)
    grad = np.where(active & inside, dL_dpt * dpt_dp, 0.0)
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite loss or gradient")
    return loss, grad


def rebalanced_loss(pred, cfg: LossConfig, p_star: float | None = None, beta: float | None = None):
    """Loss of a single class slot.

    ``pred`` is a ``(p, y)`` pair.  ``p_star`` defaults to the fixed value in
    ``cfg``; ``beta`` defaults to ``cfg.beta``.
    """
    p, y = pred
    _check_prob(p)
    if p_star is None:
        p_star = cfg.p_star_value
    _check_prob(p, p_star)
    b = cfg.beta if beta is None else beta
    loss, _ = elementwise_loss(p, y, p_star, b, cfg.alpha, cfg.gamma, cfg.epsilon)
    return float(loss)


def focal_loss(pred, cfg: LossConfig) -> float:
    return rebalanced_loss(pred, cfg, p_star=1.0, beta=0.0)


def binary_focal(p, y, alpha, gamma, epsilon=DEFAULT_EPSILON):
    """Textbook sigmoid focal loss, written independently of the rebalanced path."""
    p = np.clip(np.asarray(p, dtype=np.float64), epsilon, 1.0 - epsilon)
    y = np.asarray(y).astype(bool)
    pt = np.where(y, p, 1.0 - p)
    at = np.where(y, alpha, 1.0 - alpha)
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def loss_gradient(p: float, p_star: float, cfg: LossConfig, y: int, beta: float | None = None) -> float:
    """dL/dp by direct differentiation of the rebalanced loss."""
    _check_prob(p, p_star)
    b = cfg.beta if beta is None else beta
    _, grad = elementwise_loss(p, y, p_star, b, cfg.alpha, cfg.gamma, cfg.epsilon)
    return float(grad)


def closed_form_gradient(p: float, p_star: float, alpha_t: float, beta: float, gamma: float, y: int) -> float:
    """Piecewise closed-form dL/dp, kept as an independent cross-check."""
    q = 1.0 - p + p_star
    qb = q ** beta
    if y == 1:
        m = 1.0 - p / qb
        active = alpha_t * beta * m ** gamma * math.log(q) - alpha_t * m ** gamma * math.log(p)
        if active > 0 and m > 0:
            num = alpha_t * ((beta - 1.0) * p + p_star + 1.0) * m ** gamma * (
                gamma * p * math.log(p) + (1.0 - beta * gamma * math.log(q)) * p - qb
            )
            return num / (p * (p - p_star - 1.0) * (p - qb))
        return 0.0
    if alpha_t * p ** gamma * math.log(1.0 - p) < 0:
        return alpha_t * p ** gamma / (1.0 - p) - alpha_t * gamma * math.log(1.0 - p) * p ** (gamma - 1.0)
    return 0.0


def finite_diff_gradient(p: float, p_star: float, cfg: LossConfig, y: int, h: float = 1e-6,
                         beta: float | None = None) -> float:
    if not h > 0 or p - h <= 0.0 or p + h >= 1.0 or p + h == p:
        raise DomainError(f"step {h} unusable at p={p}")
    if p - h < cfg.epsilon or p + h > 1.0 - cfg.epsilon:
        raise DomainError("p +/- h leaves the clamp interval")
    up = rebalanced_loss((p + h, y), cfg, p_star, beta)
    dn = rebalanced_loss((p - h, y), cfg, p_star, beta)
    return (up - dn) / (2.0 * h)


GRADCHECK_P = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
GRADCHECK_P_STAR = (0.3, 0.5, 0.8, 1.0)
GRADCHECK_BETA = (0.0, 0.5, 1.0, 2.0, 5.0)
GRADCHECK_GAMMA = (0.0, 2.0)
GRADCHECK_ALPHA = (0.25, 1.0)


@dataclass(frozen=True)
class GradCheckPoint:
    p: float
    p_star: float
    beta: float
    gamma: float
    alpha: float
    y: int
    analytic: float
    numeric: float
    passed: bool


def gradient_check(ps=GRADCHECK_P, p_stars=GRADCHECK_P_STAR, betas=GRADCHECK_BETA, gammas=GRADCHECK_GAMMA,
                   alphas=GRADCHECK_ALPHA, labels=(0, 1), h: float = 1e-6, rtol: float = 1e-4,
                   margin: float = 1e-3, epsilon: float = DEFAULT_EPSILON, corrupt: float = 0.0) -> list:
    """Compare the analytic gradient with central differences over a grid.

    Points within ``margin`` of the clamp interval's ends, or of the loss's
    activation boundary ``p_t = 1``, are skipped since the loss has a kink
    there.  ``corrupt`` scales the analytic gradient by ``1 + corrupt`` and
    exists to prove the check can fail.
    """
    out = []
    for alpha in alphas:
        for gamma in gammas:
            for beta in betas:
                cfg = LossConfig(alpha=alpha, beta=beta, gamma=gamma, epsilon=epsilon)
                for p_star in p_stars:
                    for y in labels:
                        for p in ps:
                            if p < epsilon + margin or p > 1.0 - epsilon - margin:
                                continue
                            pt = rebalanced_pt(p, p_star, beta, y)
                            if abs(pt - 1.0) < margin:
                                continue
                            a = loss_gradient(p, p_star, cfg, y) * (1.0 + corrupt)
                            n = finite_diff_gradient(p, p_star, cfg, y, h)
                            ok = abs(a - n) <= rtol * max(abs(a), abs(n)) or abs(a - n) <= 1e-9
                            out.append(GradCheckPoint(p, p_star, beta, gamma, alpha, y, a, n, bool(ok)))
    return out


def write_gradcheck_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p", "p_star", "beta", "gamma", "alpha", "y", "analytic", "numeric", "pass"])
        for pt in points:
            writer.writerow([pt.p, pt.p_star, pt.beta, pt.gamma, pt.alpha, pt.y, repr(pt.analytic),
                             repr(pt.numeric), int(pt.passed)])


def anchor_p_star(scores: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Per-anchor reference level, shape ``(A, 1)``."""
    if cfg.p_star_mode == "dynamic":
        clipped = np.clip(scores, cfg.epsilon, 1.0 - cfg.epsilon)
        return clipped.max(axis=1, keepdims=True)
    return np.full((scores.shape[0], 1), cfg.p_star_value)


IGNORE = -2
BACKGROUND = -1


def group_loss(scores, labels, novel_classes, cfg: LossConfig, rebalance: bool = True, mix: bool = True):
    """λ-mixed objective over a batch of anchors, with its gradient w.r.t. ``scores``.

    scores: ``(A, C)`` sigmoid outputs.  labels: ``(A,)`` column index of the
    target class, ``BACKGROUND`` or ``IGNORE``.  novel_classes: ``(C,)`` bool,
    True where a positive anchor goes through the rebalanced path.

    Seen-positive and background anchors form L(s) (focal); novel-positive
    anchors form L(n) (rebalanced).  Each anchor's loss is summed over its
    class slots; each group sum is divided by the group's positive count.  A
    group holding only background is divided by the batch positive count.

    With ``rebalance=False`` everything is plain focal loss normalized by the
    number of positives, i.e. no grouping and no mixing.  ``mix=False`` keeps
    the rebalanced path for novel anchors but drops the grouping: every anchor
    is weighted by one over the batch positive count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    A, C = scores.shape
    valid = labels != IGNORE
    pos = labels >= 0
    y = np.zeros((A, C), dtype=bool)
    y[np.nonzero(pos)[0], labels[pos]] = True

    novel_classes = np.asarray(novel_classes, dtype=bool)
    novel_anchor = np.zeros(A, dtype=bool)
    novel_anchor[pos] = novel_classes[labels[pos]]
    if not rebalance:
        novel_anchor[:] = False

    beta = np.where(novel_anchor, cfg.beta, 0.0)[:, None]
    p_star = anchor_p_star(scores, cfg)
    loss, grad = elementwise_loss(scores, y, p_star, beta, cfg.alpha, cfg.gamma, cfg.epsilon)
    per_anchor = loss.sum(axis=1)

    seen_grp = valid & ~novel_anchor
    n_pos = int(pos.sum())
    n_seen_pos = int((pos & seen_grp).sum())
    n_novel = int(novel_anchor.sum())

    w = np.zeros(A)
    if not (rebalance and mix):
        w[valid] = 1.0 / max(1, n_pos)
    else:
        lam = cfg.lambda_mix
        if seen_grp.any():
            norm_s = n_seen_pos if n_seen_pos > 0 else max(1, n_pos)
            w[seen_grp] = lam / norm_s
        if n_novel:
            w[novel_anchor] = (1.0 - lam) / n_novel
    total = float(np.dot(w, per_anchor))
    return total, grad * w[:, None]


def anchor_group_loss(preds: Sequence[AnchorPrediction], cfg: LossConfig) -> float:
    """λ·L(s) + (1-λ)·L(n) over a list of anchor predictions."""
    if not preds:
        return 0.0
    scores = np.vstack([pr.scores for pr in preds])
    labels = np.array([int(np.argmax(pr.label)) if pr.label.any() else BACKGROUND for pr in preds])
    C = scores.shape[1]
    # route by the declared anchor group rather than by class identity
    novel = np.zeros(C, dtype=bool)
    total = 0.0
    groups = np.array([pr.group for pr in preds])
    if np.any((groups == "novel") & (labels < 0)):
        raise DomainError("a novel anchor must carry a positive label")
    seen_idx = np.nonzero(groups != "novel")[0]
    novel_idx = np.nonzero(groups == "novel")[0]
    lam = cfg.lambda_mix
    if seen_idx.size:
        ls, _ = group_loss(scores[seen_idx], labels[seen_idx], novel, cfg.replace(lambda_mix=1.0))
        if not (labels[seen_idx] >= 0).any():
            # background-only seen group: normalized by the batch positive count
            ls = ls / max(1, int((labels >= 0).sum()))
        total += lam * ls
    if novel_idx.size:
        ln, _ = group_loss(scores[novel_idx], labels[novel_idx], np.ones(C, dtype=bool),
                           cfg.replace(lambda_mix=0.0))
        total += (1.0 - lam) * ln
    return total


def loss_curve(cfg: LossConfig, p_star: float | None, samples: int, y: int = 1):
    """Rows of ``(p, loss, dL/dp)`` over a uniform grid on ``[eps, 1 - eps]``.

    ``p_star=None`` selects the dynamic reference for a two-class anchor whose
    competing score is ``1 - p`` (so p* = max(p, 1 - p)).
    """
    if samples < 2:
        raise DomainError("need at least two samples")
    ps = np.linspace(cfg.epsilon, 1.0 - cfg.epsilon, samples)
    if p_star is None:
        ref = np.maximum(ps, 1.0 - ps)
    else:
        ref = np.full_like(ps, p_star)
    loss, grad = elementwise_loss(ps, np.full(ps.shape, y), ref, cfg.beta, cfg.alpha, cfg.gamma, cfg.epsilon)
    return np.column_stack([ps, loss, grad])


def write_curve_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p", "loss", "grad"])
        for p, l, g in rows:
            writer.writerow([repr(float(p)), repr(float(l)), repr(float(g))])
