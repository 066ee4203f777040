"""Two-stage training: seen-class base training, then fine-tuning on all classes.

Only ``U`` and (in trainable-semantics mode) the vocabulary metric ``M`` are
optimized; class embeddings and vocabulary atoms stay fixed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .alignment import AlignmentModel, score_gradients
from .errors import ConfigError, NumericalError, TrainingDiverged
from .loss import IGNORE, LossConfig, group_loss
from .semantics import SEEN, SemanticMatrix


@dataclass(frozen=True)
class TrainConfig:
    epochs_base: int = 30
    epochs_ft: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_scenes: int = 1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # "rebalanced": lambda-mixed focal/rebalanced objective; "focal": plain focal baseline
    loss_scheme: str = "rebalanced"

    def __post_init__(self):
        if self.epochs_base < 1 or self.epochs_ft < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_scenes < 1:
            raise ConfigError("batch_scenes must be >= 1")
        if self.loss_scheme not in ("rebalanced", "focal"):
            raise ConfigError(f"unknown loss scheme {self.loss_scheme!r}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), "loss": self.loss, **changes})


@dataclass
class TrainReport:
    stage: str
    epoch_losses: list
    train_losses: list
    checksum: str
    wall_time: float

    def to_json(self, include_timing: bool = False) -> str:
        """JSON export.  Wall time is left out by default so reruns are byte-identical."""
        blob = asdict(self)
        if not include_timing:
            blob.pop("wall_time")
        return json.dumps(blob, indent=2, sort_keys=True) + "\n"


class Adam:
    """Adam over a dict of named numpy parameters, updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _stack(scenes, class_idx: np.ndarray, n_classes: int):
    """Features ``(N, A, n)`` and labels remapped to positions within ``class_idx``."""
    remap = np.full(n_classes, IGNORE, dtype=np.int64)
    remap[class_idx] = np.arange(len(class_idx))
    feats = np.stack([sc.anchor_features for sc in scenes])
    labels = np.stack([sc.labels for sc in scenes])
    pos = labels >= 0
    out = labels.copy()
    out[pos] = remap[labels[pos]]
    if np.any(out[pos] == IGNORE):
        raise ConfigError("training scenes contain classes outside the trained class set")
    return feats, out


def _objective(model, feats, labels, W, novel, loss_cfg, rebalance, mix):
    A = feats.shape[0] * feats.shape[1]
    F = feats.reshape(A, -1)
    scores = model.scores(F, W)
    return group_loss(scores, labels.reshape(A), novel, loss_cfg, rebalance, mix), F


def _fit(stage: str, model: AlignmentModel, scenes, semantics: SemanticMatrix, class_idx, novel,
         cfg: TrainConfig, epochs: int, loss_cfg: LossConfig, rebalance: bool, mix: bool = True):
    if not scenes:
        raise ConfigError(f"{stage}: no training scenes")
    start = time.perf_counter()
    model = model.copy()
    W = semantics.vectors[:, class_idx]
    feats, labels = _stack(scenes, class_idx, semantics.T)
    params = {"U": model.U}
    if model.semantics_mode == "trainable":
        params["metric"] = model.metric
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, len(stage)]))
    N, bs = len(scenes), cfg.batch_scenes

    def full_pass():
        total = 0.0
        for s in range(0, N, bs):
            (loss, _), _ = _objective(model, feats[s:s + bs], labels[s:s + bs], W, novel, loss_cfg, rebalance, mix)
            total += loss
        return total / len(range(0, N, bs))

    epoch_losses, train_losses = [], []
    for epoch in range(epochs):
        order = rng.permutation(N)
        running = []
        for s in range(0, N, bs):
            idx = order[s:s + bs]
            try:
                (loss, dP), F = _objective(model, feats[idx], labels[idx], W, novel, loss_cfg, rebalance, mix)
                if not np.isfinite(loss):
                    raise NumericalError("non-finite loss")
                grads = score_gradients(F, model, W, dP)
            except NumericalError as exc:
                raise TrainingDiverged(f"{stage}: {exc} at epoch {epoch}") from None
            opt.step(params, grads)
            running.append(loss)
        try:
            epoch_loss = full_pass()
        except NumericalError:
            epoch_loss = float("nan")
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"{stage}: non-finite loss after epoch {epoch}")
        epoch_losses.append(epoch_loss)
        train_losses.append(float(np.mean(running)))
    report = TrainReport(stage, epoch_losses, train_losses, model.checksum(), time.perf_counter() - start)
    return model, report


def train_base(scenes, model: AlignmentModel, semantics: SemanticMatrix, cfg: TrainConfig):
    """Focal-loss training on seen classes only.  Returns ``(model, report)``."""
    seen = semantics.indices(SEEN)
    novel = np.zeros(len(seen), dtype=bool)
    loss_cfg = cfg.loss.replace(beta=0.0)
    return _fit("base", model, scenes, semantics, seen, novel, cfg, cfg.epochs_base, loss_cfg, False)


def fine_tune(model: AlignmentModel, scenes, semantics: SemanticMatrix, cfg: TrainConfig):
    """Adapt to novel classes with every class's semantics in the decision space.

    With the rebalanced scheme seen and background anchors get focal loss and
    novel anchors the rebalanced loss, mixed by lambda; the focal scheme
    trains every anchor with plain focal loss.  Returns ``(model, report)``.
    """
    if semantics.F == 0:
        raise ConfigError("fine_tune needs few-shot classes; use zsd_self_tune when F = 0")
    all_idx = np.arange(semantics.T)
    rebalance = cfg.loss_scheme == "rebalanced"
    loss_cfg = cfg.loss if rebalance else cfg.loss.replace(beta=0.0)
    return _fit("fine_tune", model, scenes, semantics, all_idx, semantics.novel_mask(), cfg, cfg.epochs_ft,
                loss_cfg, rebalance)


def zsd_self_tune(model: AlignmentModel, scenes, semantics: SemanticMatrix, cfg: TrainConfig):
    """Second pass over base data with every seen class treated as few-shot.

    Scores the seen classes (the only ones with data) and routes every positive
    through the rebalanced path with dynamic p*.  There is no seen group left
    to mix with, so all anchors share the positive-count normalizer and
    ``beta=0`` gives ordinary focal epochs.  Returns ``(model, report)``.
    """
    if semantics.F != 0:
        raise ConfigError("zsd_self_tune is for the zero-shot setting (no few-shot classes)")
    seen = semantics.indices(SEEN)
    novel = np.ones(len(seen), dtype=bool)
    loss_cfg = cfg.loss.replace(p_star_mode="dynamic")
    return _fit("zsd_self_tune", model, scenes, semantics, seen, novel, cfg, cfg.epochs_ft, loss_cfg,
                True, mix=False)
