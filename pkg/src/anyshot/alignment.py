"""Visual-semantic alignment scorer ``p = sigmoid(f^T U g(W))`` and its gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericalError
from .semantics import SemanticMatrix, Vocabulary, resolve_selection

CHECKPOINT_FORMAT = "anyshot-alignment/1"


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AlignmentModel:
    """Trainable state: bridge ``U`` (n x d) and vocabulary metric ``M`` (d x v).

    The vocabulary ``D`` (v x d) is carried along but never updated.  In
    ``fixed`` semantics mode ``g(W) = W`` and ``M`` is unused.
    """

    U: np.ndarray
    metric: np.ndarray
    vocab: np.ndarray
    semantics_mode: str = "trainable"

    def __post_init__(self):
        self.U = np.array(self.U, dtype=np.float64)
        self.metric = np.array(self.metric, dtype=np.float64)
        vocab = self.vocab.atoms if isinstance(self.vocab, Vocabulary) else self.vocab
        self.vocab = np.array(vocab, dtype=np.float64)
        if self.semantics_mode not in ("fixed", "trainable"):
            raise DimensionError(f"unknown semantics mode {self.semantics_mode!r}")
        n, d = self.U.shape
        if self.metric.shape[0] != d or self.vocab.shape != (self.metric.shape[1], d):
            raise DimensionError(
                f"inconsistent shapes U{self.U.shape} M{self.metric.shape} D{self.vocab.shape}"
            )
        for arr in (self.U, self.metric, self.vocab):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("model parameters must be finite")

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def v(self) -> int:
        return self.vocab.shape[0]

    @classmethod
    def initialize(cls, n: int, vocab: Vocabulary | np.ndarray, mode: str = "trainable",
                   seed: int = 0) -> "AlignmentModel":
        atoms = vocab.atoms if isinstance(vocab, Vocabulary) else np.asarray(vocab)
        v, d = atoms.shape
        rng = np.random.default_rng(seed)
        U = rng.uniform(-1.0 / np.sqrt(n), 1.0 / np.sqrt(n), size=(n, d))
        M = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, v))
        return cls(U, M, atoms, mode)

    def copy(self) -> "AlignmentModel":
        return AlignmentModel(self.U.copy(), self.metric.copy(), self.vocab.copy(), self.semantics_mode)

    def shapes(self) -> dict:
        return {"U": self.U.shape, "metric": self.metric.shape, "vocab": self.vocab.shape}

    def prototypes(self, W: np.ndarray) -> np.ndarray:
        """g(W) for a ``d x C`` block of class columns."""
        if W.shape[0] != self.d:
            raise DimensionError(f"semantic dim {W.shape[0]} != model dim {self.d}")
        if self.semantics_mode == "fixed":
            return W
        return np.tanh(W.T @ self.metric @ self.vocab).T

    def scores(self, features: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Sigmoid scores for a batch of features ``(A, n)`` against class columns ``W``."""
        features = np.atleast_2d(features)
        if features.shape[1] != self.n:
            raise DimensionError(f"feature length {features.shape[1]} != n={self.n}")
        return sigmoid(features @ self.U @ self.prototypes(W))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.U, self.metric):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "n": self.n,
            "d": self.d,
            "v": self.v,
            "semantics_mode": self.semantics_mode,
            "U": [float(x) for x in self.U.ravel()],
            "metric": [float(x) for x in self.metric.ravel()],
            "vocab": [float(x) for x in self.vocab.ravel()],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "AlignmentModel":
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise DimensionError(f"unsupported checkpoint format {blob.get('format')!r}")
        n, d, v = blob["n"], blob["d"], blob["v"]
        return cls(
            np.array(blob["U"]).reshape(n, d),
            np.array(blob["metric"]).reshape(d, v),
            np.array(blob["vocab"]).reshape(v, d),
            blob["semantics_mode"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AlignmentModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def score(feature, model: AlignmentModel, semantics: SemanticMatrix, class_subset=None) -> np.ndarray:
    """Scores of one feature vector against the selected classes."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise DimensionError("score expects a single feature vector")
    idx = resolve_selection(semantics, class_subset)
    if idx.size == 0:
        raise DimensionError("empty class subset")
    return model.scores(feature[None, :], semantics.vectors[:, idx])[0]


def score_gradients(features, model: AlignmentModel, W: np.ndarray, upstream) -> dict:
    """Back-propagate ``dL/dp`` through sigmoid, the bilinear form and ``tanh(wMD)``.

    ``features`` is ``(A, n)`` (a single vector is accepted), ``W`` the ``d x C``
    class columns that produced the scores and ``upstream`` is ``dL/dp`` of shape
    ``(A, C)``.  Returns gradients for ``U``, ``metric`` and ``features``.
    """
    single = np.ndim(features) == 1
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    G = model.prototypes(W)
    if up.shape != (F.shape[0], G.shape[1]):
        raise DimensionError(f"upstream shape {up.shape} != {(F.shape[0], G.shape[1])}")
    FU = F @ model.U
    p = sigmoid(FU @ G)
    dS = up * p * (1.0 - p)
    dG = FU.T @ dS
    grads = {
        "U": F.T @ (dS @ G.T),
        "features": dS @ (model.U @ G).T,
    }
    if model.semantics_mode == "trainable":
        dZ = dG.T * (1.0 - (G.T) ** 2)
        grads["metric"] = W @ dZ @ model.vocab.T
    else:
        grads["metric"] = np.zeros_like(model.metric)
    if single:
        grads["features"] = grads["features"][0]
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {key}")
    return grads
