"""Class semantic embeddings: loading, normalization, partitioning and the
vocabulary transform used to adapt word vectors to visual features.

Word-vector files are plain text, one token per line followed by ``d``
whitespace-separated decimals.  A leading ``<count> <dim>`` header (word2vec
text format) is skipped.  Class-list files hold one ``<name> <tag>`` pair per
line with ``tag`` in ``seen|few|unseen``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, MissingEmbedding, ZeroNormError

SEEN, FEW_SHOT, UNSEEN = "seen", "few_shot", "unseen"
GROUPS = (SEEN, FEW_SHOT, UNSEEN)
_TAG_ALIASES = {"seen": SEEN, "few": FEW_SHOT, "few_shot": FEW_SHOT, "unseen": UNSEEN}

NORM_TOL = 1e-9


def l2_normalize(v):
    """Return ``v / ||v||``; raises ZeroNormError for a zero vector."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise ZeroNormError("cannot normalize a zero (or non-finite) vector")
    return v / norm


def _normalize_columns(mat: np.ndarray) -> np.ndarray:
    return np.column_stack([l2_normalize(mat[:, j]) for j in range(mat.shape[1])])


@dataclass(frozen=True)
class SemanticMatrix:
    """Per-class embeddings stored as columns of a ``d x T`` matrix.

    Columns are unit-norm.  ``partition[j]`` tags class ``j`` as seen,
    few-shot or unseen; column order is the caller's class order.
    """

    class_names: tuple
    vectors: np.ndarray
    partition: tuple

    def __post_init__(self):
        names = tuple(self.class_names)
        part = tuple(_TAG_ALIASES.get(t, t) for t in self.partition)
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            raise DimensionError(f"vectors must be 2-D, got shape {vec.shape}")
        if vec.shape[1] != len(names) or len(part) != len(names):
            raise DimensionError("class_names, partition and vector columns disagree in length")
        if len(set(names)) != len(names):
            raise ConfigError("class names must be unique")
        bad = [t for t in part if t not in GROUPS]
        if bad:
            raise ConfigError(f"unknown partition tags: {sorted(set(bad))}")
        if part.count(SEEN) < 1:
            raise ConfigError("at least one seen class is required")
        norms = np.linalg.norm(vec, axis=0)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            vec = _normalize_columns(vec)
        vec.setflags(write=False)
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "vectors", vec)

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    @property
    def T(self) -> int:
        return self.vectors.shape[1]

    @property
    def S(self) -> int:
        return self.partition.count(SEEN)

    @property
    def F(self) -> int:
        return self.partition.count(FEW_SHOT)

    @property
    def U(self) -> int:
        return self.partition.count(UNSEEN)

    @property
    def N(self) -> int:
        return self.F + self.U

    def indices(self, *groups: str) -> np.ndarray:
        """Column indices of the classes belonging to any of ``groups``."""
        groups = {_TAG_ALIASES.get(g, g) for g in groups}
        if groups & {"novel"}:
            groups = (groups - {"novel"}) | {FEW_SHOT, UNSEEN}
        if groups & {"all"}:
            groups = set(GROUPS)
        return np.array([j for j, t in enumerate(self.partition) if t in groups], dtype=np.int64)

    def novel_mask(self) -> np.ndarray:
        return np.array([t != SEEN for t in self.partition])

    def columns(self, selection=None) -> np.ndarray:
        """Embedding columns for ``selection`` (indices, group names, or None for all)."""
        return self.vectors[:, resolve_selection(self, selection)]

    def subset(self, selection) -> "SemanticMatrix":
        idx = resolve_selection(self, selection)
        return SemanticMatrix(
            tuple(self.class_names[i] for i in idx),
            self.vectors[:, idx],
            tuple(self.partition[i] for i in idx),
        )


def resolve_selection(semantics: SemanticMatrix, selection) -> np.ndarray:
    """Turn a class selection into an index array.

    Accepts None (all classes), a group name or list of group names
    (``seen``, ``few_shot``/``few``, ``unseen``, ``novel``, ``all``), or an
    iterable of integer column indices.
    """
    if selection is None:
        return np.arange(semantics.T)
    if isinstance(selection, str):
        selection = [selection]
    sel = list(selection)
    if sel and all(isinstance(s, str) for s in sel):
        idx = semantics.indices(*sel)
    else:
        idx = np.asarray(sel, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= semantics.T):
            raise DimensionError("class index out of range")
    return idx


@dataclass(frozen=True)
class Vocabulary:
    """Vocabulary atoms, one L2-normalized word vector per row (``v x d``)."""

    atoms: np.ndarray
    tokens: tuple = field(default=())

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise DimensionError("vocabulary must be a non-empty v x d matrix")
        norms = np.linalg.norm(atoms, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            atoms = np.vstack([l2_normalize(r) for r in atoms])
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def v(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def random(cls, v: int, d: int, rng: np.random.Generator) -> "Vocabulary":
        atoms = rng.standard_normal((v, d))
        return cls(atoms / np.linalg.norm(atoms, axis=1, keepdims=True))


@dataclass(frozen=True)
class MetricParams:
    metric: np.ndarray

    def __post_init__(self):
        m = np.array(self.metric, dtype=np.float64)
        if m.ndim != 2:
            raise DimensionError("metric must be a d x v matrix")
        if not np.all(np.isfinite(m)):
            raise DimensionError("metric has non-finite entries")
        object.__setattr__(self, "metric", m)


def read_word_vectors(path) -> dict:
    """Parse a word-vector text file into ``{token: vector}``."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.split()
            if not parts:
                continue
            if lineno == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
    return table


def _lookup(table: dict, name: str, expected_dim: int) -> np.ndarray:
    if name in table:
        vec = table[name]
        if vec.shape[0] != expected_dim:
            raise DimensionError(f"{name!r} has dimension {vec.shape[0]}, expected {expected_dim}")
        return vec
    # multi-word names: average of constituent token vectors
    tokens = [t for t in re.split(r"[\s_\-]+", name) if t]
    if len(tokens) < 2:
        raise MissingEmbedding(name)
    parts = []
    for tok in tokens:
        if tok not in table:
            raise MissingEmbedding(f"{name!r} (token {tok!r})")
        vec = table[tok]
        if vec.shape[0] != expected_dim:
            raise DimensionError(f"{tok!r} has dimension {vec.shape[0]}, expected {expected_dim}")
        parts.append(l2_normalize(vec))
    return np.mean(parts, axis=0)


def load_word_vectors(path, class_names: Sequence[str], expected_dim: int,
                      partition: Sequence[str] | None = None) -> SemanticMatrix:
    """Build a SemanticMatrix from a word-vector file, columns in ``class_names`` order.

    ``partition`` defaults to all-seen.
    """
    if not Path(path).exists():
        raise FileNotFoundError(path)
    table = read_word_vectors(path)
    cols = [l2_normalize(_lookup(table, name, expected_dim)) for name in class_names]
    if partition is None:
        partition = [SEEN] * len(class_names)
    return SemanticMatrix(tuple(class_names), np.column_stack(cols), tuple(partition))


def load_class_list(path) -> tuple[list, list]:
    names, tags = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, _, tag = line.rpartition(" ")
            name, tag = name.strip(), tag.strip()
            if not name or tag not in _TAG_ALIASES:
                raise ConfigError(f"bad class-list line: {line!r}")
            names.append(name)
            tags.append(_TAG_ALIASES[tag])
    return names, tags


def load_vocabulary(path, expected_dim: int, tokens: Iterable[str] | None = None) -> Vocabulary:
    table = read_word_vectors(path)
    keys = list(tokens) if tokens is not None else list(table)
    rows = []
    for tok in keys:
        if tok not in table:
            raise MissingEmbedding(tok)
        if table[tok].shape[0] != expected_dim:
            raise DimensionError(f"{tok!r} has dimension {table[tok].shape[0]}, expected {expected_dim}")
        rows.append(l2_normalize(table[tok]))
    return Vocabulary(np.vstack(rows), tuple(keys))


def _as_columns(W) -> np.ndarray:
    return W.vectors if isinstance(W, SemanticMatrix) else np.asarray(W, dtype=np.float64)


def transform_semantics(W, M, D) -> np.ndarray:
    """Adapted prototypes ``tanh(w^T M D)^T`` for every class column ``w`` of ``W``.

    ``W`` is ``d x C``, ``M`` is ``d x v`` and ``D`` is ``v x d``; the result is
    ``d x C`` with entries in (-1, 1).
    """
    W = _as_columns(W)
    M = M.metric if isinstance(M, MetricParams) else np.asarray(M, dtype=np.float64)
    D = D.atoms if isinstance(D, Vocabulary) else np.asarray(D, dtype=np.float64)
    if W.ndim != 2 or M.ndim != 2 or D.ndim != 2:
        raise DimensionError("W, M and D must all be matrices")
    d = W.shape[0]
    if M.shape[0] != d or D.shape != (M.shape[1], d):
        raise DimensionError(f"incompatible shapes W{W.shape} M{M.shape} D{D.shape}")
    return np.tanh(W.T @ M @ D).T


def fixed_semantics(W) -> np.ndarray:
    return _as_columns(W)
