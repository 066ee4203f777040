"""Synthetic any-shot detection world.

Classes get unit-norm embeddings grouped into families.  Seen classes share
their own families; every unseen class sits in the family of a few-shot class,
so knowledge about novel concepts reaches the unseen ones only through the
few-shot data and whatever the seen families share.  A hidden linear map takes a
class embedding to most of the mean visual feature of that class (an
optional per-class component is invisible to the embedding); positive anchors
draw Gaussian features around that mean and every other anchor draws
background features.  Scenes live on the unit square with one anchor per
grid cell.

On-disk layout of a bundle directory::

    world.json   world spec, class names/partition/embeddings, hidden
                 projection, background mean, vocabulary atoms
    d_tr.jsonl   one scene per line (also d_ft.jsonl when F > 0, d_ts.jsonl)

A scene line is a JSON object with ``scene_id``, ``boxes`` (list of
``[x_min, y_min, x_max, y_max, class]``), ``labels`` (per-anchor matcher
output) and ``features`` (per-anchor feature rows, anchors in row-major grid
order).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import BoundingBox, match_anchors
from .errors import ConfigError
from .semantics import FEW_SHOT, SEEN, UNSEEN, SemanticMatrix, Vocabulary

WORLD_FORMAT = "anyshot-world/1"


@dataclass(frozen=True)
class WorldSpec:
    S: int = 13
    F: int = 2
    U: int = 2
    n: int = 32
    d: int = 48
    v: int = 64
    feature_scale: float = 4.0
    noise_sigma: float = 0.5
    background_sigma: float = 0.5
    # last feature channel is a noise-free constant, giving the bilinear
    # scorer a semantic bias path
    bias_channel: float = 4.0
    # strength of the per-class visual component that the embedding does not explain
    class_idiosyncrasy: float = 1.0
    grid: int = 8
    clusters: int = 5
    cluster_spread: float = 0.6

    def __post_init__(self):
        if self.S < 1 or self.F < 0 or self.U < 0:
            raise ConfigError(f"invalid class counts S={self.S} F={self.F} U={self.U}")
        if self.d < 2 or self.n < 2:
            raise ConfigError("n and d must be at least 2")
        if self.v < 1 or self.grid < 1 or self.clusters < 1:
            raise ConfigError("v, grid and clusters must be positive")
        if self.bias_channel < 0:
            raise ConfigError("bias_channel must be non-negative")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be positive")
        if min(self.noise_sigma, self.background_sigma, self.cluster_spread, self.class_idiosyncrasy) < 0:
            raise ConfigError("noise levels must be non-negative")

    @property
    def T(self) -> int:
        return self.S + self.F + self.U


@dataclass(frozen=True)
class SplitSpec:
    n_train: int = 160
    n_test: int = 80
    max_objects: int = 4
    # seen boxes per seen class in d_ft; None means the same k as the few-shot classes
    ft_seen_shots: int | None = None

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1 or self.max_objects < 2:
            raise ConfigError("split sizes must be positive and max_objects >= 2")
        if self.ft_seen_shots is not None and self.ft_seen_shots < 0:
            raise ConfigError("ft_seen_shots must be non-negative")


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    semantics: SemanticMatrix
    hidden_projection: np.ndarray
    background_mean: np.ndarray
    vocabulary: Vocabulary
    seed: int
    class_offsets: np.ndarray | None = None
    noise_sigma: float = field(init=False)
    scene_grid: int = field(init=False)

    def __post_init__(self):
        self.noise_sigma = self.spec.noise_sigma
        self.scene_grid = self.spec.grid
        if self.class_offsets is None:
            self.class_offsets = np.zeros((self.spec.n, self.semantics.T))
        self.class_offsets = np.asarray(self.class_offsets, dtype=np.float64)
        if self.class_offsets.shape != (self.spec.n, self.semantics.T):
            raise ConfigError(f"class_offsets must be {(self.spec.n, self.semantics.T)}")
        if not np.all(np.isfinite(self.hidden_projection)):
            raise ConfigError("hidden projection must be finite")

    @property
    def anchor_boxes(self) -> np.ndarray:
        return grid_anchors(self.spec.grid)

    @property
    def feature_offset(self) -> np.ndarray:
        """Noise-free component shared by every anchor (the constant channel)."""
        off = np.zeros(self.spec.n)
        off[-1] = self.spec.bias_channel
        return off

    def class_means(self, classes) -> np.ndarray:
        """Noise-free features of ``classes``, one row each."""
        classes = np.asarray(classes, dtype=np.int64)
        sem = self.hidden_projection @ self.semantics.vectors[:, classes]
        return (sem + self.class_offsets[:, classes]).T + self.feature_offset

    def class_mean(self, c: int) -> np.ndarray:
        return self.class_means([c])[0]


@dataclass
class Scene:
    scene_id: str
    boxes: list
    anchor_features: np.ndarray
    anchor_boxes: np.ndarray
    labels: np.ndarray

    @property
    def anchor_geometry(self) -> list:
        return [BoundingBox(*map(float, b)) for b in self.anchor_boxes]

    def classes_present(self) -> set:
        return {c for _, c in self.boxes}


@dataclass
class DatasetBundle:
    world: SyntheticWorld
    d_tr: list
    d_ft: list
    d_ts: list
    shots: int
    split: SplitSpec = field(default_factory=SplitSpec)

    @property
    def setting(self) -> str:
        F, U = self.world.semantics.F, self.world.semantics.U
        if F > 0 and U > 0:
            return "ASD"
        if F > 0:
            return "FSD"
        if U > 0:
            return "ZSD"
        return "traditional"


def grid_anchors(grid: int) -> np.ndarray:
    """Row-major ``(grid*grid, 4)`` array of cell boxes covering the unit square."""
    edges = np.arange(grid + 1) / grid
    rows = []
    for r in range(grid):
        for c in range(grid):
            rows.append((edges[c], edges[r], edges[c + 1], edges[r + 1]))
    return np.array(rows)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def class_families(spec: WorldSpec) -> np.ndarray:
    """Family index of every class.

    Seen classes are spread round-robin over ``spec.clusters`` families.  Each
    few-shot class founds a new family and the unseen classes join those
    round-robin, so every unseen class has a few-shot sibling; without few-shot
    classes each unseen class gets a family of its own.
    """
    fam = np.empty(spec.T, dtype=np.int64)
    fam[:spec.S] = np.arange(spec.S) % spec.clusters
    fam[spec.S:spec.S + spec.F] = spec.clusters + np.arange(spec.F)
    u = np.arange(spec.U)
    fam[spec.S + spec.F:] = spec.clusters + (u % spec.F if spec.F else u)
    return fam


def _class_embeddings(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    fam = class_families(spec)
    centers = rng.standard_normal((spec.d, int(fam.max()) + 1))
    centers /= np.linalg.norm(centers, axis=0)
    vecs = np.empty((spec.d, spec.T))
    for j in range(spec.T):
        raw = centers[:, fam[j]] + spec.cluster_spread * rng.standard_normal(spec.d) / np.sqrt(spec.d)
        vecs[:, j] = raw / np.linalg.norm(raw)
    return vecs


def generate_world(spec: WorldSpec | None = None, seed: int = 0, **overrides) -> SyntheticWorld:
    """Sample class embeddings, the hidden projection and the vocabulary.

    Keyword overrides are applied to ``spec`` (e.g. ``S=4, noise_sigma=0``).
    """
    spec = spec or WorldSpec()
    if overrides:
        try:
            spec = WorldSpec(**{**asdict(spec), **overrides})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    rng = _rng(seed, 1)
    vectors = _class_embeddings(spec, rng)
    names = tuple(f"class{j:02d}" for j in range(spec.T))
    partition = (SEEN,) * spec.S + (FEW_SHOT,) * spec.F + (UNSEEN,) * spec.U
    semantics = SemanticMatrix(names, vectors, partition)
    projection = spec.feature_scale * rng.standard_normal((spec.n, spec.d)) / np.sqrt(spec.n)
    background = spec.feature_scale * rng.standard_normal(spec.n) / np.sqrt(spec.n)
    if spec.bias_channel:
        projection[-1] = 0.0
        background[-1] = 0.0
    vocab = Vocabulary.random(spec.v, spec.d, _rng(seed, 2))
    offsets = spec.class_idiosyncrasy * spec.feature_scale * _rng(seed, 5).standard_normal((spec.n, spec.T))
    offsets /= np.sqrt(spec.n)
    if spec.bias_channel:
        offsets[-1] = 0.0
    return SyntheticWorld(spec, semantics, projection, background, vocab, seed, offsets)


def _place_box(cell: int, grid: int, rng: np.random.Generator) -> BoundingBox:
    r, c = divmod(cell, grid)
    size = 1.0 / grid
    scale = rng.uniform(0.85, 1.0)
    cx = (c + 0.5 + rng.uniform(-0.1, 0.1)) * size
    cy = (r + 0.5 + rng.uniform(-0.1, 0.1)) * size
    half = 0.5 * scale * size
    x0, y0 = max(0.0, cx - half), max(0.0, cy - half)
    x1, y1 = min(1.0, cx + half), min(1.0, cy + half)
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def scene_from_objects(world: SyntheticWorld, boxes: list, rng: np.random.Generator,
                       scene_id: str = "scene") -> Scene:
    """Render anchor features for a list of ``(BoundingBox, class_id)`` objects."""
    anchors = world.anchor_boxes
    labels = match_anchors(anchors, boxes)
    A, n = len(anchors), world.spec.n
    noise = rng.standard_normal((A, n))
    if world.spec.bias_channel:
        noise[:, -1] = 0.0
    feats = world.background_mean[None, :] + world.feature_offset + world.spec.background_sigma * noise
    pos = labels >= 0
    if pos.any():
        feats[pos] = world.class_means(labels[pos]) + world.spec.noise_sigma * noise[pos]
    return Scene(scene_id, list(boxes), feats, anchors, labels)


def generate_scene(world: SyntheticWorld, object_count: int, seed: int, classes=None,
                   scene_id: str | None = None) -> Scene:
    """Scene with ``object_count`` objects in distinct cells.

    Object classes are drawn uniformly from ``classes`` (default: seen).
    """
    if object_count < 0:
        raise ConfigError("object_count must be non-negative")
    grid = world.spec.grid
    if object_count > grid * grid:
        raise ConfigError("more objects than grid cells")
    rng = _rng(world.seed, 3, seed)
    if classes is None:
        classes = world.semantics.indices(SEEN)
    classes = np.asarray(classes, dtype=np.int64)
    if object_count and len(classes) == 0:
        raise ConfigError("no classes to draw objects from")
    chosen = rng.choice(classes, size=object_count) if object_count else classes[:0]
    cells = rng.choice(grid * grid, size=object_count, replace=False)
    boxes = [(_place_box(int(cell), grid, rng), int(c)) for cell, c in zip(cells, chosen)]
    return scene_from_objects(world, boxes, rng, scene_id or f"s{seed}")


def _scene_with_classes(world: SyntheticWorld, class_list, seed: int, scene_id: str) -> Scene:
    rng = _rng(world.seed, 4, seed)
    grid = world.spec.grid
    cells = rng.choice(grid * grid, size=len(class_list), replace=False)
    boxes = [(_place_box(int(cell), grid, rng), int(c)) for cell, c in zip(cells, class_list)]
    return scene_from_objects(world, boxes, rng, scene_id)


def assemble_bundle(world: SyntheticWorld, split: SplitSpec | None = None, shots: int = 5,
                    seed: int | None = None) -> DatasetBundle:
    """Build base-training, fine-tuning and test scene sets.

    d_tr holds seen objects only.  d_ft is a k-shot set: exactly ``shots``
    boxes of every few-shot class (one per scene, padded with seen objects)
    and ``split.ft_seen_shots`` boxes of every seen class, the leftovers
    packed into seen-only scenes.  Every
    d_ts scene contains one novel object (when novel classes exist) plus
    seen objects.  Train and test scenes do not depend on ``shots``.
    """
    split = split or SplitSpec()
    sem = world.semantics
    if shots < 0 or (sem.F > 0 and shots < 1):
        raise ConfigError("few-shot classes need shots >= 1")
    seed = world.seed if seed is None else seed
    seen = sem.indices(SEEN)
    few = sem.indices(FEW_SHOT)
    novel = sem.indices("novel")

    rng = _rng(seed, 10)
    d_tr = []
    for i in range(split.n_train):
        count = int(rng.integers(1, split.max_objects + 1))
        d_tr.append(_scene_with_classes(world, rng.choice(seen, size=count), int(rng.integers(2**31)),
                                        f"tr{i:04d}"))

    rng = _rng(seed, 11, shots)
    d_ft = []
    if sem.F > 0:
        seen_k = shots if split.ft_seen_shots is None else split.ft_seen_shots
        pool = [int(c) for c in seen for _ in range(seen_k)]
        rng.shuffle(pool)
        groups = [[int(c)] for c in few for _ in range(shots)]
        rng.shuffle(groups)
        # fill the few-shot scenes with seen boxes first, then spill into seen-only scenes
        for g in groups:
            take = min(len(pool), int(rng.integers(0, split.max_objects)))
            g.extend(pool[:take])
            pool = pool[take:]
        while pool:
            groups.append(pool[:split.max_objects])
            pool = pool[split.max_objects:]
        for i, classes in enumerate(groups):
            d_ft.append(_scene_with_classes(world, classes, int(rng.integers(2**31)), f"ft{i:04d}"))

    rng = _rng(seed, 12)
    d_ts = []
    for i in range(split.n_test):
        extra = int(rng.integers(1, split.max_objects))
        classes = [int(s) for s in rng.choice(seen, size=extra)]
        if novel.size:
            classes = [int(novel[i % novel.size])] + classes
        d_ts.append(_scene_with_classes(world, classes, int(rng.integers(2**31)), f"ts{i:04d}"))
    return DatasetBundle(world, d_tr, d_ft, d_ts, shots, split)


def check_split_hygiene(bundle: DatasetBundle) -> None:
    """Raise ConfigError when a bundle violates the split invariants."""
    sem = bundle.world.semantics
    seen = set(sem.indices(SEEN).tolist())
    few = set(sem.indices(FEW_SHOT).tolist())
    unseen = set(sem.indices(UNSEEN).tolist())
    for sc in bundle.d_tr:
        if not sc.classes_present() <= seen:
            raise ConfigError(f"{sc.scene_id}: novel instance in base training data")
    counts = {c: 0 for c in few}
    for sc in bundle.d_ft:
        present = sc.classes_present()
        if present & unseen:
            raise ConfigError(f"{sc.scene_id}: unseen instance in fine-tuning data")
        for _, c in sc.boxes:
            if c in counts:
                counts[c] += 1
    bad = {c: k for c, k in counts.items() if k != bundle.shots}
    if bad:
        raise ConfigError(f"few-shot classes with wrong box counts: {bad}")


# --- serialization -----------------------------------------------------------

def _scene_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "boxes": [[*map(float, b.as_tuple()), int(c)] for b, c in scene.boxes],
        "labels": [int(x) for x in scene.labels],
        "features": [[float(x) for x in row] for row in scene.anchor_features],
    }


def _scene_from_record(rec: dict, anchors: np.ndarray) -> Scene:
    boxes = [(BoundingBox(*row[:4]), int(row[4])) for row in rec["boxes"]]
    return Scene(rec["scene_id"], boxes, np.array(rec["features"], dtype=np.float64).reshape(len(anchors), -1),
                 anchors, np.array(rec["labels"], dtype=np.int64))


def world_to_dict(world: SyntheticWorld) -> dict:
    sem = world.semantics
    return {
        "format": WORLD_FORMAT,
        "seed": world.seed,
        "spec": asdict(world.spec),
        "class_names": list(sem.class_names),
        "partition": list(sem.partition),
        "semantics": [[float(x) for x in row] for row in sem.vectors.T],
        "hidden_projection": [[float(x) for x in row] for row in world.hidden_projection],
        "background_mean": [float(x) for x in world.background_mean],
        "class_offsets": [[float(x) for x in row] for row in world.class_offsets.T],
        "vocabulary": [[float(x) for x in row] for row in world.vocabulary.atoms],
    }


def world_from_dict(blob: dict) -> SyntheticWorld:
    if blob.get("format") != WORLD_FORMAT:
        raise ConfigError(f"unsupported world format {blob.get('format')!r}")
    spec = WorldSpec(**blob["spec"])
    sem = SemanticMatrix(tuple(blob["class_names"]), np.array(blob["semantics"]).T, tuple(blob["partition"]))
    return SyntheticWorld(spec, sem, np.array(blob["hidden_projection"]), np.array(blob["background_mean"]),
                          Vocabulary(np.array(blob["vocabulary"])), int(blob["seed"]),
                          np.array(blob["class_offsets"]).T)


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = world_to_dict(bundle.world)
    meta["shots"] = bundle.shots
    meta["split"] = asdict(bundle.split)
    (out / "world.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    splits = {"d_tr": bundle.d_tr, "d_ft": bundle.d_ft, "d_ts": bundle.d_ts}
    for name, scenes in splits.items():
        path = out / f"{name}.jsonl"
        if name == "d_ft" and not scenes:
            if path.exists():
                path.unlink()
            continue
        with open(path, "w") as fh:
            for sc in scenes:
                fh.write(json.dumps(_scene_record(sc), sort_keys=True) + "\n")
    return out


def load_bundle(in_dir) -> DatasetBundle:
    src = Path(in_dir)
    meta_path = src / "world.json"
    if not meta_path.exists():
        raise ConfigError(f"no bundle at {src}")
    meta = json.loads(meta_path.read_text())
    world = world_from_dict(meta)
    anchors = world.anchor_boxes
    splits = {}
    for name in ("d_tr", "d_ft", "d_ts"):
        path = src / f"{name}.jsonl"
        scenes = []
        if path.exists():
            with open(path) as fh:
                scenes = [_scene_from_record(json.loads(line), anchors) for line in fh if line.strip()]
        splits[name] = scenes
    return DatasetBundle(world, splits["d_tr"], splits["d_ft"], splits["d_ts"], int(meta["shots"]),
                         SplitSpec(**meta["split"]))
