"""End-to-end pipelines on the synthetic benchmark.

Every function takes an :class:`ExperimentConfig` and a seed and is
deterministic in both.  ``method_comparison`` trains the full method and a
fixed-semantics/focal baseline side by side; ``zsd_comparison`` measures the
zero-shot self-tuning pass; ``sweep`` fills a beta x lambda grid.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentModel
from .config import ExperimentConfig
from .errors import ConfigError
from .evaluation import EvalReport, evaluate
from .synthdata import DatasetBundle, assemble_bundle, generate_world
from .trainer import TrainConfig, fine_tune, train_base, zsd_self_tune

NOVEL_MODE = {"ASD": "ASD", "FSD": "FSD", "ZSD": "ZSD"}


def build_bundle(cfg: ExperimentConfig, seed: int, shots: int | None = None) -> DatasetBundle:
    world = generate_world(cfg.world, seed=seed)
    k = cfg.shots if shots is None else shots
    if world.semantics.F == 0:
        k = 0
    return assemble_bundle(world, cfg.split, shots=k)


def train_config(cfg: ExperimentConfig, seed: int, **changes) -> TrainConfig:
    return cfg.train.replace(seed=int(seed), **changes)


def base_model(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, semantics_mode: str | None = None):
    """Initialize and base-train one model.  Returns ``(model, report)``."""
    world = bundle.world
    mode = semantics_mode or cfg.semantics_mode
    init = AlignmentModel.initialize(world.spec.n, world.vocabulary, mode, seed)
    return train_base(bundle.d_tr, init, world.semantics, train_config(cfg, seed))


def second_stage(cfg: ExperimentConfig, model: AlignmentModel, bundle: DatasetBundle, seed: int,
                 **train_changes):
    """Fine-tune on d_ft, or run the zero-shot self-tuning pass when there are no few-shot classes."""
    tc = train_config(cfg, seed, **train_changes)
    sem = bundle.world.semantics
    if sem.F == 0:
        return zsd_self_tune(model, bundle.d_tr, sem, tc)
    return fine_tune(model, bundle.d_ft, sem, tc)


def novel_mode(bundle: DatasetBundle) -> str:
    setting = bundle.setting
    if setting not in NOVEL_MODE:
        raise ConfigError("the split has no novel classes to evaluate")
    return NOVEL_MODE[setting]


def generalized_mode(bundle: DatasetBundle) -> str:
    return "G" + novel_mode(bundle)


@dataclass
class MethodRun:
    """Metrics of one seed of the method-vs-baseline comparison."""

    seed: int
    metrics: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict, repr=False)


def _record(run: MethodRun, tag: str, report: EvalReport) -> None:
    run.reports[tag] = report
    for key in ("map_seen", "map_unseen", "map_few", "map_novel", "hm", "recall_at_100"):
        value = getattr(report, key)
        if value is not None:
            run.metrics[f"{tag}.{key}"] = float(value)


def method_comparison(cfg: ExperimentConfig, seed: int, k_low: int = 1, lambda_high: float = 1.0) -> MethodRun:
    """Full method vs. baseline on one world, plus the shot and lambda variants.

    * ``ours``: trainable semantics, rebalanced lambda-mixed fine-tuning.
    * ``baseline``: fixed semantics, plain focal fine-tuning.
    * ``ours_k{k_low}``: the full method fine-tuned on a ``k_low``-shot set.
    * ``ours_lambda{lambda_high}``: the full method with ``lambda = lambda_high``.

    Each is evaluated in the generalized and the non-generalized novel mode;
    ``*_base`` entries hold the base models' generalized reports.
    """
    bundle = build_bundle(cfg, seed)
    if bundle.world.semantics.F == 0:
        raise ConfigError("method_comparison needs few-shot classes")
    sem = bundle.world.semantics
    th = cfg.thresholds
    gmode, nmode = generalized_mode(bundle), novel_mode(bundle)
    run = MethodRun(seed)

    def score(tag, model, scenes):
        _record(run, f"{tag}.{gmode}", evaluate(model, scenes, sem, gmode, th))
        _record(run, f"{tag}.{nmode}", evaluate(model, scenes, sem, nmode, th))

    ours0, _ = base_model(cfg, bundle, seed, "trainable")
    score("ours_base", ours0, bundle.d_ts)
    ours, _ = second_stage(cfg, ours0, bundle, seed, loss_scheme="rebalanced")
    score("ours", ours, bundle.d_ts)

    base0, _ = base_model(cfg, bundle, seed, "fixed")
    score("baseline_base", base0, bundle.d_ts)
    baseline, _ = second_stage(cfg, base0, bundle, seed, loss_scheme="focal")
    score("baseline", baseline, bundle.d_ts)

    low = build_bundle(cfg, seed, shots=k_low)
    m, _ = second_stage(cfg, ours0, low, seed, loss_scheme="rebalanced")
    score(f"ours_k{k_low}", m, low.d_ts)

    loss = cfg.loss.replace(lambda_mix=lambda_high)
    m, _ = second_stage(cfg, ours0, bundle, seed, loss_scheme="rebalanced", loss=loss)
    score(f"ours_lambda{lambda_high:g}", m, bundle.d_ts)
    return run


def zsd_comparison(cfg: ExperimentConfig, seed: int) -> MethodRun:
    """Base model vs. self-tuned model on a split without few-shot classes."""
    if cfg.world.F != 0 or cfg.world.U == 0:
        raise ConfigError("zsd_comparison needs F = 0 and U > 0")
    bundle = build_bundle(cfg, seed)
    sem = bundle.world.semantics
    run = MethodRun(seed)
    m0, _ = base_model(cfg, bundle, seed)
    m1, _ = zsd_self_tune(m0, bundle.d_tr, sem, train_config(cfg, seed))
    for tag, m in (("base", m0), ("self_tuned", m1)):
        for mode in ("ZSD", "GZSD"):
            _record(run, f"{tag}.{mode}", evaluate(m, bundle.d_ts, sem, mode, cfg.thresholds))
    return run


def median_metrics(runs) -> dict:
    keys = sorted(set.intersection(*(set(r.metrics) for r in runs)))
    return {k: float(np.median([r.metrics[k] for r in runs])) for k in keys}


@dataclass
class SweepResult:
    betas: tuple
    lambdas: tuple
    metric: str
    # cell value: mean over seeds of the metric, as a fraction
    table: dict

    def to_csv(self) -> str:
        """Rows are beta values, columns lambda values, cells in percent."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta\\lambda"] + [f"{lam:g}" for lam in self.lambdas])
        for b in self.betas:
            w.writerow([f"{b:g}"] + [f"{100.0 * self.table[(b, lam)]:.2f}" for lam in self.lambdas])
        return buf.getvalue()


def sweep(cfg: ExperimentConfig, betas, lambdas, metric: str = "map_novel") -> SweepResult:
    """Fine-tune the base model of every seed for each (beta, lambda) cell.

    The cell value is ``metric`` of the non-generalized novel mode, averaged
    over ``cfg.seeds``.
    """
    betas, lambdas = tuple(float(b) for b in betas), tuple(float(x) for x in lambdas)
    if not betas or not lambdas:
        raise ConfigError("sweep needs at least one beta and one lambda")
    if cfg.world.F == 0:
        raise ConfigError("sweep needs few-shot classes")
    cells = {(b, lam): [] for b in betas for lam in lambdas}
    for seed in cfg.seeds:
        bundle = build_bundle(cfg, seed)
        mode = novel_mode(bundle)
        m0, _ = base_model(cfg, bundle, seed)
        for b in betas:
            for lam in lambdas:
                loss = cfg.loss.replace(beta=b, lambda_mix=lam)
                m, _ = second_stage(cfg, m0, bundle, seed, loss_scheme="rebalanced", loss=loss)
                value = getattr(evaluate(m, bundle.d_ts, bundle.world.semantics, mode, cfg.thresholds), metric)
                cells[(b, lam)].append(0.0 if value is None else float(value))
    table = {k: float(np.mean(v)) for k, v in cells.items()}
    return SweepResult(betas, lambdas, metric, table)


def single_seed(cfg: ExperimentConfig) -> int:
    if len(cfg.seeds) != 1:
        raise ConfigError("this command runs one seed; pass --seed")
    return cfg.seeds[0]


__all__ = [
    "MethodRun", "SweepResult", "base_model", "build_bundle", "generalized_mode", "median_metrics",
    "method_comparison", "novel_mode", "second_stage", "single_seed", "sweep", "train_config",
    "zsd_comparison",
]
