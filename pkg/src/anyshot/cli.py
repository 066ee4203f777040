"""``anyshot`` command line.

Every command shares ``--config``, ``--seed`` and ``--out``.  Single-seed
commands use ``--seed`` or else the first configured seed; ``sweep`` uses all
configured seeds unless ``--seed`` narrows it.  Outputs go under ``--out``::

    bundle/                      synthetic dataset (synth)
    base_model.json              base checkpoint (train-base)
    finetuned_model.json         second-stage checkpoint (fine-tune)
    eval_<stage>_<mode>.json/.csv, detections_<stage>_<mode>.csv   (eval)
    gradcheck.csv, curves/*.csv, sweep.csv

Exit status is 0 on success, 1 when a check fails and 2 on errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import experiment
from .alignment import AlignmentModel
from .config import dump_config, load_config
from .detector import write_detections_csv
from .errors import AnyShotError, ConfigError
from .evaluation import MODES, evaluate, mode_classes, scene_detections, write_report
from .loss import gradient_check, loss_curve, write_curve_csv, write_gradcheck_csv
from .synthdata import check_split_hygiene, load_bundle, save_bundle
from .trainer import TrainConfig, fine_tune, train_base, zsd_self_tune

BASE_CKPT = "base_model.json"
FT_CKPT = "finetuned_model.json"
CURVE_BETAS = (0.0, 1.0, 2.0, 5.0)


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _context(args):
    cfg = load_config(args.config, out_dir=args.out)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _train_cfg(cfg, seed) -> TrainConfig:
    return cfg.train.replace(seed=int(seed))


def _load_bundle(out: Path):
    if not (out / "bundle" / "world.json").exists():
        raise ConfigError(f"no bundle under {out}; run `anyshot synth` first")
    return load_bundle(out / "bundle")


def _write_train_report(out: Path, name: str, report) -> None:
    (out / name).write_text(report.to_json())
    losses = report.epoch_losses
    print(f"{report.stage}: {len(losses)} epochs, loss {losses[0]:.4f} -> {losses[-1]:.4f} "
          f"({report.wall_time:.1f}s), checksum {report.checksum[:12]}")


def cmd_synth(args) -> int:
    cfg, out = _context(args)
    seed = cfg.seeds[0]
    bundle = experiment.build_bundle(cfg, seed)
    check_split_hygiene(bundle)
    save_bundle(bundle, out / "bundle")
    sem = bundle.world.semantics
    few_boxes = sum(1 for sc in bundle.d_ft for _, c in sc.boxes if sem.partition[c] == "few_shot")
    print(f"setting {bundle.setting}: S={sem.S} F={sem.F} U={sem.U} k={bundle.shots} seed={seed}")
    print(f"d_tr {len(bundle.d_tr)} scenes, d_ft {len(bundle.d_ft)} scenes ({few_boxes} few-shot boxes), "
          f"d_ts {len(bundle.d_ts)} scenes")
    return 0


def cmd_train_base(args) -> int:
    cfg, out = _context(args)
    bundle = _load_bundle(out)
    seed = cfg.seeds[0]
    world = bundle.world
    init = AlignmentModel.initialize(world.spec.n, world.vocabulary, cfg.semantics_mode, seed)
    model, report = train_base(bundle.d_tr, init, world.semantics, _train_cfg(cfg, seed))
    model.save(out / BASE_CKPT)
    _write_train_report(out, "base_report.json", report)
    return 0


def cmd_fine_tune(args) -> int:
    cfg, out = _context(args)
    ckpt = out / BASE_CKPT
    if not ckpt.exists():
        raise ConfigError(f"no base checkpoint at {ckpt}; run `anyshot train-base` first")
    bundle = _load_bundle(out)
    seed = cfg.seeds[0]
    sem = bundle.world.semantics
    model = AlignmentModel.load(ckpt)
    tc = _train_cfg(cfg, seed)
    if sem.F == 0:
        print("no few-shot classes: running the zero-shot self-tuning pass on d_tr")
        model, report = zsd_self_tune(model, bundle.d_tr, sem, tc)
    else:
        model, report = fine_tune(model, bundle.d_ft, sem, tc)
    model.save(out / FT_CKPT)
    _write_train_report(out, "finetune_report.json", report)
    return 0


def cmd_eval(args) -> int:
    cfg, out = _context(args)
    stage = args.stage
    if stage is None:
        stage = "finetuned" if (out / FT_CKPT).exists() else "base"
    ckpt = out / (FT_CKPT if stage == "finetuned" else BASE_CKPT)
    if not ckpt.exists():
        raise ConfigError(f"no {stage} checkpoint at {ckpt}")
    bundle = _load_bundle(out)
    model = AlignmentModel.load(ckpt)
    sem = bundle.world.semantics
    report = evaluate(model, bundle.d_ts, sem, args.mode, cfg.thresholds)
    stem = f"{stage}_{args.mode}"
    write_report(report, out / f"eval_{stem}.json", out / f"eval_{stem}.csv")

    idx = mode_classes(sem, args.mode)
    rows = []
    for sc in bundle.d_ts:
        boxes, cls, scores = scene_detections(sc, model, sem, idx, cfg.thresholds)
        rows.extend((sc.scene_id, sem.class_names[c], s, *b) for b, c, s in zip(boxes, cls, scores))
    write_detections_csv(out / f"detections_{stem}.csv", rows)

    summary = report.summary()
    parts = [f"{k}={summary[k]}" for k in ("map_seen", "map_unseen", "map_few", "hm", "recall_at_100")
             if summary[k] is not None]
    print(f"{args.mode} ({stage}): " + " ".join(parts))
    return 0


def cmd_grad_check(args) -> int:
    cfg, out = _context(args)
    points = gradient_check(epsilon=cfg.loss.epsilon, corrupt=0.01 if args.corrupt else 0.0)
    write_gradcheck_csv(out / "gradcheck.csv", points)
    print(f"{'beta':>5} {'gamma':>5} {'alpha':>5} {'points':>6} {'failed':>6}")
    keys = sorted({(p.beta, p.gamma, p.alpha) for p in points})
    for key in keys:
        sel = [p for p in points if (p.beta, p.gamma, p.alpha) == key]
        print(f"{key[0]:5g} {key[1]:5g} {key[2]:5g} {len(sel):6d} {sum(not p.passed for p in sel):6d}")
    failed = sum(not p.passed for p in points)
    print(f"{len(points) - failed}/{len(points)} points agree with central differences at rtol 1e-4")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_loss_curve(args) -> int:
    cfg, out = _context(args)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    # the curves use the cross-entropy form (alpha_t = 1, gamma = 0) so beta's effect is visible alone
    ce = cfg.loss.replace(alpha=1.0, gamma=0.0)
    written = []
    for beta in CURVE_BETAS:
        name = curves / f"loss_beta{beta:g}_pstar1.csv"
        write_curve_csv(name, loss_curve(ce.replace(beta=beta), 1.0, args.samples))
        written.append(name)
    beta = cfg.loss.beta
    name = curves / f"loss_beta{beta:g}_pstar0.5.csv"
    write_curve_csv(name, loss_curve(ce.replace(beta=beta), 0.5, args.samples))
    written.append(name)
    name = curves / f"loss_beta{beta:g}_dynamic.csv"
    write_curve_csv(name, loss_curve(ce.replace(beta=beta), None, args.samples))
    written.append(name)
    for path in written:
        print(path)
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _context(args)
    result = experiment.sweep(cfg, args.betas, args.lambdas)
    text = result.to_csv()
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_config(args) -> int:
    cfg, _ = _context(args)
    print(dump_config(cfg), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--out", help="output directory (default: out_dir from the config)")

    parser = argparse.ArgumentParser(prog="anyshot", description="Any-shot detection on a synthetic benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset bundle").set_defaults(func=cmd_synth)
    sub.add_parser("train-base", parents=[common], help="base training on seen classes").set_defaults(
        func=cmd_train_base)
    sub.add_parser("fine-tune", parents=[common], help="second training stage").set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test scenes")
    p.add_argument("--mode", choices=MODES, default="GASD")
    p.add_argument("--stage", choices=("base", "finetuned"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference loss gradient")
    p.add_argument("--corrupt", action="store_true", help="perturb the analytic gradient (negative control)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("loss-curve", parents=[common], help="write loss/gradient curves as CSV")
    p.add_argument("--samples", type=int, default=201)
    p.set_defaults(func=cmd_loss_curve)

    p = sub.add_parser("sweep", parents=[common], help="beta x lambda grid over the configured seeds")
    p.add_argument("--betas", type=_floats, default=[0.5, 1.0, 2.0, 5.0])
    p.add_argument("--lambdas", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 0.9, 1.0])
    p.set_defaults(func=cmd_sweep)

    sub.add_parser("show-config", parents=[common], help="print the effective configuration").set_defaults(
        func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except AnyShotError as exc:
        print(f"anyshot {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if code == 0 and args.command in ("sweep",):
        print(f"done in {time.perf_counter() - start:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
