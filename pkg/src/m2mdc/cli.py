"""Command-line entry point: ``m2mdc <command> [options]``.

Every stage of the pipeline is available on its own so intermediate artifacts
can be inspected or swapped; ``pipeline`` chains them and ``report``
aggregates finished runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import List, Optional

from . import checkpoint
from .config import ConfigError, RunConfig
from .ir import GraphError, mobilenet_v2, resnet18, resnet34, tiny_resnet

logger = logging.getLogger("m2mdc")

THREADS_ENV = "M2MDC_NUM_THREADS"


def _limit_threads():
    """Pin BLAS threads when M2MDC_NUM_THREADS is set; results do not depend on it."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _parse_fractions(text: Optional[str]):
    """``0.5`` or ``layer2=0.5,layer3=0.25``."""
    if text is None:
        return None
    if "=" not in text:
        return float(text)
    out = {}
    for part in text.split(","):
        k, v = part.split("=", 1)
        out[k.strip()] = float(v)
    return out


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "ratio", None) is not None:
        cfg.pipeline.ratio = args.ratio
    if getattr(args, "epochs", None) is not None:
        cfg.pipeline.kd = dataclasses.replace(cfg.pipeline.kd, epochs=args.epochs)
    return cfg.validate()


def _train_config(cfg: RunConfig):
    return cfg.train_config()


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_arch(args) -> int:
    from .profiler import profile

    builders = {
        "resnet18": lambda: resnet18(args.classes),
        "resnet34": lambda: resnet34(args.classes),
        "mobilenet_v2": lambda: mobilenet_v2(args.classes),
        "tiny_resnet": lambda: tiny_resnet(num_classes=args.classes),
    }
    g = builders[args.model]()
    prof = profile(g, (1, 3, args.input_size, args.input_size))
    if args.json:
        _dump({"family": g.family, "blocks": [b.name for b in g.blocks()], "params": prof.total_params,
               "macs": prof.total_macs})
    else:
        print(g.dump())
        print(f"params {prof.total_params:,}  MACs {prof.total_macs:,}")
    return 0


def cmd_train_teacher(args) -> int:
    from .kd import train_teacher, write_log_csv

    cfg = load_config(args)
    tcfg = _train_config(cfg)
    if args.unfreeze:
        tcfg = dataclasses.replace(tcfg, unfreeze=args.unfreeze)
    train, test = cfg.dataset.load()
    init = checkpoint.load(args.init) if args.init else cfg.model.build(cfg.seeds()["init"])
    teacher, history = train_teacher(init, train, tcfg, test, epochs=args.teacher_epochs)
    os.makedirs(cfg.out, exist_ok=True)
    checkpoint.save(teacher, os.path.join(cfg.out, "teacher.ckpt"))
    write_log_csv(history, os.path.join(cfg.out, "teacher_log.csv"))
    print(f"teacher eval acc {history[-1]['eval_acc']:.2f}% -> {os.path.join(cfg.out, 'teacher.ckpt')}")
    return 0


def cmd_score_mi(args) -> int:
    from .mi import ProbeSet, score_blocks

    cfg = load_config(args)
    g = checkpoint.load(args.checkpoint)
    train, _ = cfg.dataset.load()
    p = cfg.pipeline
    probe = ProbeSet.draw(train.images, train.labels, cfg.seeds()["probe"], p.probe_batch, p.probe_max)
    table = score_blocks(g, probe, bins=p.bins, estimator=args.estimator)
    table.to_json(args.output)
    for name in table.ranking():
        print(f"{name}\t{table.block_scores[name]:.6f}")
    return 0


def cmd_plan_prune(args) -> int:
    from .mi import ScoreTable
    from .planner import plan_block_prune

    g = checkpoint.load(args.checkpoint)
    plan = plan_block_prune(g, ScoreTable.from_json(args.scores), args.ratio)
    plan.to_json(args.output)
    _dump({"pruned": plan.pruned, "keep_cfg": plan.keep.to_dict()})
    return 0


def cmd_apply_prune(args) -> int:
    from .planner import PrunePlan, apply_plan

    g = apply_plan(checkpoint.load(args.checkpoint), PrunePlan.from_json(args.plan))
    checkpoint.save(g, args.output)
    print(g.dump())
    return 0


def _slice(args, planes: bool) -> int:
    from .slicer import apply_mids, apply_planes, build_uniform_slicespec

    g = checkpoint.load(args.checkpoint)
    f = _parse_fractions(args.fractions)
    if planes:
        spec = build_uniform_slicespec(g, f, 1.0)
        spec.mids = {}
        out = apply_planes(g, spec)
    else:
        spec = build_uniform_slicespec(g, 1.0, f)
        spec.planes = {}
        out = apply_mids(g, spec)
    checkpoint.save(out, args.output)
    if args.spec:
        spec.to_json(args.spec)
    print(out.dump())
    return 0


def cmd_slice_planes(args) -> int:
    return _slice(args, planes=True)


def cmd_slice_mid(args) -> int:
    return _slice(args, planes=False)


def cmd_bn_recal(args) -> int:
    from .kd import bn_recalibrate, evaluate, recal_loader

    cfg = load_config(args)
    tcfg = cfg.pipeline.train
    train, test = cfg.dataset.load()
    g = checkpoint.load(args.checkpoint)
    before = evaluate(g, test, tcfg.eval_batch)
    out = bn_recalibrate(g, recal_loader(train, tcfg.train_batch), args.batches or tcfg.bn_recal_batches)
    after = evaluate(out, test, tcfg.eval_batch)
    checkpoint.save(out, args.output)
    print(f"acc {before['acc']:.2f}% -> {after['acc']:.2f}% after recalibration")
    return 0


def cmd_kd(args) -> int:
    from .kd import kd_phase, write_log_csv

    cfg = load_config(args)
    train, test = cfg.dataset.load()
    student, teacher = checkpoint.load(args.student), checkpoint.load(args.teacher)
    feat_idx = json.loads(args.feature_index) if args.feature_index else None
    out, rows = kd_phase(student, teacher, train, cfg.pipeline.kd, _train_config(cfg), test, tag=args.tag,
                         feature_index=feat_idx)
    checkpoint.save(out, args.output)
    if args.log:
        write_log_csv(rows, args.log)
    for r in rows:
        print(f"epoch {r['epoch']}: ce {r['ce']:.4f} acc {r['eval_acc']:.2f}% (alpha {r['alpha']:.3f}, beta {r['beta']:.3f})")
    return 0


def cmd_profile(args) -> int:
    from .profiler import profile, profile_diff

    shape = tuple(int(v) for v in args.input_shape.split(","))
    prof = profile(checkpoint.load(args.checkpoint), shape)
    if args.against:
        base = profile(checkpoint.load(args.against), shape)
        _dump(profile_diff(base, prof))
    elif args.json:
        _dump(prof.to_dict())
    else:
        print(prof.table(flops=args.flops))
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = load_config(args)
    if args.fractions is not None:
        f = _parse_fractions(args.fractions)
        cfg.pipeline.plane_fractions = f
        cfg.pipeline.mid_fractions = f
        cfg.validate()
    summary = run_pipeline(cfg, resume=args.resume, log=print)
    models = summary["models"]
    for k in ("teacher", "block_kd", "inner_slice"):
        print(f"{k:12s} acc {models[k]['acc']:6.2f}%  params {models[k]['params']:,}  MACs {models[k]['macs']:,}")
    return 0


def cmd_report(args) -> int:
    from .pipeline import format_report, write_report

    report = write_report(args.runs, args.output)
    print(format_report(report))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p, out: bool = True):
    p.add_argument("--config", help="run configuration JSON (or a run manifest)")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="m2mdc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("arch", help="build a reference architecture and print its profile")
    p.add_argument("model", choices=["resnet18", "resnet34", "mobilenet_v2", "tiny_resnet"])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_arch)

    p = sub.add_parser("train-teacher", help="fit the teacher with cross-entropy")
    _common(p)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--unfreeze", choices=["all", "final_third"])
    p.add_argument("--teacher-epochs", type=int)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("score-mi", help="score blocks by label mutual information")
    _common(p, out=False)
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", default="scores.json")
    p.add_argument("--estimator", default="quantile_mi", choices=["quantile_mi", "bn_gamma", "l1_norm"])
    p.set_defaults(func=cmd_score_mi)

    p = sub.add_parser("plan-prune", help="pick the lowest-scoring free blocks to remove")
    p.add_argument("checkpoint")
    p.add_argument("--scores", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("-o", "--output", default="plan.json")
    p.set_defaults(func=cmd_plan_prune)

    p = sub.add_parser("apply-prune", help="rebuild a graph without the planned blocks")
    p.add_argument("checkpoint")
    p.add_argument("--plan", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_apply_prune)

    for name, fn, helptext in (
        ("slice-planes", cmd_slice_planes, "co-slice residual planes per stage"),
        ("slice-mid", cmd_slice_mid, "slice block-internal mid channels"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("--fractions", required=True, help="keep fraction, e.g. 0.5 or layer2=0.5,layer3=0.25")
        p.add_argument("-o", "--output", required=True)
        p.add_argument("--spec", help="also write the concrete slice spec JSON here")
        p.set_defaults(func=fn)

    p = sub.add_parser("bn-recal", help="refresh BN running statistics")
    _common(p, out=False)
    p.add_argument("checkpoint")
    p.add_argument("--batches", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_bn_recal)

    p = sub.add_parser("kd", help="staged KD repair of a student against a teacher")
    _common(p, out=False)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tag", default="kd")
    p.add_argument("--feature-index", help="JSON list of teacher feature channels kept by the student")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_kd)

    p = sub.add_parser("profile", help="parameter and MAC counts")
    p.add_argument("checkpoint")
    p.add_argument("--input-shape", default="1,3,224,224")
    p.add_argument("--against", help="report reductions relative to this checkpoint")
    p.add_argument("--flops", action="store_true", help="show FLOPs (2 x MACs) alongside MACs")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)
    p.add_argument("--ratio", type=float)
    p.add_argument("--fractions")
    p.add_argument("--epochs", type=int, help="KD epochs per repair phase")
    p.add_argument("--resume", action="store_true", help="reuse finished stages found in --out")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="aggregate finished runs into mean +/- std tables")
    p.add_argument("runs", nargs="+", help="run directories holding summary.json")
    p.add_argument("-o", "--output", default="report")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (ConfigError, GraphError, ValueError, FileNotFoundError) as exc:
        print(f"m2mdc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
