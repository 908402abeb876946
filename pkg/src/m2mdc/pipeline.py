"""End-to-end two-scale compression run and multi-seed reporting.

Stages (each writes its artifacts before the next starts, so a rerun with
``resume=True`` picks up where a crashed run stopped):

    teacher -> MI scores -> prune plan -> block-pruned student
    -> [recal + KD] -> planes co-slice -> [recal + KD] -> mid slice -> [recal + KD]
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from typing import Callable, Dict, List, Optional

import numpy as np

from . import checkpoint
from .config import RunConfig
from .ir import ArchGraph, check_residual_invariants
from .kd import TeacherCache, bn_recalibrate, evaluate, kd_phase, recal_loader, train_teacher, write_log_csv
from .mi import ProbeSet, score_blocks
from .planner import apply_plan, plan_block_prune
from .profiler import profile, profile_diff
from .slicer import apply_mids, apply_planes, build_uniform_slicespec

logger = logging.getLogger(__name__)

COLUMNS = ("teacher", "block_kd", "inner_slice")
COLUMN_TITLES = {"teacher": "Teacher", "block_kd": "Block-KD", "inner_slice": "Inner-slice"}


def _write_json(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _profile_input(train) -> tuple:
    return (1,) + tuple(train.images.shape[1:])


def _model_card(graph: ArchGraph, metrics: dict, shape) -> dict:
    prof = profile(graph, shape)
    return {"acc": metrics["acc"], "ce": metrics["ce"], "params": prof.total_params, "macs": prof.total_macs}


def _removes_channels(graph: ArchGraph, spec) -> bool:
    from .slicer import stage_planes

    if any(len(k) < stage_planes(graph, s) for s, k in spec.planes.items()):
        return True
    return any(len(k) < graph.block(b).params["conv1.weight"].shape[0] for b, k in spec.mids.items())


class PipelineRun:
    def __init__(self, cfg: RunConfig, out_dir: Optional[str] = None, resume: bool = True, log: Callable = logger.info):
        self.cfg = cfg
        self.out = out_dir or cfg.out
        self.resume = resume
        self.log = log
        self.seeds = cfg.seeds()
        self.timings: Dict[str, float] = {}
        self._recomputed = False
        os.makedirs(os.path.join(self.out, "records"), exist_ok=True)
        self.train, self.test = cfg.dataset.load()
        self.tcfg = cfg.train_config()
        self.shape = _profile_input(self.train)

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def _done(self, record: str, *artifacts: str) -> bool:
        """True when a resumable stage's artifacts exist and nothing upstream was redone."""
        done = (
            self.resume
            and not self._recomputed
            and all(os.path.exists(self.path(a)) for a in (f"records/{record}.json",) + artifacts)
        )
        if not done:
            self._recomputed = True
        return done

    # -- stages -------------------------------------------------------------

    def teacher(self) -> ArchGraph:
        if self._done("teacher", "teacher.ckpt"):
            return checkpoint.load(self.path("teacher.ckpt"))
        if self.cfg.pipeline.teacher_checkpoint:
            teacher = checkpoint.load(self.cfg.pipeline.teacher_checkpoint)
            init_hash = checkpoint.content_hash(teacher)
            history = []
        else:
            init = self.cfg.model.build(self.seeds["init"])
            init_hash = checkpoint.content_hash(init)
            teacher, history = train_teacher(init, self.train, self.tcfg, self.test)
        self._write_manifest(init_hash)
        write_log_csv(history, self.path("teacher_log.csv"))
        metrics = evaluate(teacher, self.test, self.tcfg.eval_batch)
        checkpoint.save(teacher, self.path("teacher.ckpt"))
        _write_json({"history": history, "eval": metrics}, self.path("records/teacher.json"))
        self.log(f"teacher: eval acc {metrics['acc']:.2f}%")
        return teacher

    def _write_manifest(self, init_hash: str) -> None:
        manifest = {
            "config": self.cfg.to_dict(),
            "seeds": self.seeds,
            "initial_checkpoint_sha256": init_hash,
            "probe_split": "train",
            "bn": {"momentum": 0.1, "eps": 1e-5},
        }
        _write_json(manifest, self.path("manifest.json"))

    def scores(self, teacher: ArchGraph):
        from .mi import ScoreTable

        if self._done("scores", "scores.json"):
            return ScoreTable.from_json(self.path("scores.json"))
        p = self.cfg.pipeline
        probe = ProbeSet.draw(self.train.images, self.train.labels, self.seeds["probe"], p.probe_batch, p.probe_max)
        table = score_blocks(teacher, probe, bins=p.bins)
        table.to_json(self.path("scores.json"))
        _write_json({"probe_samples": len(probe)}, self.path("records/scores.json"))
        self.log("block MI (ascending): " + ", ".join(f"{n}={table.block_scores[n]:.4f}" for n in table.ranking()))
        return table

    def prune(self, teacher: ArchGraph, table) -> ArchGraph:
        from .planner import PrunePlan

        if self._done("plan", "plan.json", "student_pruned.ckpt"):
            return checkpoint.load(self.path("student_pruned.ckpt"))
        plan = plan_block_prune(teacher, table, self.cfg.pipeline.ratio)
        plan.to_json(self.path("plan.json"))
        student = apply_plan(teacher, plan)
        checkpoint.save(student, self.path("student_pruned.ckpt"))
        _write_json({"pruned": plan.pruned, "keep_cfg": plan.keep.to_dict()}, self.path("records/plan.json"))
        self.log(f"pruned {plan.pruned}; keep_cfg {plan.keep.to_dict()}")
        return student

    def repair(self, name: str, raw: ArchGraph, teacher: ArchGraph, cache: TeacherCache, feature_index=None,
               edited: bool = True) -> ArchGraph:
        """BN recalibration then one staged KD phase; an empty edit needs no repair."""
        ckpt = f"student_{name}.ckpt"
        if self._done(name, ckpt):
            return checkpoint.load(self.path(ckpt))
        problems = check_residual_invariants(raw)
        if problems:
            raise RuntimeError(f"{name}: illegal student: {problems}")
        pre = evaluate(raw, self.test, self.tcfg.eval_batch)
        if not edited:
            checkpoint.save(raw, self.path(ckpt))
            record = {"skipped": True, "pre_recal": pre, "post_surgery": pre, "epochs": [], "epoch1_acc": None,
                      "final": pre, "params": profile(raw, self.shape).total_params}
            _write_json(record, self.path(f"records/{name}.json"))
            self.log(f"{name}: nothing removed, repair skipped")
            return raw
        recal = bn_recalibrate(raw, recal_loader(self.train, self.tcfg.train_batch), self.tcfg.bn_recal_batches)
        post = evaluate(recal, self.test, self.tcfg.eval_batch)
        student, rows = kd_phase(recal, teacher, self.train, self.cfg.pipeline.kd, self.tcfg, self.test, tag=name, cache=cache,
                               feature_index=feature_index)
        write_log_csv(rows, self.path(f"kd_{name}.csv"))
        checkpoint.save(student, self.path(ckpt))
        record = {
            "skipped": False,
            "pre_recal": pre,
            "post_surgery": post,
            "epochs": rows,
            "epoch1_acc": rows[0]["eval_acc"],
            "final": {"acc": rows[-1]["eval_acc"], "ce": rows[-1]["eval_ce"]},
            "params": profile(student, self.shape).total_params,
        }
        _write_json(record, self.path(f"records/{name}.json"))
        self.log(
            f"{name}: pre-recal {pre['acc']:.2f}% -> post-surgery {post['acc']:.2f}% -> "
            f"KD epoch 1 {rows[0]['eval_acc']:.2f}% -> final {rows[-1]['eval_acc']:.2f}%"
        )
        return student

    def run(self) -> dict:
        t0 = time.perf_counter()
        teacher = self.teacher()
        self.timings["teacher"] = time.perf_counter() - t0
        cache = TeacherCache(teacher, self.train)
        table = self.scores(teacher)
        pruned = self.prune(teacher, table)
        t = time.perf_counter()
        edited = len(pruned.blocks()) < len(teacher.blocks())
        block_kd = self.repair("block", pruned, teacher, cache, edited=edited)
        self.timings["block"] = time.perf_counter() - t

        p = self.cfg.pipeline
        t = time.perf_counter()
        spec = build_uniform_slicespec(block_kd, p.plane_fractions, 1.0)
        spec.mids = {}
        spec.to_json(self.path("slicespec_planes.json"))
        # channels of the final stage that survive, in teacher coordinates
        feat_idx = spec.planes.get(list(block_kd.stages)[-1])
        planes = self.repair("planes", apply_planes(block_kd, spec), teacher, cache, feat_idx,
                             edited=_removes_channels(block_kd, spec))
        self.timings["planes"] = time.perf_counter() - t

        t = time.perf_counter()
        spec = build_uniform_slicespec(planes, 1.0, p.mid_fractions)
        spec.planes = {}
        spec.to_json(self.path("slicespec_mids.json"))
        inner = self.repair("mids", apply_mids(planes, spec), teacher, cache, feat_idx,
                            edited=_removes_channels(planes, spec))
        self.timings["mids"] = time.perf_counter() - t

        summary = self.summarize(teacher, block_kd, inner)
        self.timings["total"] = time.perf_counter() - t0
        _write_json(self.timings, self.path("timings.json"))
        return summary

    def summarize(self, teacher, block_kd, inner) -> dict:
        cards = {
            "teacher": _model_card(teacher, evaluate(teacher, self.test, self.tcfg.eval_batch), self.shape),
            "block_kd": _model_card(block_kd, evaluate(block_kd, self.test, self.tcfg.eval_batch), self.shape),
            "inner_slice": _model_card(inner, evaluate(inner, self.test, self.tcfg.eval_batch), self.shape),
        }
        tp = profile(teacher, self.shape)
        phases = {}
        for name in ("block", "planes", "mids"):
            rec = _read_json(self.path(f"records/{name}.json"))
            phases[name] = {
                "skipped": rec["skipped"],
                "pre_recal": rec["pre_recal"],
                "post_surgery": rec["post_surgery"],
                "epoch1_acc": rec["epoch1_acc"],
                "final": rec["final"],
                "epochs": rec["epochs"],
            }
        summary = {
            "seed": self.cfg.seed,
            "input_shape": list(self.shape),
            "models": cards,
            "reductions": {
                "block_kd": profile_diff(tp, profile(block_kd, self.shape)),
                "inner_slice": profile_diff(tp, profile(inner, self.shape)),
            },
            "phases": phases,
            "plan": _read_json(self.path("plan.json")),
        }
        _write_json(summary, self.path("summary.json"))
        with open(self.path("summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "acc", "ce", "params", "macs"])
            for k in COLUMNS:
                c = cards[k]
                w.writerow([k, c["acc"], c["ce"], c["params"], c["macs"]])
        return summary


def run_pipeline(cfg: RunConfig, out_dir: Optional[str] = None, resume: bool = True, log: Callable = logger.info) -> dict:
    return PipelineRun(cfg, out_dir, resume, log).run()


# ---------------------------------------------------------------------------
# multi-seed report
# ---------------------------------------------------------------------------


def mean_std(values) -> tuple:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def fmt_mean_std(values, digits: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def build_report(summaries: List[dict]) -> dict:
    rows = []
    for s in summaries:
        rows.append({"seed": s["seed"], **{k: s["models"][k]["acc"] for k in COLUMNS}})
    rows.sort(key=lambda r: r["seed"])
    agg = {}
    for k in COLUMNS:
        accs = [r[k] for r in rows]
        m, sd = mean_std(accs)
        agg[k] = {
            "acc_mean": m,
            "acc_std": sd,
            "params_mean": float(np.mean([s["models"][k]["params"] for s in summaries])),
            "macs_mean": float(np.mean([s["models"][k]["macs"] for s in summaries])),
        }
    t, i = agg["teacher"], agg["inner_slice"]
    return {
        "per_seed": rows,
        "aggregate": agg,
        "inner_vs_teacher": {
            "params_reduction_pct": round(100 * (t["params_mean"] - i["params_mean"]) / t["params_mean"], 1),
            "macs_reduction_pct": round(100 * (t["macs_mean"] - i["macs_mean"]) / t["macs_mean"], 1),
        },
    }


def format_report(report: dict) -> str:
    """Two tables: per-seed accuracy with mean ± std, and the compute profile."""
    rows = report["per_seed"]
    lines = ["Seed | Teacher | Block-KD | Inner-slice", "--- | --- | --- | ---"]
    for r in rows:
        lines.append(f"{r['seed']} | {r['teacher']:.2f} | {r['block_kd']:.2f} | {r['inner_slice']:.2f}")
    lines.append("Mean ± Std | " + " | ".join(fmt_mean_std([r[k] for r in rows]) for k in COLUMNS))
    lines += ["", "Model | Acc (mean) | Params (M) | GMacs", "--- | --- | --- | ---"]
    for k in COLUMNS:
        a = report["aggregate"][k]
        lines.append(f"{COLUMN_TITLES[k]} | {a['acc_mean']:.2f} | {a['params_mean'] / 1e6:.4f} | {a['macs_mean'] / 1e9:.4f}")
    red = report["inner_vs_teacher"]
    lines.append(f"Inner-slice reductions vs. Teacher: -{red['params_reduction_pct']:.1f}% Params, "
                 f"-{red['macs_reduction_pct']:.1f}% GMacs.")
    return "\n".join(lines)


def write_report(run_dirs: List[str], out_dir: str) -> dict:
    summaries = [_read_json(os.path.join(d, "summary.json")) for d in run_dirs]
    report = build_report(summaries)
    os.makedirs(out_dir, exist_ok=True)
    _write_json(report, os.path.join(out_dir, "report.json"))
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed"] + list(COLUMNS))
        for r in report["per_seed"]:
            w.writerow([r["seed"]] + [r[k] for k in COLUMNS])
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write(format_report(report) + "\n")
    return report
