"""Command-line entry points.

Subcommands:

* gen-tasks   -- materialize a synthetic task stream to JSONL + manifest.
* train       -- train through a stream, write checkpoint + run JSON.
* eval        -- re-evaluate a checkpoint on its stream, print metrics.
* experiment  -- run a multi-run experiment, write the report JSON.
* report      -- render CSV tables and PNG figures from a report.
* gradcheck   -- finite-difference audit of every analytic gradient.

Exit codes: 0 success, 1 runtime failure, 2 usage error (argparse) or a
gradient audit offense. Output locations default to $OWLAB_OUT or ".".
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from owlab import losses
from owlab.distill import (
    cluster_loss,
    cluster_loss_grad,
    nfd_loss,
    nfd_loss_grad,
    Prototypes,
)
from owlab.harness.detector import load_checkpoint, save_checkpoint
from owlab.harness.experiment import (
    ExperimentConfig,
    ExperimentReport,
    apply_overrides,
    run_experiment,
)
from owlab.harness.generator import gen_task_stream, write_stream
from owlab.harness.training import evaluate_model, run_stream
from owlab.numcore import NumericError, finite_diff_grad, max_rel_err
from owlab.plots import save_report_figures

GRADCHECK_TOL = 1e-4


def _default_out():
    return os.environ.get("OWLAB_OUT", ".")


def _config_from(args):
    cfg = ExperimentConfig()
    if getattr(args, "seeds", None):
        cfg = apply_overrides(cfg, [f"seeds={args.seeds}"])
    return apply_overrides(cfg, getattr(args, "override", []) or [])


def cmd_gen_tasks(args):
    cfg = _config_from(args)
    stream = gen_task_stream(cfg.stream, args.seed)
    outdir = args.out or os.path.join(_default_out(),
                                      f"stream-seed{args.seed}")
    write_stream(outdir, stream, cfg.stream, args.seed)
    for task in stream:
        print(f"task {task.spec.task_id}: classes {list(task.spec.class_ids)}"
              f" train={sum(len(s.regions) for s in task.train)}"
              f" val={sum(len(s.regions) for s in task.val)}"
              f" test={sum(len(s.regions) for s in task.test)}")
    print(f"wrote {outdir}")
    return 0


def cmd_train(args):
    cfg = _config_from(args)
    seed = args.seed
    stream = gen_task_stream(cfg.stream, seed)
    result = run_stream(stream, cfg.detector_config(), cfg.train, seed)
    outdir = args.out or os.path.join(_default_out(), f"run-seed{seed}")
    os.makedirs(outdir, exist_ok=True)
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": int(seed),
        "tasks_completed": len(result.evals),
        "energy_gate": float(result.gates[-1]),
    }
    save_checkpoint(os.path.join(outdir, "checkpoint.json"),
                    result.model, meta)
    with open(os.path.join(outdir, "run.json"), "w") as fh:
        json.dump({"config": cfg.to_dict(),
                   "config_hash": cfg.config_hash(),
                   "seed": int(seed),
                   "result": result.to_dict()},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    for t, ev in enumerate(result.evals):
        prev = ("-" if ev.map50_previously_known is None
                else f"{ev.map50_previously_known:.3f}")
        wi = "-" if ev.wi is None else f"{ev.wi:.3f}"
        print(f"task {t + 1}: combined={ev.map50_both:.3f} "
              f"current={ev.map50_current_known:.3f} previous={prev} "
              f"wi={wi} a-ose={ev.a_ose}")
    print(f"wrote {outdir}")
    return 0


def cmd_eval(args):
    cfg = _config_from(args)
    model, meta = load_checkpoint(args.checkpoint)
    if meta.get("config_hash") != cfg.config_hash():
        raise ValueError(
            "checkpoint was trained under a different configuration "
            f"({meta.get('config_hash')} != {cfg.config_hash()}); pass the "
            "same overrides used for training")
    stream = gen_task_stream(cfg.stream, meta["seed"])
    ev = evaluate_model(model, stream, meta["tasks_completed"] - 1,
                        meta.get("energy_gate"))
    print(json.dumps(ev.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_experiment(args):
    cfg = _config_from(args)
    if args.mode:
        cfg = apply_overrides(cfg, [f"mode={args.mode}"])
    report = run_experiment(cfg)
    out = args.out or os.path.join(_default_out(),
                                   f"report-{cfg.mode}.json")
    report.save(out)
    for key, value in sorted(report.analysis.items()):
        if not isinstance(value, (list, dict)):
            print(f"{key}: {value}")
    print(f"wrote {out}")
    return 0


def _write_metrics_csv(report, path):
    fields = ["label", "seed", "task", "combined_map50", "current_map50",
              "previously_known_map50", "wilderness_impact", "a_ose",
              "max_unseen_prob", "energy_gate"]
    rows = []
    for run in report.runs:
        result = run["result"]
        for t, ev in enumerate(result["evals"]):
            rows.append([
                run["label"], run["seed"], t + 1,
                repr(ev["map50_both"]), repr(ev["map50_current_known"]),
                "" if ev["map50_previously_known"] is None
                else repr(ev["map50_previously_known"]),
                "" if ev["wi"] is None else repr(ev["wi"]),
                int(ev["a_ose"]), repr(ev["max_unseen_prob"]),
                repr(result["gates"][t]),
            ])
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        writer.writerows(rows)


def _write_sensitivity_csv(report, path):
    cells = sorted(report.analysis["cells"],
                   key=lambda c: (c["alpha"], c["interval"]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "interval", "combined_map50"])
        for c in cells:
            writer.writerow([repr(c["alpha"]), c["interval"],
                             repr(c["combined_map50"])])


def cmd_report(args):
    report = ExperimentReport.load(args.report)
    outdir = args.out or os.path.join(_default_out(), "report")
    os.makedirs(outdir, exist_ok=True)
    written = []
    path = os.path.join(outdir, "metrics.csv")
    _write_metrics_csv(report, path)
    written.append(path)
    if report.config["mode"] == "sensitivity":
        path = os.path.join(outdir, "sensitivity.csv")
        _write_sensitivity_csv(report, path)
        written.append(path)
    written.extend(save_report_figures(report.to_dict(), outdir))
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Gradient audit.
# ---------------------------------------------------------------------------


def _gradcheck_cases(rng):
    """Yield (name, loss_fn_of_flat_vector, analytic_grad) triples on one
    random draw each; the caller loops draws."""
    counts = losses.ClassCounts.from_labels(
        rng.integers(0, 4, size=40).tolist())
    cfg = losses.LossConfig()
    k = 4

    def simplex():
        p = np.exp(rng.normal(size=k))
        p = 0.7 * p / p.sum() + 0.3 / k
        return p / p.sum()

    p = simplex()
    t = int(rng.integers(0, k))
    yield ("ce_multiclass",
           lambda x: losses.ce_multiclass(x, t),
           losses.ce_multiclass_grad(p, t), p)
    yield ("focal_softmax",
           lambda x: losses.focal_softmax(x, t, cfg),
           losses.focal_softmax_grad(p, t, cfg), p)
    yield ("balanced_loss",
           lambda x: losses.balanced_loss(x, t, counts, cfg),
           losses.balanced_loss_grad(p, t, counts, cfg), p)
    box = rng.normal(size=4)
    target = rng.normal(size=4)
    yield ("smooth_l1",
           lambda x: losses.smooth_l1(x, target),
           losses.smooth_l1_grad(box, target), box)
    teacher = simplex()
    mask = np.array([True, True, True, False])
    yield ("kl_old_classes",
           lambda x: losses.kl_old_classes(teacher, x, mask),
           losses.kl_old_classes_grad(teacher, p, mask), p)
    maps = rng.normal(size=(2, 3, 3))
    ref = rng.normal(size=(2, 3, 3))
    yield ("nfd_loss",
           lambda x: nfd_loss(x.reshape(2, 3, 3), ref),
           nfd_loss_grad(maps, ref).ravel(), maps.ravel())
    protos = Prototypes.create(3, 5, rate=0.1)
    for c in range(3):
        protos.update(rng.normal(size=5), c)
    emb = rng.normal(size=(4, 5))
    ids = rng.integers(0, 3, size=4)
    yield ("cluster_loss",
           lambda x: cluster_loss(x.reshape(4, 5), ids, protos),
           cluster_loss_grad(emb, ids, protos).ravel(), emb.ravel())


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    worst = {}
    for _ in range(args.rounds):
        for name, fn, grad, x in _gradcheck_cases(rng):
            num = finite_diff_grad(fn, np.asarray(x, dtype=np.float64))
            err = max_rel_err(np.ravel(grad), num)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = False
    for name in sorted(worst):
        flag = "ok" if worst[name] < GRADCHECK_TOL else "FAIL"
        bad = bad or flag == "FAIL"
        print(f"{name:16s} max rel err {worst[name]:.3e}  {flag}")
    return 2 if bad else 0


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="owlab",
        description="incremental open-world detection workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted config override, e.g. stream.scale=0.05")
        p.add_argument("--out", default=None, help="output location")
        if seeds:
            p.add_argument("--seeds", default=None,
                           help="comma-separated seed list")

    p = sub.add_parser("gen-tasks", help="write a synthetic stream")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", help="train through a stream")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a multi-run experiment")
    common(p, seeds=True)
    p.add_argument("--mode", default=None,
                   help="single | loss-modes | ablation | sensitivity")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render CSV + figures from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--rounds", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
