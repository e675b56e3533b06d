"""Multi-run experiment drivers and their reports.

Four modes:

* single       -- one configuration across seeds, per-task metric means.
* loss-modes   -- the four classification losses head-to-head on the
                  same streams; scores minority-class AP (classes that
                  arrive after the first task) and sign-tests the
                  rarity-balanced loss against plain cross-entropy.
* ablation     -- full system vs. single-component removals; sign-tests
                  retention (previously-known mAP after the second task)
                  with and without distillation and compares combined
                  mAP with and without the inductive head.
* sensitivity  -- combine-weight x update-interval grid on the two-task
                  preset, reporting final combined mAP per cell.

Reports serialize to canonical JSON (sorted keys, no timestamps) so that
identical (config, seed) inputs produce byte-identical files.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

from owlab.distill import CompositeWeights
from owlab.harness.detector import DetectorConfig
from owlab.harness.generator import StreamConfig, gen_task_stream
from owlab.harness.training import (
    LOSS_MODES,
    TrainConfig,
    run_stream,
)
from owlab.numcore import SgdConfig

EXPERIMENT_MODES = ("single", "loss-modes", "ablation", "sensitivity")

DEFAULT_ALPHA_GRID = (0.1, 0.2, 0.3, 0.4, 0.6, 0.8)
DEFAULT_INTERVAL_GRID = (30, 300, 3000)

ABLATION_VARIANTS = ("full", "no-balanced", "no-distill", "no-ifc")


def one_sided_sign_test(wins, trials):
    """P(X >= wins) under X ~ Binomial(trials, 1/2).

    Ties must be dropped before calling; trials == 0 returns 1.0.
    """
    if wins < 0 or trials < 0 or wins > trials:
        raise ValueError("need 0 <= wins <= trials")
    if trials == 0:
        return 1.0
    total = sum(math.comb(trials, k) for k in range(wins, trials + 1))
    return total / 2 ** trials


def paired_sign_test(xs, ys):
    """Sign test for xs > ys pairwise. Returns (wins, trials, p)."""
    if len(xs) != len(ys):
        raise ValueError("paired samples must have equal length")
    wins = sum(1 for x, y in zip(xs, ys) if x > y)
    ties = sum(1 for x, y in zip(xs, ys) if x == y)
    trials = len(xs) - ties
    return wins, trials, one_sided_sign_test(wins, trials)


@dataclass
class ExperimentConfig:
    mode: str = "single"
    seeds: tuple = (0,)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: dict = field(default_factory=dict)
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    interval_grid: tuple = DEFAULT_INTERVAL_GRID

    def __post_init__(self):
        if self.mode not in EXPERIMENT_MODES:
            raise ValueError(f"mode must be one of {EXPERIMENT_MODES}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("need at least one seed")
        known = {f.name for f in dataclasses.fields(DetectorConfig)}
        for key in self.detector:
            if key not in known:
                raise ValueError(f"unknown detector field {key!r}")

    def detector_config(self):
        base = {"feature_dim": self.stream.resolved_feature_dim(),
                "n_classes": self.stream.total_classes}
        base.update(self.detector)
        return DetectorConfig(**base)

    def to_dict(self):
        return {
            "mode": self.mode,
            "seeds": list(self.seeds),
            "stream": self.stream.to_dict(),
            "train": dataclasses.asdict(self.train),
            "detector": dict(sorted(self.detector.items())),
            "alpha_grid": list(self.alpha_grid),
            "interval_grid": list(self.interval_grid),
        }

    @classmethod
    def from_dict(cls, d):
        train = dict(d.get("train", {}))
        if "sgd" in train:
            train["sgd"] = SgdConfig(**train["sgd"])
        if "weights" in train:
            train["weights"] = CompositeWeights(**train["weights"])
        if "wce_clip" in train:
            train["wce_clip"] = tuple(train["wce_clip"])
        return cls(
            mode=d.get("mode", "single"),
            seeds=tuple(d.get("seeds", (0,))),
            stream=StreamConfig.from_dict(d.get("stream", {})),
            train=TrainConfig(**train),
            detector=dict(d.get("detector", {})),
            alpha_grid=tuple(d.get("alpha_grid", DEFAULT_ALPHA_GRID)),
            interval_grid=tuple(d.get("interval_grid",
                                      DEFAULT_INTERVAL_GRID)),
        )

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Flat "section.key=value" overrides.
# ---------------------------------------------------------------------------


def _coerce(raw, current, name):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: cannot parse {raw!r} as bool")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        if current and isinstance(current[0], float):
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    if isinstance(current, str) or current is None:
        return raw
    raise ValueError(f"{name}: unsupported field type {type(current)}")


def _coerce_for_field(raw, ftype, name):
    table = {bool: lambda r: _coerce(r, True, name), int: int, float: float,
             str: str, tuple: lambda r: _coerce(r, (0,), name)}
    if ftype in table:
        return table[ftype](raw)
    raise ValueError(f"{name}: unsupported field type {ftype}")


def _replace_path(obj, parts, raw, path):
    head = parts[0]
    if not hasattr(obj, head):
        raise ValueError(f"unknown config key {path!r}")
    current = getattr(obj, head)
    if len(parts) == 1:
        return dataclasses.replace(obj, **{head: _coerce(raw, current, path)})
    if dataclasses.is_dataclass(current):
        newsub = _replace_path(current, parts[1:], raw, path)
        return dataclasses.replace(obj, **{head: newsub})
    raise ValueError(f"config key {path!r} does not nest")


def apply_override(cfg, key, raw):
    """Return a new ExperimentConfig with one dotted key replaced.

    Keys follow attribute paths ("train.sgd.learning_rate=0.02",
    "stream.scale=0.05", "mode=ablation"); "detector.<field>" targets the
    detector override table. Unknown keys raise ValueError.
    """
    parts = key.split(".")
    if parts[0] == "detector":
        if len(parts) != 2:
            raise ValueError(f"unknown config key {key!r}")
        fields = {f.name: f.type for f in dataclasses.fields(DetectorConfig)}
        if parts[1] not in fields:
            raise ValueError(f"unknown detector field {parts[1]!r}")
        det = dict(cfg.detector)
        det[parts[1]] = _coerce_for_field(raw, fields[parts[1]], key)
        return dataclasses.replace(cfg, detector=det)
    return _replace_path(cfg, parts, raw, key)


def apply_overrides(cfg, pairs):
    """Apply a sequence of "dotted.key=value" strings in order."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        cfg = apply_override(cfg, key.strip(), raw.strip())
    return cfg


# ---------------------------------------------------------------------------
# Experiment execution.
# ---------------------------------------------------------------------------


def minority_class_ap(evals, stream_cfg):
    """Minority-class AP: mean AP over classes that arrive after the
    first task, averaged over the evaluation after every later task."""
    if len(evals) < 2:
        raise ValueError("minority AP needs at least two evaluated tasks")
    vals = []
    for t in range(1, len(evals)):
        ids = [c for ti in range(1, t + 1)
               for c in stream_cfg.task_class_ids(ti)]
        aps = [evals[t].ap_per_class[c] for c in ids
               if c in evals[t].ap_per_class]
        if not aps:
            raise ValueError("no minority classes in evaluation")
        vals.append(sum(aps) / len(aps))
    return float(sum(vals) / len(vals))


def _mean(xs):
    return float(sum(xs) / len(xs))


def _run_one(cfg, train_cfg, det_cfg, seed, cache):
    key = (id(cfg.stream), seed)
    if key not in cache:
        cache[key] = gen_task_stream(cfg.stream, seed)
    return run_stream(cache[key], det_cfg, train_cfg, seed)


def run_experiment(cfg):
    """Execute the configured experiment and return an ExperimentReport."""
    runs = []
    cache = {}
    if cfg.mode == "single":
        analysis = _run_single(cfg, runs, cache)
    elif cfg.mode == "loss-modes":
        analysis = _run_loss_modes(cfg, runs, cache)
    elif cfg.mode == "ablation":
        analysis = _run_ablation(cfg, runs, cache)
    else:
        analysis = _run_sensitivity(cfg, runs, cache)
    return ExperimentReport(config=cfg.to_dict(),
                            config_hash=cfg.config_hash(),
                            runs=runs, analysis=analysis)


def _record(runs, label, seed, result):
    runs.append({"label": label, "seed": seed,
                 "result": result.to_dict()})
    return result


def _run_single(cfg, runs, cache):
    det = cfg.detector_config()
    results = [_record(runs, "single", s,
                       _run_one(cfg, cfg.train, det, s, cache))
               for s in cfg.seeds]
    n_tasks = cfg.stream.n_tasks
    per_task = []
    for t in range(n_tasks):
        evs = [r.evals[t] for r in results]
        per_task.append({
            "task": t + 1,
            "combined_map50": _mean([e.map50_both for e in evs]),
            "current_map50": _mean([e.map50_current_known for e in evs]),
            "previous_map50": None if t == 0 else _mean(
                [e.map50_previously_known for e in evs]),
            "wilderness_impact": _optional_mean([e.wi for e in evs]),
            "a_ose": _mean([e.a_ose for e in evs]),
            "max_unseen_prob": max(e.max_unseen_prob for e in evs),
        })
    return {"per_task": per_task}


def _optional_mean(xs):
    vals = [x for x in xs if x is not None]
    return _mean(vals) if vals else None


def _run_loss_modes(cfg, runs, cache):
    det = cfg.detector_config()
    per_seed = {m: [] for m in LOSS_MODES}
    for seed in cfg.seeds:
        for mode in LOSS_MODES:
            tc = dataclasses.replace(cfg.train, loss_mode=mode)
            res = _record(runs, mode, seed,
                          _run_one(cfg, tc, det, seed, cache))
            per_seed[mode].append(minority_class_ap(res.evals, cfg.stream))
    seed_mean = {m: _mean(v) for m, v in per_seed.items()}
    order = ("ce", "weighted-ce", "focal", "balanced")
    ordering_ok = all(seed_mean[a] <= seed_mean[b]
                      for a, b in zip(order, order[1:]))
    wins, trials, p = paired_sign_test(per_seed["balanced"], per_seed["ce"])
    return {
        "metric": "minority_class_map50_final",
        "per_seed": per_seed,
        "seed_mean": seed_mean,
        "ordering": list(order),
        "ordering_ok": ordering_ok,
        "balanced_vs_ce": {"wins": wins, "trials": trials, "p_value": p},
    }


def _variant_configs(cfg):
    det = cfg.detector_config()
    yield "full", cfg.train, det
    yield "no-balanced", dataclasses.replace(cfg.train, loss_mode="ce"), det
    yield "no-distill", dataclasses.replace(cfg.train, distill=False), det
    yield "no-ifc", cfg.train, dataclasses.replace(det, ifc_enabled=False)


def _run_ablation(cfg, runs, cache):
    if cfg.stream.n_tasks < 2:
        raise ValueError("ablation needs a stream with at least two tasks")
    prev2 = {v: [] for v in ABLATION_VARIANTS}
    final = {v: [] for v in ABLATION_VARIANTS}
    for seed in cfg.seeds:
        for label, tc, det in _variant_configs(cfg):
            res = _record(runs, label, seed,
                          _run_one(cfg, tc, det, seed, cache))
            prev2[label].append(res.evals[1].map50_previously_known)
            final[label].append(res.evals[-1].map50_both)
    d_wins, d_trials, d_p = paired_sign_test(prev2["full"],
                                             prev2["no-distill"])
    return {
        "previously_known_map50_after_task2": prev2,
        "combined_map50_final": final,
        "seed_mean_prev2": {v: _mean(prev2[v]) for v in ABLATION_VARIANTS},
        "seed_mean_final": {v: _mean(final[v]) for v in ABLATION_VARIANTS},
        "distill_sign_test": {"wins": d_wins, "trials": d_trials,
                              "p_value": d_p},
        "ifc_gain": _mean(final["full"]) - _mean(final["no-ifc"]),
    }


def _run_sensitivity(cfg, runs, cache):
    det = cfg.detector_config()
    seed = cfg.seeds[0]
    cells = []
    for alpha in cfg.alpha_grid:
        for interval in cfg.interval_grid:
            tc = dataclasses.replace(
                cfg.train,
                inductive_interval=int(interval),
                weights=dataclasses.replace(cfg.train.weights,
                                            alpha=float(alpha),
                                            combine_mode="convex"))
            label = f"alpha={alpha}-interval={interval}"
            res = _record(runs, label, seed,
                          _run_one(cfg, tc, det, seed, cache))
            cells.append({"alpha": float(alpha), "interval": int(interval),
                          "combined_map50": res.evals[-1].map50_both})
    values = [c["combined_map50"] for c in cells]
    return {
        "cells": cells,
        "grid_shape": [len(cfg.alpha_grid), len(cfg.interval_grid)],
        "min": min(values),
        "max": max(values),
        "spread": max(values) - min(values),
    }


# ---------------------------------------------------------------------------
# Report container.
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    runs: list
    analysis: dict

    def to_dict(self):
        return {"config": self.config, "config_hash": self.config_hash,
                "runs": self.runs, "analysis": self.analysis}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(config=d["config"], config_hash=d["config_hash"],
                   runs=d["runs"], analysis=d["analysis"])
