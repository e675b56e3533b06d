"""Synthetic incremental-detection task stream.

Classes arrive in tasks, with instance budgets copied from a wildly
imbalanced four-task stream (42377 / 268 / 2290 / 164 training instances;
the first task alone holds ~94% of the data) and scaled down to desk size.
Scenes are 10x10 canvases holding up to nine non-overlapping regions; each
region has a feature vector drawn from its class's Gaussian (one-hot mean
direction, shared isotropic noise) and a ground-truth box obtained by
nudging the region's 2x2 anchor with a fixed per-class corner offset.

Training scenes of later tasks also carry "context" regions: labeled
instances of earlier classes sampled in proportion to how often those
classes have occurred so far. That is what makes mid-task batches mix
overwhelming common classes with a trickle of new ones — the regime the
rarity-balanced loss is aimed at. Test scenes stay clean: only the task's
own classes appear, so per-task test sets have unambiguous ground truth.

Counts scale by round-half-up; at scale 1.0 the per-task totals reproduce
the reference table exactly. Tasks whose scaled budget falls below one
instance per class are bumped to one per class.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from owlab.numcore import as_array
from owlab.openworld import Box, GroundTruth

DEFAULT_TRAIN_COUNTS = (42377, 268, 2290, 164)
DEFAULT_TEST_COUNTS = (135, 341, 3478, 413)
DEFAULT_CLASSES_PER_TASK = (6, 6, 6, 11)

# optional trailing task for the five-column variant of the table
EXTRA_TASK_TRAIN = 12
EXTRA_TASK_TEST = 16
EXTRA_TASK_CLASSES = 3

TWOTASK_CLASSES = (6, 23)
TWOTASK_TRAIN_COUNTS = (42377, 2722)
TWOTASK_TEST_COUNTS = (135, 4232)

PRESETS = ("t4", "twotask")

SCENE_SIDE = 10.0
GRID_SLOTS = 9  # 3x3 grid of 2x2 anchors with 1-unit gaps
ANCHOR_SIZE = 2.0
OFFSET_LO = 0.4
OFFSET_HI = 0.8
MIN_PER_CLASS = 3
TEST_MIN_PER_CLASS = 8  # AP needs enough support per class to resolve
SKEW_DECAY = 0.45  # within-task geometric share decay for train budgets
CTX_FREQ_SHARE = 0.7  # context classes: frequency-weighted vs uniform mix


def scale_count(count, factor):
    """Round-half-up scaling of an instance budget."""
    return int(math.floor(count * factor + 0.5))


def split_count(total, k):
    """Spread `total` instances over k classes as evenly as possible,
    never starving a class (raises if total < k is requested directly)."""
    if total < k:
        raise ValueError("fewer instances than classes")
    base, rem = divmod(total, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def split_count_weighted(total, k, decay):
    """Spread `total` over k classes with geometrically decaying shares
    (largest-remainder rounding, preserves the total exactly)."""
    if total < k:
        raise ValueError("fewer instances than classes")
    w = np.array([decay ** i for i in range(k)])
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    frac = raw - counts
    for i in np.argsort(-frac, kind="stable")[:total - int(counts.sum())]:
        counts[i] += 1
    return [int(c) for c in counts]


def _apply_floor(counts, floor):
    """Move instances from the largest bins until every bin has >= floor
    (caller guarantees sum(counts) >= floor * len(counts))."""
    counts = list(counts)
    while min(counts) < floor:
        counts[max(range(len(counts)), key=counts.__getitem__)] -= 1
        counts[min(range(len(counts)), key=counts.__getitem__)] += 1
    return counts


@dataclass
class StreamConfig:
    """Knobs for the synthetic stream.

    scale applies to training budgets, test_scale to test budgets (kept
    larger by default so the evaluation split is not starved at desk
    scale). feature_dim defaults to the total class count; separation is
    the distance between class means in units of noise_sigma.
    context_rate is the expected number of old-class context regions per
    later-task training scene.
    """

    preset: str = "t4"
    scale: float = 0.01
    test_scale: float = 0.1
    val_instances: int = 24
    feature_dim: int = None
    noise_sigma: float = 1.0
    separation: float = 10.0
    context_rate: float = 1.0
    include_extra_task: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.scale <= 0 or self.test_scale <= 0:
            raise ValueError("scales must be positive")
        if self.val_instances < 1:
            raise ValueError("val_instances must be >= 1")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if not 0.0 <= self.context_rate <= GRID_SLOTS - 1:
            raise ValueError(f"context_rate must lie in [0, {GRID_SLOTS - 1}]")
        if self.include_extra_task and self.preset != "t4":
            raise ValueError("the extra task only extends the t4 preset")
        if self.feature_dim is not None \
                and self.feature_dim < self.total_classes:
            raise ValueError("feature_dim must cover one axis per class")

    @property
    def classes_per_task(self):
        if self.preset == "twotask":
            return TWOTASK_CLASSES
        if self.include_extra_task:
            return DEFAULT_CLASSES_PER_TASK + (EXTRA_TASK_CLASSES,)
        return DEFAULT_CLASSES_PER_TASK

    @property
    def train_counts(self):
        if self.preset == "twotask":
            return TWOTASK_TRAIN_COUNTS
        if self.include_extra_task:
            return DEFAULT_TRAIN_COUNTS + (EXTRA_TASK_TRAIN,)
        return DEFAULT_TRAIN_COUNTS

    @property
    def test_counts(self):
        if self.preset == "twotask":
            return TWOTASK_TEST_COUNTS
        if self.include_extra_task:
            return DEFAULT_TEST_COUNTS + (EXTRA_TASK_TEST,)
        return DEFAULT_TEST_COUNTS

    @property
    def n_tasks(self):
        return len(self.classes_per_task)

    @property
    def total_classes(self):
        return sum(self.classes_per_task)

    def resolved_feature_dim(self):
        return self.feature_dim if self.feature_dim is not None \
            else self.total_classes

    def task_class_ids(self, task_index):
        """Global class ids of the 0-based task_index-th task."""
        start = sum(self.classes_per_task[:task_index])
        return tuple(range(start, start + self.classes_per_task[task_index]))

    def to_dict(self):
        return {
            "preset": self.preset,
            "scale": self.scale,
            "test_scale": self.test_scale,
            "val_instances": self.val_instances,
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "separation": self.separation,
            "context_rate": self.context_rate,
            "include_extra_task": self.include_extra_task,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def class_means(config):
    """(total_classes, feature_dim) table of class centers.

    Means sit at distance `separation * noise_sigma` from each other:
    each class takes its own one-hot direction with magnitude
    separation * sigma / sqrt(2).
    """
    dim = config.resolved_feature_dim()
    k = config.total_classes
    mag = config.separation * config.noise_sigma / math.sqrt(2.0)
    means = np.zeros((k, dim))
    means[np.arange(k), np.arange(k)] = mag
    return means


@dataclass
class TaskSpec:
    """What one task contributes: its classes, budgets, and the fixed
    per-class box offsets used for regression targets."""

    task_id: int  # 1-based
    class_ids: tuple
    train_total: int
    val_total: int
    test_total: int
    box_offsets: dict  # class id -> (4,) corner offset

    def __post_init__(self):
        for c in self.class_ids:
            if c not in self.box_offsets:
                raise ValueError(f"missing box offset for class {c}")


@dataclass
class SceneRegion:
    """One labeled region: anchor, ground-truth box, feature, class."""

    class_id: int
    anchor: Box
    box: Box
    feature: np.ndarray
    is_context: bool = False


@dataclass
class SyntheticScene:
    image_id: int
    regions: list

    def ground_truths(self, relabel=None):
        """GroundTruth records; `relabel` optionally maps class ids."""
        out = []
        for r in self.regions:
            cls = r.class_id if relabel is None else relabel(r.class_id)
            out.append(GroundTruth(self.image_id, r.box, cls))
        return out


@dataclass
class TaskData:
    spec: TaskSpec
    train: list
    val: list
    test: list


def _slot_anchor(slot):
    col, row = slot % 3, slot // 3
    x1 = 1.0 + col * 3.0
    y1 = 1.0 + row * 3.0
    return Box(x1, y1, x1 + ANCHOR_SIZE, y1 + ANCHOR_SIZE)


def _offset_box(anchor, offset):
    return Box(anchor.x1 + offset[0], anchor.y1 + offset[1],
               anchor.x2 + offset[2], anchor.y2 + offset[3])


def _draw_feature(rng, means, config, class_id):
    return means[class_id] + rng.normal(
        scale=config.noise_sigma, size=means.shape[1])


def _make_scene(rng, image_id, primary_class, context_classes, means, config,
                offsets):
    regions = []
    for slot, (cls, is_ctx) in enumerate(
            [(primary_class, False)] + [(c, True) for c in context_classes]):
        anchor = _slot_anchor(slot)
        regions.append(SceneRegion(
            class_id=cls,
            anchor=anchor,
            box=_offset_box(anchor, offsets[cls]),
            feature=_draw_feature(rng, means, config, cls),
            is_context=is_ctx))
    return SyntheticScene(image_id=image_id, regions=regions)


def _class_budgets(config, task_index, split):
    if split == "train":
        total = scale_count(config.train_counts[task_index], config.scale)
    elif split == "test":
        total = scale_count(config.test_counts[task_index], config.test_scale)
    else:
        total = config.val_instances
    k = config.classes_per_task[task_index]
    if total < 1:
        raise ValueError(
            f"task {task_index + 1} {split} budget scaled away to zero; "
            f"raise the scale")
    # tiny scales still give every class a learnable handful;
    # full-scale counts are far above the floors and pass through exactly
    if split == "train":
        # long-tailed within-task distribution; val/test stay even so
        # per-class AP estimates get comparable support
        total = max(total, MIN_PER_CLASS * k)
        return _apply_floor(split_count_weighted(total, k, SKEW_DECAY),
                            MIN_PER_CLASS)
    floor = TEST_MIN_PER_CLASS if split == "test" else MIN_PER_CLASS
    return split_count(max(total, floor * k), k)


def gen_task_stream(config, seed):
    """Generate the full stream. Returns a list of TaskData, one per task.

    Same (config, seed) always yields bit-identical scenes; different
    splits and tasks draw from independent substreams.
    """
    means = class_means(config)
    offset_rng = np.random.default_rng([int(seed), 0])
    offsets = {}
    for c in range(config.total_classes):
        mag = offset_rng.uniform(OFFSET_LO, OFFSET_HI, size=4)
        sign = offset_rng.choice([-1.0, 1.0], size=4)
        offsets[c] = mag * sign

    # cumulative scaled train counts drive context sampling
    cumulative = np.zeros(config.total_classes)
    stream = []
    counters = {"train": 0, "val": 0, "test": 0}
    for t in range(config.n_tasks):
        class_ids = config.task_class_ids(t)
        splits = {}
        for split_i, split in enumerate(("train", "val", "test")):
            rng = np.random.default_rng([int(seed), 1 + split_i, t])
            budgets = _class_budgets(config, t, split)
            scenes = []
            for cls, budget in zip(class_ids, budgets):
                for _ in range(budget):
                    context = []
                    if split == "train" and t > 0 and cumulative.sum() > 0:
                        base = int(math.floor(config.context_rate))
                        frac = config.context_rate - base
                        n_ctx = base + (1 if rng.random() < frac else 0)
                        n_ctx = min(n_ctx, GRID_SLOTS - 1)
                        # frequency-weighted with a uniform floor so even
                        # the rarest earlier class keeps a toehold
                        seen_any = (cumulative > 0).astype(float)
                        probs = (CTX_FREQ_SHARE * cumulative
                                 / cumulative.sum()
                                 + (1.0 - CTX_FREQ_SHARE) * seen_any
                                 / seen_any.sum())
                        context = [int(c) for c in rng.choice(
                            config.total_classes, size=n_ctx, p=probs)]
                    scenes.append(_make_scene(
                        rng, counters[split], cls, context, means, config,
                        offsets))
                    counters[split] += 1
            splits[split] = scenes
        task_offsets = {c: offsets[c] for c in class_ids}
        spec = TaskSpec(
            task_id=t + 1,
            class_ids=class_ids,
            train_total=sum(_class_budgets(config, t, "train")),
            val_total=sum(_class_budgets(config, t, "val")),
            test_total=sum(_class_budgets(config, t, "test")),
            box_offsets=task_offsets)
        stream.append(TaskData(spec=spec, train=splits["train"],
                               val=splits["val"], test=splits["test"]))
        for cls, budget in zip(class_ids,
                               _class_budgets(config, t, "train")):
            cumulative[cls] += budget
    return stream


def count_instances(scenes, class_ids):
    """Instances in `scenes` whose label belongs to `class_ids` (context
    regions with other labels are not counted)."""
    wanted = set(class_ids)
    return sum(1 for s in scenes for r in s.regions if r.class_id in wanted)


# ---------------------------------------------------------------------------
# Disk format.
# ---------------------------------------------------------------------------


def write_scenes_jsonl(path, scenes):
    with open(path, "w") as fh:
        for s in scenes:
            for r in s.regions:
                fh.write(json.dumps({
                    "image_id": s.image_id,
                    "class": int(r.class_id),
                    "anchor": r.anchor.to_list(),
                    "box": r.box.to_list(),
                    "feature": [float(v) for v in r.feature],
                    "context": bool(r.is_context),
                }, sort_keys=True) + "\n")


def read_scenes_jsonl(path):
    by_image = {}
    order = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            img = int(rec["image_id"])
            if img not in by_image:
                by_image[img] = []
                order.append(img)
            by_image[img].append(SceneRegion(
                class_id=int(rec["class"]),
                anchor=Box.from_list(rec["anchor"]),
                box=Box.from_list(rec["box"]),
                feature=as_array(rec["feature"]),
                is_context=bool(rec["context"])))
    return [SyntheticScene(image_id=img, regions=by_image[img])
            for img in order]


def write_stream(outdir, stream, config, seed):
    """Write one scenes file per task and split, plus a manifest."""
    os.makedirs(outdir, exist_ok=True)
    manifest = {"config": config.to_dict(), "seed": int(seed), "tasks": []}
    for task in stream:
        t = task.spec.task_id
        entry = {
            "task_id": t,
            "classes": [int(c) for c in task.spec.class_ids],
            "train_total": task.spec.train_total,
            "val_total": task.spec.val_total,
            "test_total": task.spec.test_total,
            "box_offsets": {str(c): [float(v) for v in off]
                            for c, off in sorted(task.spec.box_offsets.items())},
            "files": {},
        }
        for split in ("train", "val", "test"):
            fname = f"task{t}_{split}.jsonl"
            write_scenes_jsonl(os.path.join(outdir, fname),
                               getattr(task, split))
            entry["files"][split] = fname
        manifest["tasks"].append(entry)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_stream(datadir):
    """Load a stream written by write_stream. Returns (stream, manifest)."""
    with open(os.path.join(datadir, "manifest.json")) as fh:
        manifest = json.load(fh)
    stream = []
    for entry in manifest["tasks"]:
        spec = TaskSpec(
            task_id=int(entry["task_id"]),
            class_ids=tuple(int(c) for c in entry["classes"]),
            train_total=int(entry["train_total"]),
            val_total=int(entry["val_total"]),
            test_total=int(entry["test_total"]),
            box_offsets={int(c): as_array(off)
                         for c, off in entry["box_offsets"].items()})
        splits = {}
        for split in ("train", "val", "test"):
            splits[split] = read_scenes_jsonl(
                os.path.join(datadir, entry["files"][split]))
        stream.append(TaskData(spec=spec, **splits))
    return stream, manifest
