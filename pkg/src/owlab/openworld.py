"""Open-world detection metrics.

Detections carry a class label and score; ground truth may include instances
of classes the detector has never been shown, labeled UNKNOWN_CLASS. On top
of the usual class-aware mAP at IoU 0.5, two open-world quantities are
measured: wilderness impact (how much precision on known classes degrades
once detections that actually landed on unknown objects are held against
the model) and absolute open-set error (how many distinct unknown instances
got claimed as some known class). An energy score over the seen-class
logits, thresholded at a percentile calibrated on validation data, turns a
closed-world classifier into an unknown flagger.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from owlab.numcore import as_array, logsumexp

UNKNOWN_CLASS = -1


class UndefinedMetricError(ValueError):
    """Raised when a ratio metric has no defined value on the given data."""


# ---------------------------------------------------------------------------
# Geometry and records.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with strictly positive extent, corners (x1,y1,x2,y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, coords):
        x1, y1, x2, y2 = (float(v) for v in coords)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: Box
    class_id: int


def iou(a, b):
    """Intersection-over-union of two boxes; 0 when they do not overlap."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# Matching and average precision.
# ---------------------------------------------------------------------------


def _greedy_match(dets, gts, iou_thresh):
    """Greedy score-ordered matching of detections to ground truth.

    Detections are visited from highest score down (ties keep input order);
    each takes the highest-IoU unmatched ground-truth box from its own image
    provided that IoU reaches the threshold. Returns (flags, tp_by_index):
    hit/miss flags in visiting order, and the same information indexed by
    the original detection position.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched = set()
    flags = []
    tp_by_index = [False] * len(dets)
    for i in order:
        d = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if j in matched or g.image_id != d.image_id:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched.add(best_j)
            flags.append(True)
            tp_by_index[i] = True
        else:
            flags.append(False)
    return flags, tp_by_index


def _average_precision(flags, n_gt):
    """All-point interpolated AP from score-ordered hit/miss flags."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, then sum over recall increments
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    jumps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[jumps + 1] - mrec[jumps]) * mpre[jumps + 1]))


@dataclass
class MapResult:
    """Per-class APs plus their mean over classes that had ground truth."""

    ap_per_class: dict
    mean_ap: float


def map50(dets, gts, class_set, iou_thresh=0.5):
    """Mean average precision at the given IoU threshold.

    Only classes in class_set participate; classes without any ground truth
    are left out of both the per-class table and the mean. With no eligible
    class at all the mean is 0.
    """
    class_set = set(int(c) for c in class_set)
    if not class_set:
        raise ValueError("class_set must not be empty")
    ap = {}
    for c in sorted(class_set):
        gts_c = [g for g in gts if g.class_id == c]
        if not gts_c:
            continue
        dets_c = [d for d in dets if d.class_id == c]
        flags, _ = _greedy_match(dets_c, gts_c, iou_thresh)
        ap[c] = _average_precision(flags, len(gts_c))
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return MapResult(ap_per_class=ap, mean_ap=mean)


# ---------------------------------------------------------------------------
# Open-world error measures.
# ---------------------------------------------------------------------------


def _is_unknown_gt(g, known_set):
    return g.class_id == UNKNOWN_CLASS or g.class_id not in known_set


def wilderness_impact(dets, gts, known_set, iou_thresh=0.5):
    """How much known-class precision erodes when the wilderness counts.

    Detections labeled with a known class are split three ways: true
    positives under per-class greedy matching, detections whose best overlap
    with some unknown ground-truth instance reaches the threshold, and plain
    misses. Closed-world precision P_K = TP/(TP+F) pretends the second group
    does not exist; open-world precision P_KU = TP/(TP+F+U) counts them as
    errors. The metric is P_K / P_KU - 1, i.e. 0 when no known-labeled
    detection landed on an unknown object.

    With no unknown ground truth at all the answer is exactly 0. Raises
    UndefinedMetricError when either precision is 0/0 (no known-labeled
    detections, none left after removing unknown hits, or no true
    positives).
    """
    known_set = set(int(c) for c in known_set)
    unknown_gts = [g for g in gts if _is_unknown_gt(g, known_set)]
    if not unknown_gts:
        return 0.0
    known_dets = [d for d in dets if d.class_id in known_set]
    if not known_dets:
        raise UndefinedMetricError("no detections labeled with a known class")
    tp = 0
    residual = []
    for c in sorted(known_set):
        dets_c = [d for d in known_dets if d.class_id == c]
        if not dets_c:
            continue
        gts_c = [g for g in gts if g.class_id == c]
        _, tp_by_index = _greedy_match(dets_c, gts_c, iou_thresh)
        tp += sum(tp_by_index)
        residual.extend(d for d, hit in zip(dets_c, tp_by_index) if not hit)
    u = 0
    f = 0
    for d in residual:
        best = max((iou(d.box, g.box) for g in unknown_gts
                    if g.image_id == d.image_id), default=0.0)
        if best >= iou_thresh:
            u += 1
        else:
            f += 1
    if tp + f == 0:
        raise UndefinedMetricError(
            "closed-world precision is 0/0 once unknown hits are removed")
    if tp == 0:
        raise UndefinedMetricError(
            "wilderness impact is undefined without true positives")
    p_k = tp / (tp + f)
    p_ku = tp / (tp + f + u)
    return p_k / p_ku - 1.0


def a_ose(dets, gts, iou_thresh=0.5):
    """Absolute open-set error: distinct unknown instances claimed as known.

    A detection claims a ground-truth box when that box is its best-IoU
    match within its image and the overlap reaches the threshold. Counted
    are unknown ground-truth instances claimed by at least one detection
    labeled with a known (non-UNKNOWN_CLASS) class, so the result can never
    exceed the number of unknown instances.
    """
    claimed = set()
    for d in dets:
        if d.class_id == UNKNOWN_CLASS:
            continue
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if g.image_id != d.image_id:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh \
                and gts[best_j].class_id == UNKNOWN_CLASS:
            claimed.add(best_j)
    return len(claimed)


# ---------------------------------------------------------------------------
# Energy-based unknown gating.
# ---------------------------------------------------------------------------


def energy_score(seen_logits):
    """Negative log-sum-exp over the seen-class logits.

    Low energy means strong evidence for some seen class; high energy means
    the logits support nothing the model knows. Accepts a vector (returns a
    float) or a batch of rows (returns a vector).
    """
    z = as_array(seen_logits)
    if z.size == 0:
        raise ValueError("energy needs at least one logit")
    out = -logsumexp(z)
    return float(out) if z.ndim == 1 else out


def energy_threshold(energies, percentile=95.0):
    """Gate position: the given percentile of calibration energies."""
    e = as_array(energies)
    if e.size == 0:
        raise ValueError("cannot calibrate a threshold on no energies")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    return float(np.percentile(e, percentile))


def energy_unknown(seen_logits, threshold):
    """Flag an instance as unknown when its energy exceeds the threshold.

    Returns (is_unknown, energy).
    """
    e = energy_score(seen_logits)
    return bool(e > threshold), e


# ---------------------------------------------------------------------------
# Evaluation summary.
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    """One evaluation pass over a test split.

    wi / map50_previously_known are None on the first task, where nothing
    was previously known (and, for wi, when it is undefined on the data).
    max_unseen_prob records the largest probability any instance assigned to
    a masked-out class — it should sit at numerical zero.
    """

    wi: object
    a_ose: int
    ap_per_class: dict
    map50_previously_known: object
    map50_current_known: float
    map50_both: float
    max_unseen_prob: float = 0.0

    def __post_init__(self):
        if self.a_ose < 0:
            raise ValueError("a_ose must be >= 0")
        if self.wi is not None and self.wi < 0:
            raise ValueError("wilderness impact cannot be negative")
        for name in ("map50_previously_known", "map50_current_known",
                     "map50_both"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_unseen_prob < 0:
            raise ValueError("max_unseen_prob must be >= 0")

    def to_dict(self):
        return {
            "wi": self.wi,
            "a_ose": int(self.a_ose),
            "ap_per_class": {str(c): v for c, v in
                             sorted(self.ap_per_class.items())},
            "map50_previously_known": self.map50_previously_known,
            "map50_current_known": self.map50_current_known,
            "map50_both": self.map50_both,
            "max_unseen_prob": self.max_unseen_prob,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            wi=d["wi"],
            a_ose=int(d["a_ose"]),
            ap_per_class={int(c): v for c, v in d["ap_per_class"].items()},
            map50_previously_known=d["map50_previously_known"],
            map50_current_known=d["map50_current_known"],
            map50_both=d["map50_both"],
            max_unseen_prob=d.get("max_unseen_prob", 0.0),
        )


# ---------------------------------------------------------------------------
# Serialization.
# ---------------------------------------------------------------------------


def _class_to_json(class_id):
    return "unknown" if class_id == UNKNOWN_CLASS else int(class_id)


def _class_from_json(value):
    return UNKNOWN_CLASS if value == "unknown" else int(value)


def write_detections_jsonl(path, dets):
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps({
                "image_id": int(d.image_id),
                "box": d.box.to_list(),
                "class": _class_to_json(d.class_id),
                "score": float(d.score),
            }, sort_keys=True) + "\n")


def read_detections_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(DetectionRecord(
                image_id=int(rec["image_id"]),
                box=Box.from_list(rec["box"]),
                class_id=_class_from_json(rec["class"]),
                score=float(rec["score"])))
    return out


def write_ground_truth_jsonl(path, gts):
    with open(path, "w") as fh:
        for g in gts:
            fh.write(json.dumps({
                "image_id": int(g.image_id),
                "box": g.box.to_list(),
                "class": _class_to_json(g.class_id),
            }, sort_keys=True) + "\n")


def read_ground_truth_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(GroundTruth(
                image_id=int(rec["image_id"]),
                box=Box.from_list(rec["box"]),
                class_id=_class_from_json(rec["class"])))
    return out
