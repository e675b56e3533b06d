"""Knowledge-retention losses and the composite training objectives.

Feature maps are compared after per-channel standardization, which makes the
distillation term blind to channel-wise rescaling/shifts between models and
keeps every channel on an equal footing. Class embeddings are pulled toward
running per-class prototypes and pushed off other classes' prototypes. The
composite objectives combine these with the classification/regression losses
from owlab.losses; gradients for every piece are hand-derived and
finite-difference-checked in the tests.
"""

import copy
import hashlib
from dataclasses import dataclass

import numpy as np

from owlab import losses
from owlab.numcore import as_array

# Floor on the per-channel standard deviation. Applied as a clamp (not an
# additive term) so healthy channels standardize to exactly unit variance and
# near-constant channels degrade gracefully to ~zero instead of exploding.
STD_EPS = 1e-5

COMBINE_MODES = ("sum", "convex")


# ---------------------------------------------------------------------------
# Normalized feature distillation.
# ---------------------------------------------------------------------------


def normalize_feature(fmap, eps=STD_EPS):
    """Standardize each channel of a feature map over its spatial extent.

    Input has shape (..., H, W); mean/std are taken per leading index over
    the trailing two axes, with the population (1/N) variance. Output
    channels have zero mean and, unless nearly constant, unit variance.
    """
    f = as_array(fmap)
    if f.ndim < 2:
        raise ValueError("feature map needs at least (H, W) axes")
    mu = f.mean(axis=(-2, -1), keepdims=True)
    sigma = f.std(axis=(-2, -1), keepdims=True)
    return (f - mu) / np.maximum(sigma, eps)


def normalize_feature_backward(fmap, upstream, eps=STD_EPS):
    """Backprop through normalize_feature.

    For a healthy channel this is the usual standardization backward
    dx = (g - mean(g) - y * mean(g*y)) / sigma with y the normalized output;
    channels pinned to the eps floor only see the mean-subtraction path.
    """
    f = as_array(fmap)
    g = as_array(upstream)
    if f.shape != g.shape:
        raise ValueError("upstream must match the feature map shape")
    mu = f.mean(axis=(-2, -1), keepdims=True)
    sigma = f.std(axis=(-2, -1), keepdims=True)
    denom = np.maximum(sigma, eps)
    y = (f - mu) / denom
    g_mean = g.mean(axis=(-2, -1), keepdims=True)
    gy_mean = (g * y).mean(axis=(-2, -1), keepdims=True)
    # where the clamp is active the divisor is constant w.r.t. the input
    proj = np.where(sigma >= eps, y * gy_mean, 0.0)
    return (g - g_mean - proj) / denom


def nfd_loss(student_map, teacher_map, eps=STD_EPS):
    """Mean squared difference between standardized feature maps.

    Accepts (C, H, W) or batched (B, C, H, W); the mean runs over every
    element either way.
    """
    s = as_array(student_map)
    t = as_array(teacher_map)
    if s.shape != t.shape:
        raise ValueError(f"feature maps disagree: {s.shape} vs {t.shape}")
    diff = normalize_feature(s, eps) - normalize_feature(t, eps)
    return float(np.mean(diff * diff))


def nfd_loss_grad(student_map, teacher_map, eps=STD_EPS):
    """Gradient of nfd_loss w.r.t. the student feature map."""
    s = as_array(student_map)
    t = as_array(teacher_map)
    if s.shape != t.shape:
        raise ValueError(f"feature maps disagree: {s.shape} vs {t.shape}")
    diff = normalize_feature(s, eps) - normalize_feature(t, eps)
    upstream = 2.0 * diff / diff.size
    return normalize_feature_backward(s, upstream, eps)


# ---------------------------------------------------------------------------
# Class prototypes and the clustering pull/push.
# ---------------------------------------------------------------------------


@dataclass
class Prototypes:
    """Running per-class embedding centers, EMA-updated.

    A class's first observed embedding seeds its prototype directly; later
    ones blend in with weight `rate`. Inactive rows are all-zero placeholders
    and are excluded from the clustering loss.
    """

    values: np.ndarray
    active: np.ndarray
    rate: float = 0.1

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("prototype table must be (n_classes, dim)")
        if self.active.shape != (self.values.shape[0],):
            raise ValueError("active mask must have one flag per class")
        if not 0 < self.rate <= 1:
            raise ValueError("rate must lie in (0, 1]")

    @classmethod
    def create(cls, n_classes, dim, rate=0.1):
        return cls(values=np.zeros((n_classes, dim)),
                   active=np.zeros(n_classes, dtype=bool), rate=rate)

    @property
    def n_classes(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def has(self, class_id):
        return bool(self.active[int(class_id)])

    def update(self, embedding, class_id):
        c = int(class_id)
        e = as_array(embedding)
        if e.shape != (self.dim,):
            raise ValueError(f"embedding must have dim {self.dim}")
        if self.active[c]:
            self.values[c] = (1.0 - self.rate) * self.values[c] + self.rate * e
        else:
            self.values[c] = e
            self.active[c] = True


def _cluster_terms(e, label, protos):
    own = protos.values[label]
    d_own = float(np.sum((e - own) ** 2))
    others = [c for c in range(protos.n_classes) if protos.active[c] and c != label]
    if not others:
        return d_own, None, 0.0
    dists = [float(np.sum((e - protos.values[c]) ** 2)) for c in others]
    nearest = others[int(np.argmin(dists))]
    return d_own, nearest, min(dists)


def cluster_loss(embeddings, class_ids, protos, margin=1.0):
    """Pull embeddings onto their class prototype, push off the nearest
    other class.

    Per instance: ||e - p_own||^2 + max(0, margin - ||e - p_nearest||^2),
    averaged over the batch. Instances whose class has no prototype yet are
    an error; with a single active prototype the push term vanishes.
    """
    e = as_array(embeddings)
    if e.ndim == 1:
        e = e[None, :]
    ids = np.atleast_1d(np.asarray(class_ids, dtype=int))
    if e.shape[0] != ids.shape[0]:
        raise ValueError("one class id per embedding required")
    if e.shape[0] == 0:
        raise ValueError("cluster loss over an empty batch is undefined")
    total = 0.0
    for i in range(e.shape[0]):
        c = int(ids[i])
        if not 0 <= c < protos.n_classes or not protos.active[c]:
            raise ValueError(f"no prototype for class {c}")
        d_own, nearest, d_other = _cluster_terms(e[i], c, protos)
        total += d_own
        if nearest is not None:
            total += max(0.0, margin - d_other)
    return total / e.shape[0]


def cluster_loss_grad(embeddings, class_ids, protos, margin=1.0):
    """Gradient of cluster_loss w.r.t. the embeddings (prototypes are
    treated as constants — they evolve by EMA, not by gradient)."""
    e = as_array(embeddings)
    squeeze = e.ndim == 1
    if squeeze:
        e = e[None, :]
    ids = np.atleast_1d(np.asarray(class_ids, dtype=int))
    if e.shape[0] != ids.shape[0]:
        raise ValueError("one class id per embedding required")
    if e.shape[0] == 0:
        raise ValueError("cluster loss over an empty batch is undefined")
    grad = np.zeros_like(e)
    b = e.shape[0]
    for i in range(b):
        c = int(ids[i])
        if not 0 <= c < protos.n_classes or not protos.active[c]:
            raise ValueError(f"no prototype for class {c}")
        _, nearest, d_other = _cluster_terms(e[i], c, protos)
        grad[i] = 2.0 * (e[i] - protos.values[c])
        if nearest is not None and margin - d_other > 0.0:
            grad[i] -= 2.0 * (e[i] - protos.values[nearest])
    grad /= b
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# Composite objectives.
# ---------------------------------------------------------------------------


@dataclass
class CompositeWeights:
    """Mixing weights for the composite objectives.

    lambda1/lambda2 scale the regression and clustering terms inside the
    new-task loss. The retention and new-task objectives combine either as
    inherit + lam * new ("sum") or as alpha * inherit + (1 - alpha) * new
    ("convex"); the convex form is what the sensitivity sweep varies.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lam: float = 1.0
    alpha: float = 0.3
    combine_mode: str = "sum"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lam < 0:
            raise ValueError("mixing weights must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.combine_mode not in COMBINE_MODES:
            raise ValueError(f"combine_mode must be one of {COMBINE_MODES}")


def new_task_loss(probs, target_classes, boxes, gt_boxes, embeddings, protos,
                  counts, weights=None, loss_cfg=None):
    """Training loss on the current task's labeled instances.

    Batch mean of the rarity-balanced focal classification term, plus
    lambda1 times the smooth-L1 box term, plus lambda2 times the clustering
    term. Returns (total, parts) with the unweighted parts broken out.
    """
    weights = weights or CompositeWeights()
    loss_cfg = loss_cfg or losses.LossConfig()
    p = as_array(probs)
    bx = as_array(boxes)
    gt = as_array(gt_boxes)
    ids = np.atleast_1d(np.asarray(target_classes, dtype=int))
    b = p.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if not (ids.shape[0] == bx.shape[0] == gt.shape[0] == b):
        raise ValueError("batch axes disagree")
    cls_term = float(np.mean([
        losses.balanced_loss(p[i], ids[i], counts, loss_cfg) for i in range(b)]))
    reg_term = float(np.mean([
        losses.smooth_l1(bx[i], gt[i]) for i in range(b)]))
    clu_term = cluster_loss(embeddings, ids, protos)
    total = cls_term + weights.lambda1 * reg_term + weights.lambda2 * clu_term
    parts = {"classification": cls_term, "regression": reg_term,
             "clustering": clu_term}
    return total, parts


def new_task_loss_grads(probs, target_classes, boxes, gt_boxes, embeddings,
                        protos, counts, weights=None, loss_cfg=None):
    """Gradients of new_task_loss w.r.t. (probs, boxes, embeddings)."""
    weights = weights or CompositeWeights()
    loss_cfg = loss_cfg or losses.LossConfig()
    p = as_array(probs)
    bx = as_array(boxes)
    ids = np.atleast_1d(np.asarray(target_classes, dtype=int))
    b = p.shape[0]
    dprobs = np.stack([
        losses.balanced_loss_grad(p[i], ids[i], counts, loss_cfg)
        for i in range(b)]) / b
    dboxes = np.stack([
        losses.smooth_l1_grad(bx[i], as_array(gt_boxes)[i])
        for i in range(b)]) * (weights.lambda1 / b)
    dembed = weights.lambda2 * cluster_loss_grad(embeddings, ids, protos)
    return dprobs, dboxes, dembed


def inherit_loss(student_maps, teacher_maps, student_probs, teacher_probs,
                 student_boxes, teacher_boxes, old_mask):
    """Retention loss against a frozen snapshot of the previous model.

    Three batch-averaged pieces: standardized-feature-map matching,
    KL(teacher || student) over previously known classes, and mean squared
    error between the box outputs. Returns (total, parts). Identical
    student/teacher inputs give exactly zero.
    """
    sp = as_array(student_probs)
    tp = as_array(teacher_probs)
    sb = as_array(student_boxes)
    tb = as_array(teacher_boxes)
    if sp.shape != tp.shape or sb.shape != tb.shape:
        raise ValueError("student/teacher output shapes disagree")
    b = sp.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    feat = nfd_loss(student_maps, teacher_maps)
    dist = float(np.mean([
        losses.kl_old_classes(tp[i], sp[i], old_mask) for i in range(b)]))
    reg = float(np.mean((sb - tb) ** 2))
    total = feat + dist + reg
    return total, {"feature": feat, "distribution": dist, "regression": reg}


def inherit_loss_grads(student_maps, teacher_maps, student_probs,
                       teacher_probs, student_boxes, teacher_boxes, old_mask):
    """Gradients of inherit_loss w.r.t. the student inputs
    (maps, probs, boxes)."""
    sp = as_array(student_probs)
    tp = as_array(teacher_probs)
    sb = as_array(student_boxes)
    tb = as_array(teacher_boxes)
    b = sp.shape[0]
    dmaps = nfd_loss_grad(student_maps, teacher_maps)
    dprobs = np.stack([
        losses.kl_old_classes_grad(tp[i], sp[i], old_mask)
        for i in range(b)]) / b
    dboxes = 2.0 * (sb - tb) / sb.size
    return dmaps, dprobs, dboxes


def task_loss(inherit_value, new_value, weights=None):
    """Combine retention and new-task objectives into the step loss."""
    weights = weights or CompositeWeights()
    if weights.combine_mode == "sum":
        return inherit_value + weights.lam * new_value
    return weights.alpha * inherit_value + (1.0 - weights.alpha) * new_value


# ---------------------------------------------------------------------------
# Teacher snapshots.
# ---------------------------------------------------------------------------


class TeacherSnapshot:
    """Immutable copy of a named-parameter dict, used as the frozen teacher.

    Arrays are deep-copied and marked read-only; checksum() fingerprints
    names, shapes, and bytes, so any drift in the snapshot is detectable.
    """

    def __init__(self, params):
        self._params = {}
        for name, value in params.items():
            arr = copy.deepcopy(np.asarray(value))
            arr.setflags(write=False)
            self._params[str(name)] = arr

    @property
    def params(self):
        return dict(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self._params):
            arr = self._params[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
