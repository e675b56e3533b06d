"""Classification and regression losses for long-tailed incremental training.

The centerpiece is a focal loss rescaled by how rare the target class is in
the accumulated training stream: common classes contribute (n - n_c)/n ~ 0
extra down-weighting on top of the focal term, rare ones keep nearly full
weight. Both readings of the rescale factor are available; see
balanced_factor. All losses come in value/grad pairs with the gradient taken
with respect to the probability inputs, and every gradient here is checked
against central differences in the test suite.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from owlab.numcore import as_array

# Probabilities are clamped away from 0 (and 1 where relevant) by this much
# before logs; small enough to never matter for healthy inputs.
PROB_EPS = 1e-12

# Slack when validating that an input vector lies on the simplex. Kept well
# above finite-difference step sizes so gradient checking can nudge entries.
SIMPLEX_TOL = 1e-3

BALANCED_MODES = ("fraction", "unscaled")


@dataclass
class ClassCounts:
    """Instance counts per class over everything seen so far.

    total must equal the sum of per_class values; count() returns 0 for
    classes that never occurred.
    """

    total: int
    per_class: dict

    def __post_init__(self):
        if self.total < 0:
            raise ValueError("total must be >= 0")
        if any(c < 0 for c in self.per_class.values()):
            raise ValueError("per-class counts must be >= 0")
        if sum(self.per_class.values()) != self.total:
            raise ValueError("total must equal the sum of per-class counts")

    @classmethod
    def from_labels(cls, labels):
        per_class = {}
        for lab in labels:
            lab = int(lab)
            per_class[lab] = per_class.get(lab, 0) + 1
        return cls(total=len(list(labels)) if not hasattr(labels, "__len__") else len(labels),
                   per_class=per_class)

    def count(self, class_id):
        return self.per_class.get(int(class_id), 0)

    def merged(self, other):
        """Counts for the union of two streams."""
        per_class = dict(self.per_class)
        for c, n in other.per_class.items():
            per_class[c] = per_class.get(c, 0) + n
        return ClassCounts(total=self.total + other.total, per_class=per_class)


@dataclass
class LossConfig:
    """Focal/balanced loss hyperparameters.

    alpha is either one scalar weight or a per-class mapping (missing
    classes fall back to 1). balanced_mode picks the form of the rarity
    rescale factor; "fraction" is the default, see balanced_factor.
    """

    gamma: float = 2.0
    alpha: object = 1.0
    balanced_mode: str = "fraction"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if isinstance(self.alpha, dict):
            if any(a <= 0 for a in self.alpha.values()):
                raise ValueError("per-class alpha weights must be positive")
        elif self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.balanced_mode not in BALANCED_MODES:
            raise ValueError(f"balanced_mode must be one of {BALANCED_MODES}")

    def alpha_for(self, class_id):
        if isinstance(self.alpha, dict):
            return float(self.alpha.get(int(class_id), 1.0))
        return float(self.alpha)


def balanced_factor(counts, class_id, mode="fraction"):
    """Rarity weight for class_id given cumulative counts.

    mode "fraction": (n - n_c) / n, in [0, 1) — vanishes for a class that
    is the whole stream, approaches 1 for a vanishing minority.
    mode "unscaled": n - n_c / n, the same expression without the outer
    division; it grows with the stream and mostly tracks n.
    """
    if mode not in BALANCED_MODES:
        raise ValueError(f"unknown balanced mode {mode!r}")
    n = counts.total
    if n == 0:
        raise ValueError("balanced factor needs a non-empty stream")
    n_c = counts.count(class_id)
    if mode == "fraction":
        return (n - n_c) / n
    return n - n_c / n


def _check_prob_vector(p, name="probs"):
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if np.any(p < -SIMPLEX_TOL) or abs(float(p.sum()) - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"{name} does not look like a distribution")


# ---------------------------------------------------------------------------
# Cross-entropy.
# ---------------------------------------------------------------------------


def ce_binary(p, y):
    """Binary cross-entropy -[y log p + (1-y) log(1-p)] for y in {0, 1}."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(pc) + (1 - y) * math.log(1.0 - pc))


def ce_binary_grad(p, y):
    """d/dp of ce_binary."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -y / pc + (1 - y) / (1.0 - pc)


def ce_multiclass(probs, target_class):
    """-log p_t over a probability vector."""
    p = as_array(probs)
    _check_prob_vector(p)
    t = int(target_class)
    if not 0 <= t < p.size:
        raise ValueError(f"target class {t} out of range for {p.size} classes")
    return -math.log(max(float(p[t]), PROB_EPS))


def ce_multiclass_grad(probs, target_class):
    """Gradient of ce_multiclass w.r.t. the probability vector."""
    p = as_array(probs)
    _check_prob_vector(p)
    t = int(target_class)
    if not 0 <= t < p.size:
        raise ValueError(f"target class {t} out of range for {p.size} classes")
    grad = np.zeros_like(p)
    grad[t] = -1.0 / max(float(p[t]), PROB_EPS)
    return grad


# ---------------------------------------------------------------------------
# Focal loss and its rarity-balanced variant.
# ---------------------------------------------------------------------------


def focal_softmax(probs, target_class, cfg=None):
    """Focal loss -alpha_t (1 - p_t)^gamma log p_t on softmax outputs."""
    cfg = cfg or LossConfig()
    p = as_array(probs)
    _check_prob_vector(p)
    t = int(target_class)
    if not 0 <= t < p.size:
        raise ValueError(f"target class {t} out of range for {p.size} classes")
    pt = min(max(float(p[t]), PROB_EPS), 1.0 - PROB_EPS)
    a = cfg.alpha_for(t)
    return -a * (1.0 - pt) ** cfg.gamma * math.log(pt)


def focal_softmax_grad(probs, target_class, cfg=None):
    """Gradient of focal_softmax w.r.t. the probability vector.

    Only the target entry is touched:
    dL/dp_t = alpha * gamma (1-p)^(gamma-1) log p - alpha (1-p)^gamma / p.
    """
    cfg = cfg or LossConfig()
    p = as_array(probs)
    _check_prob_vector(p)
    t = int(target_class)
    if not 0 <= t < p.size:
        raise ValueError(f"target class {t} out of range for {p.size} classes")
    pt = min(max(float(p[t]), PROB_EPS), 1.0 - PROB_EPS)
    a = cfg.alpha_for(t)
    g = cfg.gamma
    d = -a * (1.0 - pt) ** g / pt
    if g > 0:
        d += a * g * (1.0 - pt) ** (g - 1.0) * math.log(pt)
    grad = np.zeros_like(p)
    grad[t] = d
    return grad


def balanced_loss(probs, target_class, counts, cfg=None):
    """Focal loss rescaled by how rare the target class is in the stream."""
    cfg = cfg or LossConfig()
    factor = balanced_factor(counts, target_class, cfg.balanced_mode)
    return factor * focal_softmax(probs, target_class, cfg)


def balanced_loss_grad(probs, target_class, counts, cfg=None):
    cfg = cfg or LossConfig()
    factor = balanced_factor(counts, target_class, cfg.balanced_mode)
    return factor * focal_softmax_grad(probs, target_class, cfg)


def inverse_frequency_alpha(counts, clip=(0.2, 5.0)):
    """Per-class weights n / (K n_c), clipped — a plain reweighted-CE scheme
    used as one of the loss baselines. Returns a dict keyed by class id."""
    if counts.total == 0:
        raise ValueError("cannot weight an empty stream")
    lo, hi = clip
    k = len(counts.per_class)
    out = {}
    for c, n_c in counts.per_class.items():
        w = counts.total / (k * n_c) if n_c > 0 else hi
        out[c] = float(min(max(w, lo), hi))
    return out


# ---------------------------------------------------------------------------
# Box regression.
# ---------------------------------------------------------------------------


def smooth_l1(pred, target, beta=1.0):
    """Huber-style regression loss, summed over coordinates.

    Quadratic within beta of the target, linear outside.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = as_array(pred) - as_array(target)
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return float(per.sum())


def smooth_l1_grad(pred, target, beta=1.0):
    """d/dpred of smooth_l1 (shape of pred)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = as_array(pred) - as_array(target)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


# ---------------------------------------------------------------------------
# Distribution distillation.
# ---------------------------------------------------------------------------


def _restrict_renormalize(p, old_mask, name):
    sub = p[old_mask]
    # snap tiny negative drift so renormalization stays legal
    sub = np.where((sub > -1e-9) & (sub < 0.0), 0.0, sub)
    if np.any(sub < 0):
        raise ValueError(f"{name} has negative mass on the retained classes")
    s = float(sub.sum())
    if s <= 0.0:
        raise ValueError(f"{name} carries no mass on the retained classes")
    return sub / s, s


def kl_old_classes(teacher_probs, student_probs, old_mask):
    """KL(teacher || student) restricted to previously known classes.

    Both distributions are sliced down to old_mask and renormalized, so the
    value measures disagreement about relative mass among classes both
    models know, ignoring what the student spends on new ones.
    """
    t = as_array(teacher_probs)
    s = as_array(student_probs)
    old = np.asarray(old_mask, dtype=bool)
    if t.shape != s.shape or t.ndim != 1:
        raise ValueError("teacher and student must be matching vectors")
    if old.shape != t.shape:
        raise ValueError("old-class mask must match the probability vectors")
    if not old.any():
        raise ValueError("need at least one retained class")
    th, _ = _restrict_renormalize(t, old, "teacher")
    sh, _ = _restrict_renormalize(s, old, "student")
    sh = np.maximum(sh, PROB_EPS)
    # 0 * log 0 := 0
    terms = np.where(th > 0, th * (np.log(np.maximum(th, PROB_EPS)) - np.log(sh)), 0.0)
    return float(terms.sum())


def kl_old_classes_grad(teacher_probs, student_probs, old_mask):
    """Gradient of kl_old_classes w.r.t. the full student vector.

    New-class entries get exact zeros: the restriction makes the value
    independent of them.
    """
    t = as_array(teacher_probs)
    s = as_array(student_probs)
    old = np.asarray(old_mask, dtype=bool)
    if t.shape != s.shape or t.ndim != 1:
        raise ValueError("teacher and student must be matching vectors")
    if old.shape != t.shape:
        raise ValueError("old-class mask must match the probability vectors")
    if not old.any():
        raise ValueError("need at least one retained class")
    th, _ = _restrict_renormalize(t, old, "teacher")
    _, s_mass = _restrict_renormalize(s, old, "student")
    grad = np.zeros_like(s)
    s_old = np.maximum(s[old], PROB_EPS)
    grad[old] = -th / s_old + 1.0 / s_mass
    return grad
