"""Inductive classification head, per-class replay queues, and the
alternating update schedule.

The head is a four-layer stack fc1 -> ind1 -> tanh -> fc2 -> ind2. The two
"ind" layers are square, start as near-identity maps, and form the inductive
parameter set; the fc layers belong to the ordinary task set. Training
alternates: most steps update the task set with the inductive set frozen,
and every `interval`-th step flips roles and fits the inductive set on the
replay queues, where every class holds the same number of slots regardless
of how common it is in the stream. The replay loss weighs each class
equally, which is what gives rare classes a periodic full-strength say.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from owlab import losses
from owlab.numcore import as_array

PHASE_TASK = "task-update"
PHASE_INDUCTIVE = "inductive-update"

IFC_LAYERS = ("fc1", "ind1", "fc2", "ind2")


# ---------------------------------------------------------------------------
# The head itself.
# ---------------------------------------------------------------------------


@dataclass
class IfcBlock:
    """Parameters of the inductive head, stored as a flat name->array dict.

    Keys are "<layer>.w" / "<layer>.b" for the layers in IFC_LAYERS.
    """

    params: dict

    def __post_init__(self):
        expected = {f"{layer}.{kind}" for layer in IFC_LAYERS for kind in "wb"}
        if set(self.params) != expected:
            missing = expected - set(self.params)
            extra = set(self.params) - expected
            raise ValueError(f"bad parameter set (missing {sorted(missing)}, "
                             f"extra {sorted(extra)})")
        w = self.params
        width = w["fc1.w"].shape[1]
        for layer in ("ind1", "ind2"):
            if w[f"{layer}.w"].shape != (width, width):
                raise ValueError(f"{layer} must be square ({width}x{width})")
        if w["fc2.w"].shape != (width, width):
            raise ValueError("fc2 must preserve the head width")
        for layer in IFC_LAYERS:
            if w[f"{layer}.b"].shape != (w[f"{layer}.w"].shape[1],):
                raise ValueError(f"{layer} bias shape mismatch")

    @classmethod
    def create(cls, in_dim, width, rng, identity_noise=1e-3):
        """Glorot-init fc layers; ind layers start at identity plus a whisper
        of noise so the head initially passes features through unchanged."""
        params = {}
        limit = np.sqrt(6.0 / (in_dim + width))
        params["fc1.w"] = rng.uniform(-limit, limit, size=(in_dim, width))
        limit = np.sqrt(6.0 / (2 * width))
        params["fc2.w"] = rng.uniform(-limit, limit, size=(width, width))
        for layer in ("ind1", "ind2"):
            noise = rng.normal(scale=identity_noise, size=(width, width)) \
                if identity_noise > 0 else 0.0
            params[f"{layer}.w"] = np.eye(width) + noise
        for layer in IFC_LAYERS:
            params[f"{layer}.b"] = np.zeros(params[f"{layer}.w"].shape[1])
        return cls(params=params)

    @property
    def in_dim(self):
        return self.params["fc1.w"].shape[0]

    @property
    def width(self):
        return self.params["fc1.w"].shape[1]

    @staticmethod
    def task_param_names():
        return ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]

    @staticmethod
    def inductive_param_names():
        return ["ind1.w", "ind1.b", "ind2.w", "ind2.b"]


def ifc_forward(block, x):
    """Run the head: fc1, ind1, tanh, fc2, ind2. Returns (y, cache)."""
    x = as_array(x)
    single = x.ndim == 1
    h0 = x[None, :] if single else x
    if h0.shape[-1] != block.in_dim:
        raise ValueError(f"input dim {h0.shape[-1]} != {block.in_dim}")
    p = block.params
    h1 = h0 @ p["fc1.w"] + p["fc1.b"]
    h2 = h1 @ p["ind1.w"] + p["ind1.b"]
    h3 = np.tanh(h2)
    h4 = h3 @ p["fc2.w"] + p["fc2.b"]
    y = h4 @ p["ind2.w"] + p["ind2.b"]
    cache = (h0, h1, h3, h4, single)
    return (y[0] if single else y), cache


def ifc_backward(block, cache, upstream):
    """Backprop through a cached forward. Returns (grads, dx) with grads
    keyed like block.params."""
    h0, h1, h3, h4, single = cache
    g = as_array(upstream)
    if single:
        g = g[None, :]
    p = block.params
    grads = {}
    # ind2
    grads["ind2.w"] = h4.T @ g
    grads["ind2.b"] = g.sum(axis=0)
    g = g @ p["ind2.w"].T
    # fc2
    grads["fc2.w"] = h3.T @ g
    grads["fc2.b"] = g.sum(axis=0)
    g = g @ p["fc2.w"].T
    # tanh
    g = g * (1.0 - h3 ** 2)
    # ind1
    grads["ind1.w"] = h1.T @ g
    grads["ind1.b"] = g.sum(axis=0)
    g = g @ p["ind1.w"].T
    # fc1
    grads["fc1.w"] = h0.T @ g
    grads["fc1.b"] = g.sum(axis=0)
    g = g @ p["fc1.w"].T
    return grads, (g[0] if single else g)


def ifc_forward_backward(block, x, upstream=None):
    y, cache = ifc_forward(block, x)
    if upstream is None:
        return y, None, None
    grads, dx = ifc_backward(block, cache, upstream)
    return y, grads, dx


# ---------------------------------------------------------------------------
# Per-class replay queues.
# ---------------------------------------------------------------------------


@dataclass
class BaseEntry:
    """One replayed instance: the model's masked class distribution and box
    at the time it was seen, plus its labels.

    `feature` optionally keeps the backbone feature that produced the
    prediction, so a later update phase can re-run the instance through the
    current head; the stored outputs alone are constants with no gradient.
    """

    probs: np.ndarray
    box: np.ndarray
    gt_class: int
    gt_box: np.ndarray
    feature: np.ndarray = None

    def __post_init__(self):
        self.probs = as_array(self.probs)
        self.box = as_array(self.box)
        self.gt_box = as_array(self.gt_box)
        self.gt_class = int(self.gt_class)
        if self.probs.ndim != 1:
            raise ValueError("probs must be a vector")
        if self.box.shape != (4,) or self.gt_box.shape != (4,):
            raise ValueError("boxes must have 4 coordinates")
        if self.gt_class < 0:
            raise ValueError("gt_class must be a known class id")
        if self.feature is not None:
            self.feature = as_array(self.feature)
            if self.feature.ndim != 1:
                raise ValueError("feature must be a vector")


class BaseQueue:
    """Fixed-capacity FIFO replay slots per class.

    Each class gets its own deque of at most `capacity` entries; pushing to
    a full class silently drops that class's oldest entry. Common and rare
    classes therefore end up equally represented once both have filled up.
    """

    def __init__(self, capacity=10):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._slots = {}

    def push(self, entry):
        q = self._slots.get(entry.gt_class)
        if q is None:
            q = deque(maxlen=self.capacity)
            self._slots[entry.gt_class] = q
        q.append(entry)

    def classes(self):
        return sorted(c for c, q in self._slots.items() if q)

    def entries(self, class_id):
        return list(self._slots.get(int(class_id), ()))

    def size(self, class_id):
        return len(self._slots.get(int(class_id), ()))

    def total(self):
        return sum(len(q) for q in self._slots.values())

    def __len__(self):
        return self.total()


# ---------------------------------------------------------------------------
# The replay loss.
# ---------------------------------------------------------------------------


def inductive_loss(queue, counts, cfg=None):
    """Class-balanced replay loss over the queues.

    Within a class: mean over its entries of balanced classification loss
    plus smooth-L1 box loss. Across classes: a plain mean, one vote per
    class no matter how full the stream is of it. Returns (total, per_class).
    """
    cfg = cfg or losses.LossConfig()
    class_ids = queue.classes()
    if not class_ids:
        raise ValueError("all replay queues are empty")
    per_class = {}
    for c in class_ids:
        vals = []
        for entry in queue.entries(c):
            vals.append(
                losses.balanced_loss(entry.probs, c, counts, cfg)
                + losses.smooth_l1(entry.box, entry.gt_box))
        per_class[c] = float(np.mean(vals))
    total = float(np.mean(list(per_class.values())))
    return total, per_class


def inductive_loss_grads(queue, counts, cfg=None):
    """Per-entry gradients of inductive_loss w.r.t. stored (probs, box).

    Returns {class_id: [(dprobs, dbox), ...]} in queue order; each entry
    carries weight 1 / (n_classes * n_entries_in_its_class).
    """
    cfg = cfg or losses.LossConfig()
    class_ids = queue.classes()
    if not class_ids:
        raise ValueError("all replay queues are empty")
    k = len(class_ids)
    out = {}
    for c in class_ids:
        entries = queue.entries(c)
        w = 1.0 / (k * len(entries))
        out[c] = [
            (w * losses.balanced_loss_grad(entry.probs, c, counts, cfg),
             w * losses.smooth_l1_grad(entry.box, entry.gt_box))
            for entry in entries]
    return out


# ---------------------------------------------------------------------------
# Alternation schedule.
# ---------------------------------------------------------------------------


@dataclass
class UpdateScheduler:
    """Decides which parameter set trains at each 1-based step.

    Every `interval`-th step is an inductive update; everything else is a
    task update. interval=1 makes every step inductive.
    """

    interval: int = 30

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("interval must be >= 1")

    def phase_at(self, step):
        if step < 1:
            raise ValueError("steps are 1-based")
        return PHASE_INDUCTIVE if step % self.interval == 0 else PHASE_TASK

    def inductive_steps(self, n_steps):
        """How many of the first n_steps are inductive updates."""
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        return n_steps // self.interval
