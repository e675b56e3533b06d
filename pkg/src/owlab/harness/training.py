"""Incremental training over the task stream.

Each task trains with fresh optimizer state on its own scenes (new-class
instances plus old-class context), against cumulative instance counts.
From the second task on, a frozen snapshot of the previous model supplies
the retention loss. Replay queues persist across tasks, and on every
interval-th step the update flips: the task parameter set freezes and the
inductive set fits the queues instead, one equal vote per class. Frozen
sets are verified bitwise when verify_freeze is on.

The classification term is pluggable (plain, reweighted, focal, or
rarity-balanced cross-entropy) so loss ablations share every other moving
part. The vectorized term is tested against the per-sample loss functions
it reimplements.

After each task, the energy gate is calibrated to the 95th percentile of
validation energies over everything seen so far, and the model is
evaluated on the union of all tasks' test scenes with future classes
relabeled as unknown.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from owlab import losses
from owlab.distill import (
    CompositeWeights,
    cluster_loss,
    cluster_loss_grad,
    inherit_loss,
    inherit_loss_grads,
)
from owlab.inductive import (
    PHASE_INDUCTIVE,
    PHASE_TASK,
    BaseEntry,
    BaseQueue,
    UpdateScheduler,
)
from owlab.numcore import (
    MomentumSgd,
    NumericError,
    SgdConfig,
    learning_rate_at,
    softmax_vjp,
)
from owlab.openworld import (
    Box,
    DetectionRecord,
    EvalResult,
    GroundTruth,
    UNKNOWN_CLASS,
    UndefinedMetricError,
    energy_score,
    energy_threshold,
    map50,
    wilderness_impact,
    a_ose,
)

LOSS_MODES = ("ce", "weighted-ce", "focal", "balanced")

# evaluation-time clamp on predicted corner offsets, keeps decoded boxes
# non-degenerate no matter what the regression head emits
OFFSET_CLAMP = 0.9


@dataclass
class TrainConfig:
    """Training-loop knobs on top of the SGD/composite-weight configs."""

    epochs: int = 20
    min_steps: int = 120
    loss_mode: str = "balanced"
    distill: bool = True
    inductive: bool = True
    inductive_interval: int = 30
    queue_capacity: int = 10
    energy_percentile: float = 95.0
    gamma: float = 2.0
    balanced_mode: str = "fraction"
    # inverse-frequency weights span ~100x raw on long-tailed streams and
    # destabilize SGD; conservative clipping keeps the variant usable
    wce_clip: tuple = (0.9, 1.1)
    sgd: SgdConfig = field(
        default_factory=lambda: SgdConfig(learning_rate=0.015))
    weights: CompositeWeights = field(default_factory=CompositeWeights)
    verify_freeze: bool = True
    log_every: int = 25

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 1 or self.min_steps < 0:
            raise ValueError("epochs must be >= 1 and min_steps >= 0")
        if self.inductive_interval < 1:
            raise ValueError("inductive_interval must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if not 0 < self.energy_percentile <= 100:
            raise ValueError("energy_percentile must lie in (0, 100]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def loss_config(self):
        return losses.LossConfig(gamma=self.gamma, alpha=1.0,
                                 balanced_mode=self.balanced_mode)


def classification_term(mode, probs, target_ids, counts, cfg, wce_alpha=None):
    """Vectorized batch-mean classification loss and its probs gradient.

    Matches the per-sample loss functions exactly: "ce" is ce_multiclass,
    "weighted-ce" is ce scaled by the supplied per-class weights, "focal"
    is focal_softmax, "balanced" is balanced_loss. Returns (value, dprobs)
    with dprobs shaped like probs (only target entries populated).
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    p = np.asarray(probs, dtype=np.float64)
    ids = np.asarray(target_ids, dtype=int)
    b = p.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    pt = np.clip(p[np.arange(b), ids], losses.PROB_EPS, 1.0 - losses.PROB_EPS)
    log_pt = np.log(pt)
    if mode == "ce":
        per = -log_pt
        dper = -1.0 / pt
    elif mode == "weighted-ce":
        if wce_alpha is None:
            raise ValueError("weighted-ce needs per-class weights")
        w = np.array([wce_alpha.get(int(c), 1.0) for c in ids])
        per = -w * log_pt
        dper = -w / pt
    else:
        gamma = cfg.gamma
        a = np.array([cfg.alpha_for(int(c)) for c in ids])
        pow_g = (1.0 - pt) ** gamma
        per = -a * pow_g * log_pt
        dper = -a * pow_g / pt
        if gamma > 0:
            dper = dper + a * gamma * (1.0 - pt) ** (gamma - 1.0) * log_pt
        if mode == "balanced":
            factor = np.array([
                losses.balanced_factor(counts, int(c), cfg.balanced_mode)
                for c in ids])
            per = factor * per
            dper = factor * dper
    value = float(np.mean(per))
    dprobs = np.zeros_like(p)
    dprobs[np.arange(b), ids] = dper / b
    return value, dprobs


@dataclass
class TrainerState:
    """Everything that persists across tasks besides the model itself."""

    counts: losses.ClassCounts
    queue: BaseQueue
    teacher: object = None
    seen: frozenset = frozenset()
    completed: int = 0
    energy_gate: float = None

    @classmethod
    def fresh(cls, queue_capacity=10):
        return cls(counts=losses.ClassCounts(total=0, per_class={}),
                   queue=BaseQueue(capacity=queue_capacity))


@dataclass
class TaskLog:
    task_id: int
    n_instances: int
    n_steps: int
    n_inductive: int
    warmup: int
    first_loss: float
    final_loss: float
    freeze_violations: int
    loss_samples: list  # (step, phase, value) every log_every steps

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "n_instances": self.n_instances,
            "n_steps": self.n_steps,
            "n_inductive": self.n_inductive,
            "warmup": self.warmup,
            "first_loss": self.first_loss,
            "final_loss": self.final_loss,
            "freeze_violations": self.freeze_violations,
            "loss_samples": [[s, ph, v] for s, ph, v in self.loss_samples],
        }


def class_mask(n_classes, class_ids):
    m = np.zeros(n_classes, dtype=bool)
    for c in class_ids:
        m[int(c)] = True
    return m


def region_offsets(region):
    """Ground-truth corner offsets of a region relative to its anchor."""
    return np.array([region.box.x1 - region.anchor.x1,
                     region.box.y1 - region.anchor.y1,
                     region.box.x2 - region.anchor.x2,
                     region.box.y2 - region.anchor.y2])


def scene_instances(scenes):
    """Flatten scenes to parallel arrays (features, labels, gt offsets)."""
    feats, labels, offsets = [], [], []
    for scene in scenes:
        for region in scene.regions:
            feats.append(region.feature)
            labels.append(region.class_id)
            offsets.append(region_offsets(region))
    if not feats:
        raise ValueError("no instances in the given scenes")
    return np.stack(feats), np.array(labels, dtype=int), np.stack(offsets)


def train_task(model, task, state, cfg, seed):
    """Train the model on one task, mutating model and state. Returns a
    TaskLog. state.teacher/seen/completed are committed by the caller."""
    feats, labels, gt_offsets = scene_instances(task.train)
    n = feats.shape[0]
    k_classes = model.config.n_classes
    task_classes = frozenset(int(c) for c in task.spec.class_ids)
    seen_now = frozenset(state.seen) | task_classes
    seen_mask = class_mask(k_classes, seen_now)
    old_mask = class_mask(k_classes, state.seen) if state.seen else None

    state.counts = state.counts.merged(losses.ClassCounts.from_labels(labels))
    loss_cfg = cfg.loss_config()
    wce_alpha = losses.inverse_frequency_alpha(state.counts, cfg.wce_clip) \
        if cfg.loss_mode == "weighted-ce" else None

    batch = cfg.sgd.batch_size
    steps_per_epoch = max(1, math.ceil(n / batch))
    total_steps = max(cfg.epochs * steps_per_epoch, cfg.min_steps)
    warmup = min(cfg.sgd.warmup_iters, math.ceil(total_steps / 3))

    opt = MomentumSgd(momentum=cfg.sgd.momentum)
    sched = UpdateScheduler(interval=cfg.inductive_interval)
    use_inductive = cfg.inductive and model.config.ifc_enabled
    use_teacher = cfg.distill and state.teacher is not None \
        and old_mask is not None
    task_names = model.task_param_names()
    ind_names = model.inductive_param_names()
    frozen_forever = model.frozen_forever_names()
    w_inherit, w_new = (1.0, cfg.weights.lam) \
        if cfg.weights.combine_mode == "sum" \
        else (cfg.weights.alpha, 1.0 - cfg.weights.alpha)

    rng = np.random.default_rng([int(seed), 20, task.spec.task_id])
    order = rng.permutation(n)
    cursor = 0
    n_ind = 0
    violations = 0
    first_loss = None
    last_loss = None
    samples = []

    for step in range(1, total_steps + 1):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch] if n >= batch else order
        cursor += batch
        bf, bl, bo = feats[idx], labels[idx], gt_offsets[idx]

        out, cache = model.forward(bf, seen_mask)
        for i in range(len(idx)):
            model.protos.update(out.embeddings[i], bl[i])
            state.queue.push(BaseEntry(
                probs=out.probs[i].copy(), box=out.box_offsets[i].copy(),
                gt_class=int(bl[i]), gt_box=bo[i].copy(),
                feature=bf[i].copy()))

        phase = PHASE_TASK
        if use_inductive and sched.phase_at(step) == PHASE_INDUCTIVE \
                and len(state.queue) > 0:
            phase = PHASE_INDUCTIVE

        if phase == PHASE_TASK:
            cls_val, dprobs = classification_term(
                cfg.loss_mode, out.probs, bl, state.counts, loss_cfg,
                wce_alpha)
            b_eff = len(idx)
            reg_val = float(np.mean([
                losses.smooth_l1(out.box_offsets[i], bo[i])
                for i in range(b_eff)]))
            dboxes = np.stack([
                losses.smooth_l1_grad(out.box_offsets[i], bo[i])
                for i in range(b_eff)]) / b_eff
            clu_val = cluster_loss(out.embeddings, bl, model.protos)
            dembed = cluster_loss_grad(out.embeddings, bl, model.protos)
            new_val = cls_val + cfg.weights.lambda1 * reg_val \
                + cfg.weights.lambda2 * clu_val
            dboxes = cfg.weights.lambda1 * dboxes
            dembed = cfg.weights.lambda2 * dembed
            dmaps = None
            if use_teacher:
                # combine retention and new-task terms; without a teacher
                # the objective is the new-task loss alone, unscaled
                t_out = model.forward_with_params(
                    state.teacher.params, bf, old_mask)
                inh_val, _ = inherit_loss(
                    out.fmaps, t_out.fmaps, out.probs, t_out.probs,
                    out.box_offsets, t_out.box_offsets, old_mask)
                g_maps, g_probs, g_boxes = inherit_loss_grads(
                    out.fmaps, t_out.fmaps, out.probs, t_out.probs,
                    out.box_offsets, t_out.box_offsets, old_mask)
                total = w_inherit * inh_val + w_new * new_val
                dprobs = w_new * dprobs + w_inherit * g_probs
                dboxes = w_new * dboxes + w_inherit * g_boxes
                dembed = w_new * dembed
                dmaps = w_inherit * g_maps
            else:
                total = new_val
            dlogits = softmax_vjp(out.probs, dprobs)
            grads = model.backward(cache, dlogits=dlogits, dboxes=dboxes,
                                   dembed=dembed, dfmaps=dmaps)
            skip = set(ind_names) | set(frozen_forever)
        else:
            n_ind += 1
            total, grads = _inductive_step(model, state, cfg, seen_mask,
                                           loss_cfg)
            skip = set(task_names) | set(frozen_forever)

        if not math.isfinite(total):
            raise NumericError(
                f"non-finite loss at task {task.spec.task_id} step {step}")

        lr = learning_rate_at(cfg.sgd, step - 1, total_steps, warmup=warmup)
        if cfg.verify_freeze:
            before = {name: model.params[name].tobytes() for name in skip}
        opt.step(model.params, grads, lr, skip=skip)
        if cfg.verify_freeze:
            violations += sum(
                model.params[name].tobytes() != before[name]
                for name in skip)

        if first_loss is None:
            first_loss = total
        last_loss = total
        if step % cfg.log_every == 0 or step == total_steps:
            samples.append((step, phase, total))

    return TaskLog(
        task_id=task.spec.task_id, n_instances=n, n_steps=total_steps,
        n_inductive=n_ind, warmup=warmup, first_loss=first_loss,
        final_loss=last_loss, freeze_violations=violations,
        loss_samples=samples)


def _inductive_step(model, state, cfg, seen_mask, loss_cfg):
    """Fit the inductive set on the replay queues: recompute every stored
    instance through the current network, weigh classes equally, and
    return (loss value, gradients)."""
    class_ids = state.queue.classes()
    feats, targets, gt_boxes, weights = [], [], [], []
    for c in class_ids:
        entries = state.queue.entries(c)
        w = 1.0 / (len(class_ids) * len(entries))
        for e in entries:
            feats.append(e.feature)
            targets.append(c)
            gt_boxes.append(e.gt_box)
            weights.append(w)
    feats = np.stack(feats)
    gt_boxes = np.stack(gt_boxes)
    weights = np.array(weights)
    out, cache = model.forward(feats, seen_mask)
    total = 0.0
    dprobs = np.zeros_like(out.probs)
    dboxes = np.zeros_like(out.box_offsets)
    for i, (c, w) in enumerate(zip(targets, weights)):
        total += w * (losses.balanced_loss(out.probs[i], c, state.counts,
                                           loss_cfg)
                      + losses.smooth_l1(out.box_offsets[i], gt_boxes[i]))
        dprobs[i] = w * losses.balanced_loss_grad(out.probs[i], c,
                                                  state.counts, loss_cfg)
        dboxes[i] = w * losses.smooth_l1_grad(out.box_offsets[i], gt_boxes[i])
    dlogits = softmax_vjp(out.probs, dprobs)
    grads = model.backward(cache, dlogits=dlogits, dboxes=dboxes)
    return float(total), grads


# ---------------------------------------------------------------------------
# Calibration and evaluation.
# ---------------------------------------------------------------------------


def _forward_features(model, feats, seen_mask, chunk=512):
    outs = []
    for start in range(0, feats.shape[0], chunk):
        out, _ = model.forward(feats[start:start + chunk], seen_mask)
        outs.append(out)
    return outs


def calibrate_energy_threshold(model, stream, upto_index, cfg):
    """Energy gate from validation scenes of every task seen so far."""
    seen_ids = [c for t in range(upto_index + 1)
                for c in stream[t].spec.class_ids]
    seen_mask = class_mask(model.config.n_classes, seen_ids)
    scenes = [s for t in range(upto_index + 1) for s in stream[t].val]
    feats, _, _ = scene_instances(scenes)
    energies = []
    for out in _forward_features(model, feats, seen_mask):
        energies.extend(energy_score(out.logits[:, seen_mask]))
    return energy_threshold(energies, cfg.energy_percentile)


def evaluate_model(model, stream, upto_index, gate):
    """Evaluate on the union of all tasks' test scenes.

    Classes of tasks beyond upto_index are relabeled UNKNOWN_CLASS in the
    ground truth. Every region yields one detection: unknown when its
    energy clears the gate, otherwise the argmax seen class, scored by the
    max masked probability. Boxes are decoded as anchor plus clamped
    predicted offsets.
    """
    known_ids = sorted(c for t in range(upto_index + 1)
                       for c in stream[t].spec.class_ids)
    prev_ids = sorted(c for t in range(upto_index)
                      for c in stream[t].spec.class_ids)
    current_ids = sorted(stream[upto_index].spec.class_ids)
    seen_mask = class_mask(model.config.n_classes, known_ids)
    known_set = set(known_ids)

    gts = []
    feats = []
    meta = []
    for t, task in enumerate(stream):
        for scene in task.test:
            for region in scene.regions:
                true_cls = region.class_id if t <= upto_index \
                    else UNKNOWN_CLASS
                gts.append(GroundTruth(scene.image_id, region.box, true_cls))
                feats.append(region.feature)
                meta.append((scene.image_id, region.anchor))
    feats = np.stack(feats)

    dets = []
    max_unseen = 0.0
    row = 0
    for out in _forward_features(model, feats, seen_mask):
        b = out.probs.shape[0]
        unseen = ~seen_mask
        if unseen.any():
            max_unseen = max(max_unseen, float(out.probs[:, unseen].max()))
        energies = energy_score(out.logits[:, seen_mask])
        energies = np.atleast_1d(energies)
        for i in range(b):
            image_id, anchor = meta[row]
            row += 1
            off = np.clip(out.box_offsets[i], -OFFSET_CLAMP, OFFSET_CLAMP)
            box = Box(anchor.x1 + off[0], anchor.y1 + off[1],
                      anchor.x2 + off[2], anchor.y2 + off[3])
            score = float(out.probs[i].max())
            if gate is not None and energies[i] > gate:
                cls = UNKNOWN_CLASS
            else:
                cls = int(np.argmax(out.probs[i]))
            dets.append(DetectionRecord(image_id, box, cls, score))

    both = map50(dets, gts, known_set)
    current = map50(dets, gts, set(current_ids))
    prev = map50(dets, gts, set(prev_ids)).mean_ap if prev_ids else None
    try:
        wi = wilderness_impact(dets, gts, known_set)
    except UndefinedMetricError:
        wi = None
    return EvalResult(
        wi=wi,
        a_ose=a_ose(dets, gts),
        ap_per_class=both.ap_per_class,
        map50_previously_known=prev,
        map50_current_known=current.mean_ap,
        map50_both=both.mean_ap,
        max_unseen_prob=max_unseen)


# ---------------------------------------------------------------------------
# Full-stream driver.
# ---------------------------------------------------------------------------


@dataclass
class StreamRunResult:
    evals: list        # EvalResult per task
    logs: list         # TaskLog per task
    gates: list        # energy threshold per task
    model: object

    def to_dict(self):
        return {
            "evals": [e.to_dict() for e in self.evals],
            "logs": [log.to_dict() for log in self.logs],
            "gates": [float(g) for g in self.gates],
        }


def run_stream(stream, det_cfg, train_cfg, seed):
    """Train through every task in order, evaluating after each."""
    from owlab.harness.detector import Detector

    model = Detector.create(det_cfg, seed)
    state = TrainerState.fresh(train_cfg.queue_capacity)
    evals, logs, gates = [], [], []
    for t, task in enumerate(stream):
        log = train_task(model, task, state, train_cfg, seed)
        gate = calibrate_energy_threshold(model, stream, t, train_cfg)
        evals.append(evaluate_model(model, stream, t, gate))
        logs.append(log)
        gates.append(gate)
        state.teacher = model.snapshot()
        state.seen = frozenset(state.seen) | \
            frozenset(int(c) for c in task.spec.class_ids)
        state.completed += 1
        state.energy_gate = gate
    return StreamRunResult(evals=evals, logs=logs, gates=gates, model=model)
