"""Tests for the inductive head, replay queues, replay loss, and the
alternating update schedule."""

import numpy as np
import pytest

from owlab import losses
from owlab.inductive import (
    IFC_LAYERS,
    PHASE_INDUCTIVE,
    PHASE_TASK,
    BaseEntry,
    BaseQueue,
    IfcBlock,
    UpdateScheduler,
    ifc_backward,
    ifc_forward,
    ifc_forward_backward,
    inductive_loss,
    inductive_loss_grads,
)
from owlab.numcore import finite_diff_grad, max_rel_err


def make_entry(rng, k, c, feature_dim=None, box_offset=0.0):
    probs = np.full(k, 1.0 / k)
    box = rng.uniform(0, 5, size=4)
    feature = rng.normal(size=feature_dim) if feature_dim else None
    return BaseEntry(probs=probs, box=box, gt_class=c,
                     gt_box=box + box_offset, feature=feature)


class TestIfcBlock:
    def test_create_shapes(self):
        rng = np.random.default_rng(301)
        block = IfcBlock.create(6, 8, rng)
        assert block.in_dim == 6
        assert block.width == 8
        assert block.params["fc1.w"].shape == (6, 8)
        for layer in ("ind1", "fc2", "ind2"):
            assert block.params[f"{layer}.w"].shape == (8, 8)
        for layer in IFC_LAYERS:
            assert block.params[f"{layer}.b"].shape == (8,)

    def test_ind_layers_start_near_identity(self):
        rng = np.random.default_rng(302)
        block = IfcBlock.create(4, 16, rng, identity_noise=1e-3)
        for layer in ("ind1", "ind2"):
            w = block.params[f"{layer}.w"]
            assert np.max(np.abs(w - np.eye(16))) < 1e-2
            assert np.max(np.abs(w - np.eye(16))) > 0.0

    def test_zero_noise_gives_exact_identity(self):
        rng = np.random.default_rng(303)
        block = IfcBlock.create(4, 4, rng, identity_noise=0.0)
        np.testing.assert_array_equal(block.params["ind1.w"], np.eye(4))
        np.testing.assert_array_equal(block.params["ind2.w"], np.eye(4))

    def test_param_name_partition(self):
        task = set(IfcBlock.task_param_names())
        ind = set(IfcBlock.inductive_param_names())
        assert task & ind == set()
        assert task | ind == {f"{l}.{k}" for l in IFC_LAYERS for k in "wb"}

    def test_validation(self):
        rng = np.random.default_rng(304)
        block = IfcBlock.create(3, 4, rng)
        bad = dict(block.params)
        del bad["ind2.b"]
        with pytest.raises(ValueError):
            IfcBlock(params=bad)
        bad = dict(block.params)
        bad["ind1.w"] = np.zeros((4, 5))
        with pytest.raises(ValueError):
            IfcBlock(params=bad)


class TestIfcForward:
    def all_identity_block(self, dim):
        params = {}
        for layer in IFC_LAYERS:
            params[f"{layer}.w"] = np.eye(dim)
            params[f"{layer}.b"] = np.zeros(dim)
        return IfcBlock(params=params)

    def test_identity_block_applies_only_the_tanh(self):
        # with every layer an identity map the stack collapses to its one
        # nonlinearity
        block = self.all_identity_block(3)
        x = np.array([0.5, -1.5, 0.0])
        y, _ = ifc_forward(block, x)
        np.testing.assert_allclose(y, np.tanh(x), atol=1e-15)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(311)
        block = IfcBlock.create(5, 7, rng)
        xs = rng.normal(size=(4, 5))
        ybatch, _ = ifc_forward(block, xs)
        for i in range(4):
            yi, _ = ifc_forward(block, xs[i])
            np.testing.assert_allclose(ybatch[i], yi, atol=1e-14)

    def test_input_dim_checked(self):
        rng = np.random.default_rng(312)
        block = IfcBlock.create(5, 7, rng)
        with pytest.raises(ValueError):
            ifc_forward(block, np.zeros(6))

    def test_gradcheck_all_parameters(self):
        rng = np.random.default_rng(313)
        block = IfcBlock.create(3, 4, rng)
        x = rng.normal(size=3)
        upstream = rng.normal(size=4)
        y, cache = ifc_forward(block, x)
        grads, dx = ifc_backward(block, cache, upstream)

        def scalar_x(v):
            out, _ = ifc_forward(block, v)
            return float(np.dot(out, upstream))

        assert max_rel_err(dx, finite_diff_grad(scalar_x, x)) < 1e-5

        for name in sorted(block.params):
            def scalar_p(v, name=name):
                trial = {k: (v if k == name else p)
                         for k, p in block.params.items()}
                out, _ = ifc_forward(IfcBlock(params=trial), x)
                return float(np.dot(out, upstream))

            numeric = finite_diff_grad(scalar_p, block.params[name])
            assert max_rel_err(grads[name], numeric) < 1e-5, name

    def test_forward_backward_wrapper(self):
        rng = np.random.default_rng(314)
        block = IfcBlock.create(3, 4, rng)
        x = rng.normal(size=(2, 3))
        y, grads, dx = ifc_forward_backward(block, x, np.zeros((2, 4)))
        assert y.shape == (2, 4)
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(dx == 0)
        y2, g2, d2 = ifc_forward_backward(block, x)
        assert g2 is None and d2 is None
        np.testing.assert_array_equal(y, y2)


class TestBaseQueue:
    def test_capacity_default(self):
        assert BaseQueue().capacity == 10

    def test_fifo_eviction(self):
        rng = np.random.default_rng(321)
        q = BaseQueue(capacity=3)
        entries = [make_entry(rng, 4, 0) for _ in range(5)]
        for e in entries:
            q.push(e)
        held = q.entries(0)
        assert len(held) == 3
        assert held == entries[2:]  # the two oldest were dropped

    def test_classes_independent(self):
        rng = np.random.default_rng(322)
        q = BaseQueue(capacity=2)
        for c in (0, 1, 0, 2, 0):
            q.push(make_entry(rng, 4, c))
        assert q.size(0) == 2
        assert q.size(1) == 1
        assert q.size(2) == 1
        assert q.size(9) == 0
        assert q.classes() == [0, 1, 2]
        assert len(q) == 4

    def test_matches_reference_model(self):
        # drive queue and a plain list-based reference with the same pushes
        rng = np.random.default_rng(323)
        q = BaseQueue(capacity=4)
        ref = {}
        for _ in range(2000):
            c = int(rng.integers(0, 6))
            e = make_entry(rng, 3, c)
            q.push(e)
            ref.setdefault(c, []).append(e)
            ref[c] = ref[c][-4:]
        for c in range(6):
            assert q.entries(c) == ref.get(c, [])
            assert q.size(c) <= 4

    def test_capacity_validated(self):
        with pytest.raises(ValueError):
            BaseQueue(capacity=0)


class TestBaseEntry:
    def test_validation(self):
        with pytest.raises(ValueError):
            BaseEntry(probs=np.ones((2, 2)), box=np.zeros(4),
                      gt_class=0, gt_box=np.zeros(4))
        with pytest.raises(ValueError):
            BaseEntry(probs=np.ones(3), box=np.zeros(3),
                      gt_class=0, gt_box=np.zeros(4))
        with pytest.raises(ValueError):
            BaseEntry(probs=np.ones(3), box=np.zeros(4),
                      gt_class=-1, gt_box=np.zeros(4))

    def test_feature_is_optional(self):
        e = BaseEntry(probs=np.ones(3) / 3, box=np.zeros(4),
                      gt_class=2, gt_box=np.zeros(4))
        assert e.feature is None
        e2 = BaseEntry(probs=np.ones(3) / 3, box=np.zeros(4),
                       gt_class=2, gt_box=np.zeros(4), feature=np.ones(5))
        assert e2.feature.shape == (5,)


class TestInductiveLoss:
    def test_hand_oracle(self):
        counts = losses.ClassCounts(total=10, per_class={0: 9, 1: 1})
        q = BaseQueue(capacity=10)
        box = np.array([1.0, 1.0, 2.0, 2.0])
        q.push(BaseEntry(probs=[0.5, 0.5], box=box, gt_class=0, gt_box=box))
        q.push(BaseEntry(probs=[0.5, 0.5], box=box, gt_class=1,
                         gt_box=box + np.array([0.5, 0, 0, 0])))
        total, per_class = inductive_loss(q, counts)
        # class 0: 0.1 * 0.25 ln2; class 1: 0.9 * 0.25 ln2 + 0.125
        assert per_class[0] == pytest.approx(0.017328679513998632, abs=1e-15)
        assert per_class[1] == pytest.approx(0.2809581156259877, abs=1e-15)
        assert total == pytest.approx(0.14914339756999317, abs=1e-15)

    def test_classes_weighted_equally(self):
        # a class with many entries has no more pull than a class with one
        rng = np.random.default_rng(331)
        counts = losses.ClassCounts(total=20, per_class={0: 10, 1: 10})
        q = BaseQueue(capacity=10)
        e_lone = make_entry(rng, 2, 1, box_offset=0.3)
        q.push(e_lone)
        for _ in range(10):
            q.push(BaseEntry(probs=e_lone.probs.copy(), box=e_lone.box.copy(),
                             gt_class=0, gt_box=e_lone.gt_box.copy()))
        total, per_class = inductive_loss(q, counts)
        assert per_class[0] == pytest.approx(per_class[1], abs=1e-12)
        assert total == pytest.approx(per_class[0], abs=1e-12)

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(332)
        counts = losses.ClassCounts(total=30, per_class={0: 20, 1: 6, 2: 4})
        for _ in range(20):
            q = BaseQueue(capacity=5)
            expected = {}
            for c in range(3):
                n = int(rng.integers(1, 5))
                vals = []
                for _ in range(n):
                    e = make_entry(rng, 3, c, box_offset=float(rng.uniform(0, 1)))
                    q.push(e)
                    vals.append(losses.balanced_loss(e.probs, c, counts)
                                + losses.smooth_l1(e.box, e.gt_box))
                expected[c] = np.mean(vals)
            total, per_class = inductive_loss(q, counts)
            for c in range(3):
                assert per_class[c] == pytest.approx(expected[c], rel=1e-12)
            assert total == pytest.approx(np.mean(list(expected.values())),
                                          rel=1e-12)

    def test_empty_queue_rejected(self):
        counts = losses.ClassCounts(total=1, per_class={0: 1})
        with pytest.raises(ValueError):
            inductive_loss(BaseQueue(), counts)

    def test_grads_entry_weights(self):
        rng = np.random.default_rng(333)
        counts = losses.ClassCounts(total=12, per_class={0: 8, 1: 4})
        q = BaseQueue(capacity=5)
        for c, n in ((0, 3), (1, 2)):
            for _ in range(n):
                q.push(make_entry(rng, 2, c, box_offset=0.4))
        grads = inductive_loss_grads(q, counts)
        assert set(grads) == {0, 1}
        assert len(grads[0]) == 3 and len(grads[1]) == 2
        for c, m in ((0, 3), (1, 2)):
            w = 1.0 / (2 * m)
            for (dp, db), e in zip(grads[c], q.entries(c)):
                np.testing.assert_allclose(
                    dp, w * losses.balanced_loss_grad(e.probs, c, counts),
                    atol=1e-15)
                np.testing.assert_allclose(
                    db, w * losses.smooth_l1_grad(e.box, e.gt_box), atol=1e-15)

    def test_grads_against_fd(self):
        rng = np.random.default_rng(334)
        counts = losses.ClassCounts(total=9, per_class={0: 6, 1: 3})
        q = BaseQueue(capacity=4)
        for c, n in ((0, 2), (1, 1)):
            for _ in range(n):
                q.push(make_entry(rng, 2, c, box_offset=0.3))
        grads = inductive_loss_grads(q, counts)
        for c in (0, 1):
            for i, entry in enumerate(q.entries(c)):
                def of_probs(v, entry=entry):
                    saved = entry.probs
                    entry.probs = v
                    try:
                        return inductive_loss(q, counts)[0]
                    finally:
                        entry.probs = saved

                numeric = finite_diff_grad(of_probs, entry.probs)
                assert max_rel_err(grads[c][i][0], numeric) < 1e-4


class TestUpdateScheduler:
    def test_default_interval(self):
        sched = UpdateScheduler()
        assert sched.interval == 30
        assert sched.phase_at(29) == PHASE_TASK
        assert sched.phase_at(30) == PHASE_INDUCTIVE
        assert sched.phase_at(31) == PHASE_TASK
        assert sched.phase_at(60) == PHASE_INDUCTIVE

    def test_interval_three_pattern(self):
        sched = UpdateScheduler(interval=3)
        phases = [sched.phase_at(s) for s in range(1, 7)]
        assert phases == [PHASE_TASK, PHASE_TASK, PHASE_INDUCTIVE,
                          PHASE_TASK, PHASE_TASK, PHASE_INDUCTIVE]

    def test_interval_one_every_step(self):
        sched = UpdateScheduler(interval=1)
        assert all(sched.phase_at(s) == PHASE_INDUCTIVE for s in range(1, 20))

    def test_count_property(self):
        rng = np.random.default_rng(341)
        for _ in range(100):
            interval = int(rng.integers(1, 50))
            n = int(rng.integers(0, 500))
            sched = UpdateScheduler(interval=interval)
            count = sum(sched.phase_at(s) == PHASE_INDUCTIVE
                        for s in range(1, n + 1))
            assert count == n // interval
            assert sched.inductive_steps(n) == count

    def test_no_consecutive_inductive_for_interval_ge_two(self):
        sched = UpdateScheduler(interval=2)
        phases = [sched.phase_at(s) for s in range(1, 100)]
        for a, b in zip(phases, phases[1:]):
            assert not (a == PHASE_INDUCTIVE and b == PHASE_INDUCTIVE)

    def test_validation(self):
        with pytest.raises(ValueError):
            UpdateScheduler(interval=0)
        with pytest.raises(ValueError):
            UpdateScheduler().phase_at(0)
        with pytest.raises(ValueError):
            UpdateScheduler().inductive_steps(-1)
