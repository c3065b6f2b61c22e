import math

import numpy as np
import pytest

from adafuse import checkpoint as ckpt
from adafuse.data import Cohort, SyntheticConfig, generate_cohort
from adafuse.evaluation import auc
from adafuse.models import ClassifierBank
from adafuse.numerics import grad_check
from adafuse.policy import enumerate_trajectories, forced_actions, classify_rollout, rollout
from adafuse.rl import (FreezeConfig, LossConfig, RewardConfig, TrainSchedule, balanced_batches,
                        cohort_source, compute_rewards, greedy_predict, loss_backward,
                        pretrain_baselines, reinforce_loss, reward_auc_batch, reward_bce,
                        total_loss, train_adafuse, training_splits)


class TestRewards:
    def test_bce_confident(self):
        assert abs(reward_bce(1 - 1e-7, 1)) < 1e-6

    def test_bce_half(self):
        assert reward_bce(0.5, 1) == pytest.approx(math.log(0.5), rel=1e-14)

    def test_bce_wrong(self):
        assert reward_bce(0.9, 0) == pytest.approx(math.log(0.1), rel=1e-12)

    def test_auc_top_positive(self):
        assert reward_auc_batch([0.9, 0.1, 0.2], [1, 0, 0])[0] == 1.0

    def test_auc_all_ties(self):
        np.testing.assert_array_equal(reward_auc_batch([0.4] * 4, [1, 0, 1, 0]), np.zeros(4))

    def test_auc_hand_pairs(self):
        # the positive outranks both negatives, so every pair is ordered correctly
        np.testing.assert_array_equal(reward_auc_batch([0.9, 0.2, 0.6], [1, 0, 0]), [1, 1, 1])
        # 0.6 now outranks the positive: positive 1/2 -> 0, negative 0.2 -> +1, 0.6 -> -1
        np.testing.assert_array_equal(reward_auc_batch([0.5, 0.2, 0.6], [1, 0, 0]), [0, 1, -1])

    def test_auc_positive_mean_is_batch_auc(self, rng):
        p = rng.random(40)
        y = (rng.random(40) < 0.4).astype(int)
        assert reward_auc_batch(p, y)[y == 1].mean() == pytest.approx(2 * auc(p, y) - 1, abs=1e-12)

    def test_auc_single_class_batch(self):
        np.testing.assert_array_equal(reward_auc_batch([0.3, 0.7], [1, 1]), [0, 0])

    def test_mixture(self):
        p, y = np.array([0.8, 0.3, 0.6]), np.array([1, 0, 0])
        r = compute_rewards(p, y, RewardConfig(0.7, 0.3))
        np.testing.assert_allclose(r, 0.7 * reward_bce(p, y) + 0.3 * reward_auc_batch(p, y))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(0.0, 0.0)
        with pytest.raises(ValueError):
            LossConfig(-0.1, 0.3)
        with pytest.raises(ValueError):
            FreezeConfig("thaw", "freeze")


class TestReinforce:
    def test_equal_rewards(self):
        loss, coef = reinforce_loss(np.array([-1.0, -2.0, -0.5]), np.full(3, 0.4))
        assert loss == 0.0 and np.all(coef == 0.0)

    def test_advantages(self):
        _, coef = reinforce_loss(np.array([-1.0, -2.0]), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(-coef * 2, [1.0, -1.0])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            reinforce_loss(np.array([-1.0]), np.array([1.0]))

    def test_nonfinite_reward(self):
        with pytest.raises(ValueError):
            reinforce_loss(np.array([-1.0, -1.0]), np.array([1.0, np.inf]))


def _forced_rollout(net, record_rng, n=8, tau=0.9):
    # zero-initialised biases put every step-1 pre-activation exactly on the
    # ReLU kink (the step-1 state input is all zeros); move them off it
    for p in net.parameters():
        if p.name.endswith("bias"):
            p.value[...] = 0.1 * record_rng.standard_normal(p.shape)
    X = [record_rng.standard_normal((n, d)) for d in (512, 17, 768)]
    src = lambda m, rows: X[m][rows]
    ro = rollout(net, src, n, tau, uniforms=record_rng.random((n, 3)))
    return src, forced_actions(ro.trajectories())


class TestTotalLoss:
    def test_reduces_to_pg(self, net, rng):
        src, forced = _forced_rollout(net, rng)
        ro = rollout(net, src, len(forced), 0.9, forced=forced)
        pred = classify_rollout(net.bank, ro)
        y = np.array([1, 0] * 4)
        lb = total_loss(ro, pred.logits, y, RewardConfig(), LossConfig(0.0, 0.0))
        assert lb.loss == lb.pg

    def test_deterministic_policy_zero_entropy(self, net, rng):
        src, _ = _forced_rollout(net, rng)
        for head, k in zip(net.policy.heads, (3, 4, 6)):
            head.weight.value[...] = 0.0
            head.bias.value[...] = np.r_[1e4, np.zeros(k - 1)]
        ro = rollout(net, src, 8, 1.0, greedy=True)
        lb = total_loss(ro, classify_rollout(net.bank, ro).logits, np.array([1, 0] * 4),
                        RewardConfig(), LossConfig())
        assert lb.entropy == 0.0

    @pytest.mark.parametrize("encoders", [True, False])
    def test_full_gradient(self, net, rng, encoders):
        src, forced = _forced_rollout(net, rng)
        y = np.array([1, 0, 0, 1, 0, 1, 0, 0])
        adv = rng.standard_normal(len(y))   # rewards are constants in the surrogate
        cfg = LossConfig(0.1, 0.3)
        params = net.policy.parameters() + (net.bank.parameters() if encoders
                                            else net.bank.classifier_parameters())

        def loss(backward):
            ro = rollout(net, src, len(forced), 0.9, forced=forced)
            pred = classify_rollout(net.bank, ro)
            lb = total_loss(ro, pred.logits, y, RewardConfig(), cfg, advantage_override=adv)
            if backward:
                loss_backward(net, ro, pred, lb, encoders=encoders, classifiers=True)
            return lb.loss
        assert grad_check(loss, params, max_entries=8, rng=rng) < 1e-4


class TestBalancedBatches:
    def test_exactly_ten_positives(self):
        y = np.r_[np.ones(150), np.zeros(2300)].astype(int)
        rng = np.random.default_rng(0)
        batches = []
        while len(batches) < 100:
            batches.extend(balanced_batches(y, 32, 0.3, rng))
        for b in batches[:100]:
            assert len(b) == 32 and y[b].sum() == 10

    def test_negatives_once_per_epoch(self):
        y = np.r_[np.ones(20), np.zeros(500)].astype(int)
        negs = np.concatenate([b[y[b] == 0] for b in balanced_batches(y, 32, 0.3)])
        assert len(negs) == len(set(negs.tolist())) == 500

    def test_both_classes(self):
        y = np.r_[np.ones(3), np.zeros(100)].astype(int)
        for b in balanced_batches(y, 32, 0.3):
            assert 0 < y[b].sum() < len(b)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            next(balanced_batches(np.ones(10, dtype=int)))


def separable_cohort(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.3).astype(int)
    d = rng.standard_normal(512)
    d /= np.linalg.norm(d)
    X_A = rng.standard_normal((n, 512)) + np.outer(np.where(y == 1, 4.0, -4.0), d)
    return Cohort([f"s{i}" for i in range(n)], X_A, rng.standard_normal((n, 17)),
                  rng.standard_normal((n, 768)), y)


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(SyntheticConfig(n_patients=500, prevalence=0.2, seed=3))


@pytest.fixture(scope="module")
def small_bank(small_cohort):
    sch = TrainSchedule(epochs=4, seed=3)
    sp = training_splits(small_cohort, sch)
    return pretrain_baselines(sp.fit, sp.val, sch)[0], sp


class TestPretraining:
    def test_separable_single_modality(self):
        c = separable_cohort()
        sp = training_splits(c, TrainSchedule(seed=0))
        sch = TrainSchedule(epochs=50, patience=5, seed=0)
        bank, metrics = pretrain_baselines(sp.fit, sp.val, sch)
        assert metrics[0].val_auc > 0.95 and metrics[0].epochs_run <= 50

    def test_early_stopping_window(self):
        c = separable_cohort(seed=1)
        sp = training_splits(c, TrainSchedule(seed=1))
        sch = TrainSchedule(epochs=60, patience=3, seed=1)
        _, metrics = pretrain_baselines(sp.fit, sp.val, sch)
        for m in metrics:
            assert m.epochs_run == 60 or m.epochs_run - 1 - m.best_epoch == 3

    def test_checkpoint_reproduces_val_auc(self, tmp_path, small_bank):
        bank, sp = small_bank
        path = tmp_path / "bank.ckpt"
        ckpt.save_bank(bank, path)
        back, _ = ckpt.load_bank(path)
        for k in range(15):
            a = bank.predict_encoded(k, bank.encode_all(sp.val.modalities))
            b = back.predict_encoded(k, back.encode_all(sp.val.modalities))
            assert auc(a, sp.val.y) == auc(b, sp.val.y) and np.array_equal(a, b)


class TestTrainAdaFuse:
    def _run(self, small_bank, freeze, **kw):
        bank, sp = small_bank
        sch = TrainSchedule(epochs=2, seed=3, warmup_epochs=0, **kw)
        return bank, train_adafuse(sp.policy, sp.val, bank, freeze, schedule=sch)

    def test_frozen_classifiers_unchanged(self, small_bank):
        bank, res = self._run(small_bank, FreezeConfig("train", "freeze"))
        for a, b in zip(bank.classifier_parameters(), res.net.bank.classifier_parameters()):
            assert np.array_equal(a.value, b.value)
        assert any(not np.array_equal(a.value, b.value) for a, b in
                   zip(bank.encoder_parameters(), res.net.bank.encoder_parameters()))

    def test_freeze_freeze_only_policy(self, small_bank):
        bank, res = self._run(small_bank, FreezeConfig("freeze", "freeze"))
        for a, b in zip(bank.parameters(), res.net.bank.parameters()):
            assert np.array_equal(a.value, b.value)
        fresh = type(res.net.policy)(np.random.default_rng(0))
        assert len(res.net.policy.parameters()) == len(fresh.parameters())

    def test_log_and_best(self, small_bank):
        _, res = self._run(small_bank, FreezeConfig())
        assert [e.epoch for e in res.log] == [0, 1]
        assert res.log[0].temperature == 1.5
        assert res.best_val_auc == max(e.val_auc for e in res.log)

    def test_warmup_longer_than_run_keeps_final(self, small_bank):
        bank, sp = small_bank
        sch = TrainSchedule(epochs=2, seed=3, warmup_epochs=10)
        res = train_adafuse(sp.policy, sp.val, bank, schedule=sch)
        assert res.best_epoch == 1
        p, _ = greedy_predict(res.net, sp.val)
        assert auc(p, sp.val.y) == res.best_val_auc

    def test_deterministic(self, small_bank):
        _, a = self._run(small_bank, FreezeConfig())
        _, b = self._run(small_bank, FreezeConfig())
        for x, y in zip(a.net.parameters(), b.net.parameters()):
            assert np.array_equal(x.value, y.value)


class TestSchedule:
    @pytest.mark.parametrize("kw", [dict(validation_fraction=0.6, policy_fraction=0.5),
                                    dict(policy_fraction=0.0), dict(warmup_epochs=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainSchedule(**kw)

    def test_splits_disjoint_cover(self, small_cohort):
        sp = training_splits(small_cohort, TrainSchedule(seed=5))
        ids = [set(c.ids) for c in (sp.fit, sp.policy, sp.val)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert len(ids[0] | ids[1] | ids[2]) == len(small_cohort)
        assert abs(len(sp.val) / len(small_cohort) - 0.2) < 0.01
        assert abs(len(sp.policy) / len(small_cohort) - 0.2) < 0.01
