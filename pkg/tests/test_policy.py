import numpy as np
import pytest

from adafuse.models import COMBOS, Combo, combo_index
from adafuse.numerics import softmax_tau
from adafuse.policy import (STATE_INPUT_DIM, Trajectory, anneal_temperature, combo_distribution,
                            compute_state, enumerate_trajectories, forced_actions, greedy_decode,
                            head_logits, read_trajectories, record_source, resolve_combo, rollout,
                            rollout_flops, sample_trajectory, write_trajectories)


def set_heads(net, b1=None, b2=None, b3=None):
    """Make every head state-independent with the given biases."""
    for head, b in zip(net.policy.heads, (b1, b2, b3)):
        head.weight.value[...] = 0.0
        head.bias.value[...] = 0.0 if b is None else b


def batch_source(record, calls=None):
    src = record_source(record)

    def source(m, rows):
        if calls is not None:
            calls.append(m)
        return src(m, rows)
    return source


class TestState:
    def test_empty_mask_ignores_features(self, net, rng):
        s = compute_state(net.policy, None, None, None, [0, 0, 0])
        np.testing.assert_array_equal(s, net.policy.state_encoder(np.zeros(STATE_INPUT_DIM)))

    def test_unselected_codes_ignored(self, net, rng):
        hA = rng.standard_normal(32)
        s1 = compute_state(net.policy, hA, rng.standard_normal(32), None, [1, 0, 0])
        s2 = compute_state(net.policy, hA, rng.standard_normal(32), None, [1, 0, 0])
        np.testing.assert_array_equal(s1, s2)

    def test_mask_channel_matters(self, net, rng):
        hA = np.abs(rng.standard_normal(32))
        s1 = compute_state(net.policy, hA, None, None, [1, 0, 0])
        s2 = compute_state(net.policy, hA, np.zeros(32), None, [1, 1, 0])
        assert not np.array_equal(s1, s2)

    def test_selected_needs_code(self, net):
        with pytest.raises(ValueError):
            compute_state(net.policy, None, None, None, [1, 0, 0])


class TestHeads:
    def test_step2_masks_chosen(self, net, rng):
        s = rng.standard_normal(64)
        p = softmax_tau(head_logits(net.policy, 2, s, [1, 0, 0]))
        assert p[1] == 0.0 and abs(p.sum() - 1) < 1e-15

    def test_uniform_step1(self, net, record):
        set_heads(net)
        s = compute_state(net.policy, None, None, None, [0, 0, 0])
        np.testing.assert_allclose(softmax_tau(head_logits(net.policy, 1, s, [0, 0, 0])), [1 / 3] * 3)
        ro = rollout(net, batch_source(record), 30_000, 1.0,
                     uniforms=np.random.default_rng(0).random((30_000, 3)))
        freq = np.bincount(ro.actions[:, 0], minlength=3) / 30_000
        assert np.abs(freq - 1 / 3).max() < 0.01

    def test_step3_sums_to_one(self, net, rng):
        p = softmax_tau(head_logits(net.policy, 3, rng.standard_normal(64), [1, 1, 0]))
        assert p.shape == (6,) and abs(p.sum() - 1) < 1e-12

    def test_step3_no_third_available(self):
        from adafuse.policy import action_mask
        m = action_mask(2, np.array([[1.0, 0.0, 1.0]]), available=[True, False, True])
        assert np.all(np.isneginf(m[0, 3:])) and np.all(m[0, :3] == 0)

    def test_bad_step(self, net, rng):
        with pytest.raises(ValueError):
            head_logits(net.policy, 4, rng.standard_normal(64), [0, 0, 0])


class TestAnneal:
    @pytest.mark.parametrize("epoch,tau", [(0, 1.5), (100, 0.3), (50, 0.9), (150, 0.3)])
    def test_schedule(self, epoch, tau):
        assert anneal_temperature(epoch) == pytest.approx(tau, abs=1e-15)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            anneal_temperature(-1)


class TestResolve:
    def test_single_stop(self):
        assert resolve_combo(1, 0) == Combo.parse("B")

    def test_all_leaves(self):
        names = set()
        for a1 in range(3):
            names.add(resolve_combo(a1, 0).name)
            for a2 in range(1, 4):
                if a2 - 1 == a1:
                    with pytest.raises(ValueError):
                        resolve_combo(a1, a2, 0)
                    continue
                for a3 in range(6):
                    names.add(resolve_combo(a1, a2, a3).name)
        assert names == {c.name for c in COMBOS}

    def test_stop_then_third(self):
        with pytest.raises(ValueError):
            resolve_combo(0, 0, 1)


class TestRollout:
    def test_forced_reproduces_every_combo(self, net, record):
        leaves = [t for t, _ in enumerate_trajectories(net, record)]
        ro = rollout(net, batch_source(record), len(leaves), forced=forced_actions(leaves))
        assert [COMBOS[k] for k in ro.combos] == [t.combo for t in leaves]

    @pytest.mark.parametrize("name", [c.name for c in COMBOS])
    def test_infinite_logits_force_combo(self, net, record, name):
        target = next(t for t, _ in enumerate_trajectories(net, record) if t.combo.name == name)
        biases = [np.full(k, -1e6) for k in (3, 4, 6)]
        a = target.actions
        biases[0][a[0]] = 0.0
        biases[1][a[1]] = 0.0
        if len(a) == 3:
            biases[2][a[2]] = 0.0
        set_heads(net, *biases)
        assert greedy_decode(net, record).combo.name == name
        t = sample_trajectory(net, record, 1.0, np.random.default_rng(0))
        assert t.combo.name == name

    def test_greedy_repeatable(self, net, record):
        assert greedy_decode(net, record).actions == greedy_decode(net, record).actions

    def test_greedy_is_mode_with_margins(self, net, record):
        set_heads(net, [0.0, 3.0, 0.5], [-1.0, 0.0, 0.2, 3.5], [0.0, 1.0, 0.0, 0.0, 4.0, 0.0])
        leaves = enumerate_trajectories(net, record)
        mode = max(leaves, key=lambda lp: lp[1])[0]
        assert greedy_decode(net, record).actions == mode.actions

    def test_stop_encodes_once(self, net, record):
        set_heads(net, [5.0, 0.0, 0.0], [9.0, 0.0, 0.0, 0.0])
        calls = []
        ro = rollout(net, batch_source(record, calls), 1, greedy=True)
        assert calls == [0] and len(ro.encodings) == 1
        assert COMBOS[ro.combos[0]].name == "A"

    def test_lazy_only_selected(self, net, rng):
        X = [rng.standard_normal((50, d)) for d in (512, 17, 768)]
        seen = {0: set(), 1: set(), 2: set()}

        def source(m, rows):
            seen[m].update(rows.tolist())
            return X[m][rows]
        ro = rollout(net, source, 50, 1.0, uniforms=rng.random((50, 3)))
        for m in range(3):
            assert seen[m] == set(np.flatnonzero(ro.mask[:, m]).tolist())

    def test_unavailable_never_chosen(self, net, record):
        ro = rollout(net, batch_source(record), 2000, 1.5,
                     uniforms=np.random.default_rng(1).random((2000, 3)),
                     available=[True, True, False])
        assert ro.mask[:, 2].sum() == 0

    def test_flops_single_path(self, net, record):
        set_heads(net, [0.0, 5.0, 0.0], [9.0, 0.0, 0.0, 0.0])
        ro = rollout(net, batch_source(record), 1, greedy=True)
        pol = net.policy
        expected = (net.bank.encoder_flops(1) + pol.step_flops(0) + pol.step_flops(1)
                    + net.bank.classifiers[1].flops())
        assert rollout_flops(net, ro)[0] == expected

    def test_needs_sampling_source(self, net, record):
        with pytest.raises(ValueError):
            rollout(net, batch_source(record), 1)


class TestEnumeration:
    def test_total_probability(self, net, record):
        leaves = enumerate_trajectories(net, record, tau=0.7)
        assert abs(sum(p for _, p in leaves) - 1.0) < 1e-10

    def test_uniform_heads_branches(self, net, record):
        set_heads(net)
        leaves = enumerate_trajectories(net, record)
        for a1 in range(3):
            assert sum(p for t, p in leaves if t.actions[0] == a1) == pytest.approx(1 / 3, abs=1e-14)

    def test_distinct_valid_combos(self, net, record):
        leaves = enumerate_trajectories(net, record)
        combos = {t.combo for t, _ in leaves}
        assert len(leaves) == 3 * (1 + 2 * 6)
        assert len(combos) <= 15 and all(c in COMBOS for c in combos)
        dist = combo_distribution(leaves)
        assert abs(dist.sum() - 1) < 1e-12

    def test_log_probs_consistent(self, net, record):
        for t, p in enumerate_trajectories(net, record, tau=1.3):
            assert np.exp(t.log_prob) == pytest.approx(p, rel=1e-12)

    def test_sampler_matches_leaf_log_prob(self, net, record):
        leaves = enumerate_trajectories(net, record, tau=0.8)
        ro = rollout(net, batch_source(record), len(leaves), 0.8,
                     forced=forced_actions([t for t, _ in leaves]))
        np.testing.assert_allclose(np.exp(ro.log_prob), [p for _, p in leaves], rtol=1e-12)


def test_trajectory_jsonl_round_trip(tmp_path, net, record):
    trajs = [t for t, _ in enumerate_trajectories(net, record)]
    path = tmp_path / "t.jsonl"
    write_trajectories(trajs, path)
    back = read_trajectories(path)
    assert [(t.actions, t.combo, t.patient_id) for t in back] == \
        [(t.actions, t.combo, t.patient_id) for t in trajs]
    assert back[5].log_prob == pytest.approx(trajs[5].log_prob, rel=1e-15)
    assert path.read_text().splitlines()[0].startswith('{"id": "r0", "actions": [0, 0]')
