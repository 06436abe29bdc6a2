import math

import numpy as np
import pytest

from anoquery import policy
from anoquery.policy import (
    AdamState,
    ModelFormatError,
    PolicyModel,
    PpoBatch,
    PpoHyper,
    adam_step,
    backward,
    clip_grad_norm,
    forward,
    forward_logp,
    init_model,
    load_model,
    ppo_loss,
    save_model,
    zero_model,
)


def random_model(rng, n_inputs=6, hidden=(4, 4), scale=0.5):
    h1, h2 = hidden
    return PolicyModel(
        W1=rng.normal(0, scale, (n_inputs, h1)),
        b1=rng.normal(0, scale, h1),
        W2=rng.normal(0, scale, (h1, h2)),
        b2=rng.normal(0, scale, h2),
        Wpi=rng.normal(0, scale, (h2, 2)),
        bpi=rng.normal(0, scale, 2),
        Wv=rng.normal(0, scale, (h2, 1)),
        bv=rng.normal(0, scale, 1),
    )


def random_batch(rng, model, size=8):
    states = rng.normal(0, 2.0, (size, model.n_inputs))
    actions = rng.integers(0, 2, size)
    _, logp, _ = forward_logp(model, states)
    old = logp[np.arange(size), actions] + rng.normal(0, 0.3, size)
    adv = rng.normal(0, 1.5, size)
    vt = rng.normal(0, 1.0, size)
    return PpoBatch(states, actions, old, adv, vt)


def fd_gradient(model, batch, h, name, index, step=1e-5):
    """Central finite difference of ppo_loss along one coordinate."""
    p = getattr(model, name)
    orig = p.flat[index]
    p.flat[index] = orig + step
    up, _ = ppo_loss(model, batch, h)
    p.flat[index] = orig - step
    down, _ = ppo_loss(model, batch, h)
    p.flat[index] = orig
    return (up - down) / (2 * step)


class TestForward:
    def test_zero_model_uniform(self):
        m = zero_model()
        probs, value = forward(m, np.zeros(6))
        np.testing.assert_array_equal(probs, [0.5, 0.5])
        assert value == 0.0
        probs, value = forward(m, np.random.default_rng(0).normal(size=6))
        np.testing.assert_array_equal(probs, [0.5, 0.5])

    def test_crafted_logits_softmax(self):
        # zero trunk, head bias (ln 3, 0) -> probs (0.75, 0.25)
        m = zero_model()
        m.bpi[:] = [math.log(3.0), 0.0]
        probs, _ = forward(m, np.ones(6))
        np.testing.assert_allclose(probs, [0.75, 0.25], atol=1e-15)

    def test_batch_equals_singles_bitwise(self):
        rng = np.random.default_rng(1)
        m = random_model(rng, hidden=(64, 64))
        S = rng.normal(size=(3, 6))
        probs_b, vals_b = forward(m, S)
        for i in range(3):
            probs_s, val_s = forward(m, S[i])
            assert np.array_equal(probs_b[i], probs_s)
            assert vals_b[i] == val_s

    def test_large_batch_equals_singles_bitwise(self):
        rng = np.random.default_rng(2)
        m = random_model(rng, hidden=(64, 64))
        S = rng.normal(size=(301, 6))
        probs_b, _ = forward(m, S)
        for i in (0, 63, 64, 150, 300):
            probs_s, _ = forward(m, S[i])
            assert np.array_equal(probs_b[i], probs_s)

    def test_probs_sum_to_one_strictly_positive(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = random_model(rng, hidden=(8, 8), scale=1.0)
            probs, _ = forward(m, rng.normal(0, 3.0, 6))
            assert abs(probs.sum() - 1.0) < 1e-12
            assert (probs > 0).all()

    def test_rejects_non_finite(self):
        m = zero_model()
        with pytest.raises(ValueError, match="non-finite"):
            forward(m, np.array([1.0, np.nan, 0, 0, 0, 0]))

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError, match="width"):
            forward(zero_model(), np.zeros(5))


class TestPpoLoss:
    def test_clip_arithmetic_positive_advantage(self):
        # r = 1.3, eps = 0.2, A = 2 -> min(2.6, 2.4) = 2.4
        r, eps, A = 1.3, 0.2, 2.0
        assert min(r * A, np.clip(r, 1 - eps, 1 + eps) * A) == pytest.approx(2.4)

    def test_clip_arithmetic_negative_advantage(self):
        # r = 0.7, eps = 0.2, A = -1 -> min(-0.7, -0.8) = -0.8
        r, eps, A = 0.7, 0.2, -1.0
        assert min(r * A, np.clip(r, 1 - eps, 1 + eps) * A) == pytest.approx(-0.8)

    def test_identity_case_reduces_to_entropy(self):
        # theta = theta_old, A = 0, V = V_target: only the entropy term is
        # left, and a zero model is exactly uniform with entropy ln 2
        m = zero_model()
        h = PpoHyper()
        states = np.random.default_rng(4).normal(size=(5, 6))
        _, logp, values = forward_logp(m, states)
        actions = np.array([0, 1, 0, 1, 0])
        batch = PpoBatch(
            states, actions, logp[np.arange(5), actions], np.zeros(5), values
        )
        loss, diag = ppo_loss(m, batch, h)
        assert loss == pytest.approx(-h.c2 * math.log(2.0), abs=1e-12)
        assert diag["entropy"] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_ratio_one_at_old_policy(self):
        rng = np.random.default_rng(5)
        m = random_model(rng)
        states = rng.normal(size=(7, 6))
        _, logp, values = forward_logp(m, states)
        actions = rng.integers(0, 2, 7)
        batch = PpoBatch(
            states, actions, logp[np.arange(7), actions], rng.normal(size=7), values
        )
        loss, diag = ppo_loss(m, batch, h=PpoHyper())
        # at theta_old the clip is inactive: loss = -mean(A) + entropy term
        expected = -batch.advantages.mean() - 0.01 * diag["entropy"]
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ppo_loss(zero_model(), PpoBatch(
                np.zeros((0, 6)), np.zeros(0, dtype=int), np.zeros(0), np.zeros(0), np.zeros(0)
            ), PpoHyper())

    def test_entropy_bounded_by_ln2(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            m = random_model(rng, scale=1.5)
            probs, _ = forward(m, rng.normal(size=(4, 6)))
            ent = -(probs * np.log(probs)).sum(axis=1)
            assert (ent <= math.log(2.0) + 1e-12).all()


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = PpoHyper()
        for trial in range(5):
            m = random_model(rng)
            batch = random_batch(rng, m)
            grads, _, _ = backward(m, batch, h)
            for name, g in grads.items():
                for index in range(g.size):
                    fd = fd_gradient(m, batch, h, name, index)
                    denom = max(abs(fd), abs(g.flat[index]), 1e-2)
                    assert abs(g.flat[index] - fd) / denom <= 1e-4, (
                        f"trial {trial} {name}[{index}]: analytic {g.flat[index]}, fd {fd}"
                    )

    def test_zero_advantage_zero_value_error_leaves_entropy_only(self):
        rng = np.random.default_rng(8)
        m = random_model(rng)
        states = rng.normal(size=(6, 6))
        _, logp, values = forward_logp(m, states)
        actions = rng.integers(0, 2, 6)
        batch = PpoBatch(states, actions, logp[np.arange(6), actions], np.zeros(6), values)
        grads, _, _ = backward(m, batch, PpoHyper())
        ent_only = backward(m, batch, PpoHyper(c1=0.0))[0]
        # value gradient contributes nothing when V == V_target
        for name in grads:
            np.testing.assert_allclose(grads[name], ent_only[name], atol=1e-15)

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(9)
        m = random_model(rng)
        batch = random_batch(rng, m, size=8)
        dup = PpoBatch(
            np.repeat(batch.states, 2, axis=0),
            np.repeat(batch.actions, 2),
            np.repeat(batch.old_logprobs, 2),
            np.repeat(batch.advantages, 2),
            np.repeat(batch.value_targets, 2),
        )
        g1, _, _ = backward(m, batch, PpoHyper())
        g2, _, _ = backward(m, dup, PpoHyper())
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-12, atol=1e-15)

    def test_loss_value_matches_ppo_loss(self):
        rng = np.random.default_rng(10)
        m = random_model(rng)
        batch = random_batch(rng, m)
        _, loss_b, _ = backward(m, batch, PpoHyper())
        loss_f, _ = ppo_loss(m, batch, PpoHyper())
        assert loss_b == loss_f


class TestClipGradNorm:
    def test_noop_below_threshold(self):
        grads = {"a": np.array([0.3]), "b": np.array([0.4])}
        norm = clip_grad_norm(grads, max_norm=1.0)
        assert norm == pytest.approx(0.5)
        assert grads["a"][0] == 0.3

    def test_scales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_grad_norm(grads, max_norm=0.5)
        assert norm == pytest.approx(5.0)
        total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        assert total == pytest.approx(0.5)


class TestAdam:
    def test_zero_gradient_no_change(self):
        m = init_model(0)
        st = AdamState.for_model(m)
        before = {k: v.copy() for k, v in m.params().items()}
        adam_step(m, {k: np.zeros_like(v) for k, v in m.params().items()}, st, lr=0.1)
        for k in before:
            np.testing.assert_array_equal(getattr(m, k), before[k])

    def test_first_step_magnitude(self):
        m = zero_model(hidden=(2, 2))
        st = AdamState.for_model(m)
        grads = {k: np.zeros_like(v) for k, v in m.params().items()}
        grads["bv"] = np.array([3.0])
        adam_step(m, grads, st, lr=2.5e-4)
        # bias-corrected first step is ~ lr * g/(|g| + eps) ~ lr
        assert m.bv[0] == pytest.approx(-2.5e-4, rel=1e-3)

    def test_two_step_scalar_quadratic_matches_oracle(self):
        # frozen from a hand-rolled scalar Adam minimizing x^2 from x0 = 1
        # with lr 0.1: [0.9000004999975, 0.8004132482111623]
        m = zero_model(hidden=(2, 2))
        m.bv[0] = 1.0
        st = AdamState.for_model(m)
        traj = []
        for _ in range(2):
            grads = {k: np.zeros_like(v) for k, v in m.params().items()}
            grads["bv"] = np.array([2.0 * m.bv[0]])
            adam_step(m, grads, st, lr=0.1)
            traj.append(float(m.bv[0]))
        assert traj[0] == pytest.approx(0.9000004999975, abs=1e-12)
        assert traj[1] == pytest.approx(0.8004132482111623, abs=1e-12)


class TestSaveLoad:
    def test_round_trip_bitwise(self, tmp_path):
        m = init_model(17)
        path = tmp_path / "m.model"
        save_model(m, path)
        back = load_model(path)
        for k, v in m.params().items():
            np.testing.assert_array_equal(getattr(back, k), v)
        s = np.random.default_rng(0).normal(size=6)
        p1, v1 = forward(m, s)
        p2, v2 = forward(back, s)
        assert np.array_equal(p1, p2) and v1 == v2

    def test_save_load_save_identical_bytes(self, tmp_path):
        m = init_model(18)
        save_model(m, tmp_path / "a")
        save_model(load_model(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_wrong_version_rejected(self, tmp_path):
        m = init_model(19)
        path = tmp_path / "m.model"
        save_model(m, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_truncated_rejected(self, tmp_path):
        m = init_model(20)
        path = tmp_path / "m.model"
        save_model(m, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.model"
        path.write_bytes(b"nonsense")
        with pytest.raises(ModelFormatError, match="not a policy model"):
            load_model(path)


def test_init_model_policy_head_small():
    m = init_model(0)
    assert np.abs(m.Wpi).max() < 0.01
    assert np.abs(m.W1).max() > 0.01
    probs, _ = forward(m, np.random.default_rng(1).normal(size=6))
    assert abs(probs[1] - 0.5) < 0.05  # near-uniform initial policy
