
import numpy as np
import pytest
import torch

from tissuesim.env import EnvBatch
from tissuesim.errors import CheckpointError, ValidationError
from tissuesim.ppo import (
    ActorCritic, PPOConfig, TrainStats, compute_gae, evaluate, linear_schedule,
    load_checkpoint, ppo_update, save_checkpoint, train,
)
from conftest import build_slab_scene


class TestSchedule:
    def test_start_value(self):
        assert linear_schedule(2.5e-4, 0, 500_000) == 2.5e-4

    def test_end_value(self):
        assert linear_schedule(2.5e-4, 500_000, 500_000) == 0.0

    def test_midpoint(self):
        assert linear_schedule(2.5e-4, 250_000, 500_000) == pytest.approx(1.25e-4)

    def test_monotone(self):
        values = [linear_schedule(0.1, t, 100) for t in range(0, 101, 5)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            linear_schedule(1.0, -1, 10)
        with pytest.raises(ValidationError):
            linear_schedule(1.0, 11, 10)


def mc_return_oracle(rewards, gamma):
    """Brute-force discounted return of a terminal-ended trajectory."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class TestGAE:
    def test_single_terminal_step(self):
        adv, ret = compute_gae([1.0], [0.0], [0.0], [True], 0.995, 0.95)
        assert adv[0] == pytest.approx(1.0)
        assert ret[0] == pytest.approx(1.0)

    def test_two_step_hand_recursion(self):
        adv, ret = compute_gae([0.0, 1.0], [0.5, 0.5], [0.0], [False, True],
                               0.995, 0.95)
        assert adv[1] == pytest.approx(0.5, abs=1e-12)
        assert adv[0] == pytest.approx(0.470125, abs=1e-12)
        assert ret[0] == pytest.approx(0.970125, abs=1e-12)

    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(16)
        r = rng.normal(size=12)
        v = rng.normal(size=12)
        term = np.zeros(12, bool)
        boot = np.array([0.3])
        adv, _ = compute_gae(r, v, boot, term, 0.9, 0.0)
        nxt = np.append(v[1:], boot)
        assert np.allclose(adv, r + 0.9 * nxt - v, atol=1e-12)

    def test_lambda_one_equals_monte_carlo(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = rng.integers(2, 30)
            r = rng.normal(size=n)
            v = rng.normal(size=n)
            term = np.zeros(n, bool)
            term[-1] = True
            gamma = rng.uniform(0.9, 1.0)
            adv, ret = compute_gae(r, v, [0.0], term, gamma, 1.0)
            oracle = mc_return_oracle(r, gamma)
            assert np.abs(adv - (oracle - v)).max() < 1e-10
            assert np.abs(ret - oracle).max() < 1e-10

    def test_truncation_bootstraps_with_terminal_value(self):
        r = np.array([1.0, 1.0])
        v = np.array([0.0, 0.0])
        term = np.array([False, False])
        trunc = np.array([False, True])
        tv = np.array([0.0, 5.0])
        adv, _ = compute_gae(r, v, [9.9], term, 1.0, 1.0, truncated=trunc,
                             truncation_values=tv)
        # last step bootstraps from the truncation value, not the next rollout obs
        assert adv[1] == pytest.approx(1.0 + 5.0)
        assert adv[0] == pytest.approx(1.0 + adv[1])

    def test_episode_boundary_cuts_recursion(self):
        r = np.array([0.0, 7.0])
        v = np.zeros(2)
        term = np.array([True, True])
        adv, _ = compute_gae(r, v, [0.0], term, 0.99, 0.95)
        assert adv[0] == pytest.approx(0.0)
        assert adv[1] == pytest.approx(7.0)

    def test_batched_matches_per_env(self):
        rng = np.random.default_rng(18)
        t, n = 16, 3
        r = rng.normal(size=(t, n))
        v = rng.normal(size=(t, n))
        term = rng.random((t, n)) < 0.15
        boot = rng.normal(size=n)
        adv, ret = compute_gae(r, v, boot, term, 0.99, 0.9)
        for i in range(n):
            a1, r1 = compute_gae(r[:, i], v[:, i], [boot[i]], term[:, i], 0.99, 0.9)
            assert np.allclose(adv[:, i], a1, atol=1e-14)
            assert np.allclose(ret[:, i], r1, atol=1e-14)


def tiny_batch(model, n=64, ratio=1.0, advantage=1.0, seed=0):
    """Batch whose importance ratio and advantages are forced to known values."""
    g = torch.Generator().manual_seed(seed)
    obs = torch.randn(n, model.obs_dim, generator=g)
    actions = torch.randn(n, model.act_dim, generator=g)
    with torch.no_grad():
        log_probs, _, values = model.evaluate_actions(obs, actions)
    old_log_probs = log_probs - float(np.log(ratio))
    advantages = torch.full((n,), float(advantage))
    returns = values.detach() + advantages
    return (obs, actions, old_log_probs, values.detach(), advantages, returns)


class TestPPOUpdate:
    def make(self, **kw):
        cfg = PPOConfig(steps_before_update=64, minibatch_size=64, epochs=1,
                        normalize_advantages=False, **kw)
        torch.manual_seed(0)
        model = ActorCritic(6, 3)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        return cfg, model, optimizer

    def test_unit_ratio_surrogate_is_mean_advantage(self):
        cfg, model, optimizer = self.make()
        batch = tiny_batch(model, ratio=1.0, advantage=2.0)
        stats = ppo_update(model, optimizer, batch, 0.1, 1e-9, cfg,
                           torch.Generator().manual_seed(0))
        assert stats["policy_loss"] == pytest.approx(-2.0, abs=1e-5)

    def test_clip_engages_above_ratio(self):
        cfg, model, optimizer = self.make()
        batch = tiny_batch(model, ratio=1.3, advantage=1.0)
        stats = ppo_update(model, optimizer, batch, 0.1, 1e-9, cfg,
                           torch.Generator().manual_seed(0))
        # min(1.3 * A, 1.1 * A) with A = 1 selects the clipped branch
        assert stats["policy_loss"] == pytest.approx(-1.1, abs=1e-4)

    def test_entropy_contributes_nothing_at_zero_coefficient(self):
        cfg, model, optimizer = self.make()
        assert cfg.entropy_coef == 0.0
        batch = tiny_batch(model, ratio=1.0, advantage=0.0)
        log_std_before = model.log_std.detach().clone()
        ppo_update(model, optimizer, batch, 0.1, 1e-3, cfg,
                   torch.Generator().manual_seed(0))
        # zero advantage kills the surrogate; only an entropy term could move log_std
        assert torch.equal(model.log_std.detach(), log_std_before)

    def test_post_clip_gradient_norm(self):
        cfg, model, optimizer = self.make()
        batch = tiny_batch(model, ratio=1.0, advantage=50.0)
        ppo_update(model, optimizer, batch, 0.1, 1e-3, cfg,
                   torch.Generator().manual_seed(0))
        total = 0.0
        for p in model.parameters():
            if p.grad is not None:
                total += float((p.grad ** 2).sum())
        assert np.sqrt(total) <= cfg.max_grad_norm * (1.0 + 1e-6)

    def test_nonfinite_loss_aborts(self):
        cfg, model, optimizer = self.make()
        batch = list(tiny_batch(model))
        batch[4] = torch.full_like(batch[4], np.inf)
        batch[5] = batch[3] + batch[4]
        with pytest.raises(RuntimeError, match="non-finite"):
            ppo_update(model, optimizer, tuple(batch), 0.1, 1e-3, cfg,
                       torch.Generator().manual_seed(0))


class TestConfig:
    def test_hyperparameter_defaults(self):
        cfg = PPOConfig()
        assert cfg.total_steps == 500_000
        assert cfg.steps_before_update == 1024
        assert cfg.minibatch_size == 256
        assert cfg.epochs == 4
        assert cfg.gamma == 0.995
        assert cfg.gae_lambda == 0.95
        assert cfg.clip_range == 0.1
        assert cfg.value_clip == 0.2
        assert cfg.value_coef == 0.5
        assert cfg.entropy_coef == 0.0
        assert cfg.max_grad_norm == 0.5
        assert cfg.learning_rate == 2.5e-4

    def test_validation(self):
        with pytest.raises(ValidationError):
            PPOConfig(steps_before_update=1000, minibatch_size=256).validate()
        with pytest.raises(ValidationError):
            PPOConfig(gamma=1.5).validate()

    def test_update_count_and_horizon_arithmetic(self):
        cfg = PPOConfig()
        assert cfg.total_steps // cfg.steps_before_update == 488
        assert cfg.steps_before_update // 1 == 1024   # single env rollout horizon
        assert cfg.steps_before_update // 32 == 32    # 32-env rollout horizon


def short_train_config(**kw):
    base = dict(total_steps=1024, steps_before_update=256, minibatch_size=64,
                epochs=2, seed=0)
    base.update(kw)
    return PPOConfig(**base)


class TestTrain:
    def test_horizon_split(self):
        scene = build_slab_scene()
        env = EnvBatch(scene, num_envs=2, seed=0)
        stats = train(env, short_train_config())
        assert stats.horizon == 128
        assert stats.rows[-1]["env_steps"] == 1024

    def test_uneven_split_rejected(self):
        env = EnvBatch(build_slab_scene(), num_envs=3, seed=0)
        with pytest.raises(ValidationError):
            train(env, short_train_config())

    def test_schedules_logged_monotone(self):
        env = EnvBatch(build_slab_scene(), num_envs=2, seed=0)
        stats = train(env, short_train_config())
        lrs = [row["lr"] for row in stats.rows]
        clips = [row["clip_range"] for row in stats.rows]
        assert lrs[0] == pytest.approx(2.5e-4)
        assert clips[0] == pytest.approx(0.1)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert all(b <= a for a, b in zip(clips, clips[1:]))

    def test_deterministic_training(self):
        scene = build_slab_scene()

        def run():
            env = EnvBatch(scene, num_envs=2, seed=0)
            stats = train(env, short_train_config(total_steps=2048))
            state = {k: v.clone() for k, v in stats.model.state_dict().items()}
            return stats, state

        sa, pa = run()
        sb, pb = run()
        assert all(torch.equal(pa[k], pb[k]) for k in pa)
        skip = {"sps"}
        for ra, rb in zip(sa.rows, sb.rows):
            for col in TrainStats.columns:
                if col in skip:
                    continue
                assert ra[col] == rb[col] or (np.isnan(ra[col]) and np.isnan(rb[col]))

    def test_outputs_written(self, tmp_path):
        env = EnvBatch(build_slab_scene(), num_envs=2, seed=0)
        train(env, short_train_config(), out_dir=str(tmp_path))
        assert (tmp_path / "train_log.csv").exists()
        assert (tmp_path / "reward_curve.csv").exists()
        assert (tmp_path / "policy.pt").exists()
        stats = TrainStats.from_csv(str(tmp_path / "train_log.csv"))
        assert stats.horizon == 128
        assert stats.num_envs == 2
        assert len(stats.rows) == 4

    def test_stats_csv_round_trip(self, tmp_path):
        env = EnvBatch(build_slab_scene(), num_envs=2, seed=0)
        stats = train(env, short_train_config())
        path = tmp_path / "log.csv"
        stats.horizon, stats.num_envs = 128, 2
        stats.to_csv(str(path))
        again = TrainStats.from_csv(str(path))
        for ra, rb in zip(stats.rows, again.rows):
            for col in TrainStats.columns:
                same = ra[col] == rb[col]
                both_nan = isinstance(ra[col], float) and np.isnan(ra[col]) and np.isnan(rb[col])
                assert same or both_nan


class TestEvaluateAndCheckpoint:
    def test_checkpoint_round_trip(self, tmp_path):
        torch.manual_seed(1)
        model = ActorCritic(6, 3)
        path = tmp_path / "p.pt"
        save_checkpoint(str(path), model, PPOConfig())
        loaded, payload = load_checkpoint(str(path), expect_obs_dim=6, expect_act_dim=3)
        obs = torch.randn(4, 6)
        assert torch.equal(model.act_greedy(obs), loaded.act_greedy(obs))
        assert payload["config"]["gamma"] == 0.995

    def test_dim_mismatch_named(self, tmp_path):
        torch.manual_seed(1)
        model = ActorCritic(4, 2)
        path = tmp_path / "p.pt"
        save_checkpoint(str(path), model)
        with pytest.raises(CheckpointError, match="expected 6.*has 4"):
            load_checkpoint(str(path), expect_obs_dim=6)

    def test_missing_checkpoint(self):
        with pytest.raises(CheckpointError):
            load_checkpoint("nope.pt")

    def test_evaluate_counts_episodes(self):
        mesh, rest, cfg = build_slab_scene()
        cfg.max_episode_steps = 5
        env = EnvBatch((mesh, rest, cfg), num_envs=2, seed=0)
        torch.manual_seed(0)
        model = ActorCritic(6, 3)
        result = evaluate(env, model, episodes=6, seed=0)
        assert 0.0 <= result["success_rate"] <= 1.0
        assert result["mean_length"] <= 5.0

    def test_evaluate_validates_episodes(self):
        env = EnvBatch(build_slab_scene(), num_envs=1, seed=0)
        torch.manual_seed(0)
        with pytest.raises(ValidationError):
            evaluate(env, ActorCritic(6, 3), episodes=0)
