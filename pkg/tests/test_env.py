import numpy as np
import pytest

from tissuesim.env import EnvBatch, EnvConfig, compute_reward
from tissuesim.errors import ValidationError
from conftest import build_slab_scene


@pytest.fixture()
def env2():
    return EnvBatch(build_slab_scene(), num_envs=2, seed=0)


class TestReward:
    def cfg(self):
        return EnvConfig()

    def test_zero_sum_case(self):
        assert compute_reward(0.010, -0.001, 0, self.cfg()) == pytest.approx(0.0, abs=1e-15)

    def test_success_case(self):
        r = compute_reward(0.002, -0.001, 1, self.cfg())
        assert r == pytest.approx(100.008, rel=1e-12)

    def test_pure_success(self):
        assert compute_reward(0.0, 0.0, 1, self.cfg()) == 100.0

    def test_scaling(self):
        cfg = EnvConfig(reward_scale=0.5)
        assert compute_reward(0.0, 0.0, 1, cfg) == 50.0

    def test_broadcast(self):
        r = compute_reward(np.array([0.01, 0.0]), np.zeros(2), np.array([0, 1]), self.cfg())
        assert np.allclose(r, [-0.01, 100.0])


class TestReset:
    def test_start_pose_observed(self, env2):
        obs = env2.reset(seed=0)
        cfg = env2.config
        lo, hi = cfg.workspace_low, cfg.workspace_high
        tip = lo + (obs[0, 0:3] + 1.0) / 2.0 * (hi - lo)
        assert np.allclose(tip, cfg.start, atol=1e-12)
        target = lo + (obs[0, 3:6] + 1.0) / 2.0 * (hi - lo)
        assert np.allclose(target, cfg.target, atol=1e-12)

    def test_same_seed_same_obs(self, env2):
        a = env2.reset(seed=3)
        b = env2.reset(seed=3)
        assert np.array_equal(a, b)

    def test_partial_reset_leaves_others(self, env2):
        env2.reset(seed=0)
        actions = np.tile([[0.5, -0.2, 0.1]], (2, 1))
        env2.step(actions)
        x1 = env2.sim.x[1].copy()
        drag1 = env2.sim.tool.drag_points()[1].copy()
        env2.reset(indices=[0])
        assert np.array_equal(env2.sim.x[1], x1)
        assert np.array_equal(env2.sim.tool.drag_points()[1], drag1)
        assert np.allclose(env2.sim.x[0], env2.sim.mesh.positions_rest)


class TestStep:
    def test_zero_action_reward(self, env2):
        env2.reset(seed=0)
        obs, reward, term, trunc, info = env2.step(np.zeros((2, 3)))
        l = info["distance"]
        assert np.allclose(reward, env2.config.w_distance * l, atol=1e-12)
        assert not term.any() and not trunc.any()

    def test_success_terminates_with_bonus(self, env2):
        env2.reset(seed=0)
        while True:
            drag = env2.sim.tool.drag_points()
            step_vec = (env2.config.target[None, :] - drag) / env2.config.action_scale
            obs, reward, term, trunc, info = env2.step(np.clip(step_vec, -1, 1))
            if term.any():
                assert np.all(term)
                assert np.all(reward > 90.0)
                assert info["success"].all()
                break
            assert not trunc.any(), "should reach target before truncation"

    def test_truncation_at_limit(self):
        mesh, rest, cfg = build_slab_scene()
        cfg.max_episode_steps = 3
        env = EnvBatch((mesh, rest, cfg), num_envs=1, seed=0)
        env.reset(seed=0)
        for i in range(2):
            _, _, term, trunc, _ = env.step(np.zeros((1, 3)))
            assert not trunc[0]
        _, _, term, trunc, info = env.step(np.zeros((1, 3)))
        assert trunc[0] and not term[0]
        assert info["episode_length"][0] == 3

    def test_episode_length_bounded(self, env2):
        env2.reset(seed=0)
        rng = np.random.default_rng(0)
        for _ in range(450):
            _, _, _, _, info = env2.step(rng.uniform(-1, 1, (2, 3)))
            assert np.all(info["episode_length"] <= env2.config.max_episode_steps)

    def test_autoreset_returns_fresh_obs(self):
        mesh, rest, cfg = build_slab_scene()
        cfg.max_episode_steps = 2
        env = EnvBatch((mesh, rest, cfg), num_envs=1, seed=0)
        first = env.reset(seed=0)
        env.step(np.full((1, 3), 0.3))
        obs, _, _, trunc, info = env.step(np.full((1, 3), 0.3))
        assert trunc[0]
        assert np.array_equal(obs, first)
        assert info["final_observation"] is not None
        assert not np.array_equal(info["final_observation"][0], first[0])

    def test_reward_identity_over_rollout(self, env2):
        env2.reset(seed=0)
        rng = np.random.default_rng(1)
        l_prev = env2._l_prev.copy()
        for _ in range(60):
            _, reward, term, trunc, info = env2.step(rng.uniform(-1, 1, (2, 3)))
            l = info["distance"]
            s = info["success"].astype(float)
            expected = (env2.config.w_distance * l
                        + env2.config.w_delta * (l - l_prev)
                        + env2.config.w_success * s)
            assert np.array_equal(reward, expected)
            done = term | trunc
            l_prev = np.where(done, env2._l_prev, l)

    def test_success_threshold_is_exclusive(self):
        cfg = EnvConfig()
        at = compute_reward(cfg.success_threshold, 0.0, 0, cfg)
        below = compute_reward(np.nextafter(cfg.success_threshold, 0.0), 0.0, 1, cfg)
        assert at < 0.0 < below

    def test_observation_within_bounds(self, env2):
        env2.reset(seed=0)
        rng = np.random.default_rng(2)
        for _ in range(100):
            obs, _, _, _, _ = env2.step(rng.uniform(-1, 1, (2, 3)))
            assert np.all(obs >= -1.0 - 1e-12) and np.all(obs <= 1.0 + 1e-12)
            assert np.array_equal(obs[0, 3:6], obs[1, 3:6])

    def test_action_validation(self, env2):
        env2.reset(seed=0)
        with pytest.raises(ValidationError):
            env2.step(np.zeros((3, 3)))
        with pytest.raises(ValidationError):
            env2.step(np.full((2, 3), np.nan))

    def test_step_before_reset(self):
        env = EnvBatch(build_slab_scene(), num_envs=1)
        with pytest.raises(RuntimeError):
            env.step(np.zeros((1, 3)))

    def test_divergence_truncates_flags_and_resets(self):
        env = EnvBatch(build_slab_scene(), num_envs=2, seed=0)
        env.reset(seed=0)
        env.sim.v[1, -1, 0] = np.inf  # poison one instance
        obs, _, term, trunc, info = env.step(np.zeros((2, 3)))
        assert info["diverged"].tolist() == [False, True]
        assert not term[1] and trunc[1]
        assert np.isfinite(env.sim.x).all()  # poisoned instance was reset
        assert np.allclose(env.sim.x[1], env.sim.mesh.positions_rest)
        assert np.all(np.isfinite(obs))


class TestBatchIndependence:
    def test_batch_equals_singles(self, backend_name):
        scene = build_slab_scene()
        batch = EnvBatch(scene, num_envs=3, seed=0, backend=backend_name)
        batch.reset(seed=0)
        singles = [EnvBatch(scene, num_envs=1, seed=0, backend=backend_name)
                   for _ in range(3)]
        for env in singles:
            env.reset(seed=0)
        rng = np.random.default_rng(4)
        for _ in range(40):
            actions = rng.uniform(-1, 1, (3, 3))
            obs_b, rew_b, term_b, trunc_b, _ = batch.step(actions)
            for i, env in enumerate(singles):
                obs_s, rew_s, term_s, trunc_s, _ = env.step(actions[i:i + 1])
                assert np.array_equal(obs_b[i], obs_s[0])
                assert rew_b[i] == rew_s[0]
                assert term_b[i] == term_s[0] and trunc_b[i] == trunc_s[0]
                assert np.array_equal(batch.sim.x[i], env.sim.x[0])

    def test_deterministic_trajectories(self, backend_name):
        scene = build_slab_scene()

        def run():
            env = EnvBatch(scene, num_envs=2, seed=0, backend=backend_name)
            env.reset(seed=0)
            rng = np.random.default_rng(5)
            history = []
            for _ in range(50):
                out = env.step(rng.uniform(-1, 1, (2, 3)))
                history.append(out[1].copy())
            return env.sim.x.copy(), np.array(history)

        xa, ra = run()
        xb, rb = run()
        assert np.array_equal(xa, xb)
        assert np.array_equal(ra, rb)


class TestEnvConfig:
    def test_start_outside_workspace_rejected(self):
        mesh, rest, cfg = build_slab_scene()
        cfg.tool_start = cfg.workspace_high + 1.0
        with pytest.raises(ValidationError):
            EnvBatch((mesh, rest, cfg), num_envs=1)

    def test_observe_single_instance(self, env2):
        env2.reset(seed=0)
        obs = env2.observe(1)
        assert obs.shape == (6,)
        batch_obs = env2._observe_rows(np.array([0, 1]))
        assert np.array_equal(obs, batch_obs[1])

    def test_normalization_affine(self, env2):
        # identity bounds pass raw coordinates through; the top corner maps to 1
        env2.config.workspace_low = -np.ones(3)
        env2.config.workspace_high = np.ones(3)
        p = np.array([[0.25, -0.5, 0.75]])
        assert np.allclose(env2._normalize(p), p, atol=1e-15)
        env2.config.workspace_low = np.array([0.0, 0.0, 0.0])
        env2.config.workspace_high = np.array([2.0, 4.0, 8.0])
        assert np.allclose(env2._normalize(env2.config.workspace_high[None, :]), 1.0)
        assert np.allclose(env2._normalize(env2.config.workspace_low[None, :]), -1.0)
