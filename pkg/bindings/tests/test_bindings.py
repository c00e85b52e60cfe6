import numpy as np
import pytest

from tissuesim.env import EnvBatch
from tissuesim.errors import ParseError
from tissuesim.mesh import make_slab_scene
from tissuesim_gym import make
from tissuesim_gym.conformance import run_checks


@pytest.fixture(scope="session")
def scene(tmp_path_factory):
    return make_slab_scene(str(tmp_path_factory.mktemp("scenes")), tets=1170)


class TestMake:
    def test_single_env_shapes(self, scene):
        env = make(scene, num_envs=1, seed=0)
        obs = env.reset(seed=0)
        assert obs.shape == (1, 6)
        _, rewards, term, trunc, _ = env.step(np.zeros((1, 3)))
        assert rewards.shape == (1,)
        assert term.shape == (1,) and trunc.shape == (1,)

    def test_batch_shapes(self, scene):
        env = make(scene, num_envs=8, seed=0)
        env.reset(seed=0)
        _, rewards, _, _, _ = env.step(np.zeros((8, 3)))
        assert rewards.shape == (8,)

    def test_bad_path_surfaces_native_message(self):
        with pytest.raises(ParseError, match="no/such.scene"):
            make("no/such.scene", num_envs=1)

    def test_spaces_match_native_definition(self, scene):
        env = make(scene, num_envs=2)
        assert env.observation_space.shape == (6,)
        assert env.action_space.shape == (3,)
        assert np.all(env.action_space.low == -1.0)
        assert np.all(env.action_space.high == 1.0)


class TestStepContract:
    def test_nan_rejected_before_native_call(self, scene):
        env = make(scene, num_envs=2, seed=0)
        env.reset(seed=0)
        steps_before = env.native.sim.step_count
        with pytest.raises(ValueError):
            env.step(np.full((2, 3), np.nan))
        assert env.native.sim.step_count == steps_before

    def test_shape_mismatch_rejected(self, scene):
        env = make(scene, num_envs=2, seed=0)
        env.reset(seed=0)
        with pytest.raises(ValueError):
            env.step(np.zeros((1, 3)))

    def test_seeded_reset_deterministic(self, scene):
        env = make(scene, num_envs=3, seed=0)
        a = env.reset(seed=5)
        b = env.reset(seed=5)
        assert np.array_equal(a, b)
        assert np.all(a >= -1.0) and np.all(a <= 1.0)

    def test_success_transition_rewarded(self, scene):
        env = make(scene, num_envs=1, seed=0)
        env.reset(seed=0)
        for _ in range(200):
            drag = env.native.sim.tool.drag_points()
            move = (env.native.config.target[None, :] - drag) / env.native.config.action_scale
            _, reward, terminated, _, _ = env.step(np.clip(move, -1, 1))
            if terminated[0]:
                assert reward[0] > 90.0
                break
        else:
            pytest.fail("never reached the target")


class TestBoundaryEquivalence:
    def test_hundred_step_script_matches_native_exactly(self, scene):
        bound = make(scene, num_envs=4, seed=0)
        native = EnvBatch(scene, num_envs=4, seed=0)
        obs_b = bound.reset(seed=0)
        obs_n = native.reset(seed=0)
        assert np.array_equal(obs_b, obs_n)
        rng = np.random.default_rng(42)
        for _ in range(100):
            actions = rng.uniform(-1.0, 1.0, (4, 3))
            ob, rb, tb, ub, _ = bound.step(actions)
            on, rn, tn, un, _ = native.step(actions)
            assert np.array_equal(ob, on)
            assert np.array_equal(rb, rn)
            assert np.array_equal(tb, tn) and np.array_equal(ub, un)

    def test_copies_not_views(self, scene):
        env = make(scene, num_envs=2, seed=0)
        env.reset(seed=0)
        obs1, _, _, _, _ = env.step(np.zeros((2, 3)))
        frozen = obs1.copy()
        env.step(np.full((2, 3), 0.7))
        assert np.array_equal(obs1, frozen)


class TestConformanceScript:
    def test_all_checks_pass(self, scene, capsys):
        ok, results = run_checks(scene, num_envs=3, seed=0)
        assert ok, [name for name, passed in results if not passed]
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out
