"""Batched episodic reach task.

Observations are the instrument's distal point and the fixed surface target,
both normalized by the workspace box. Actions are Cartesian displacements of
the distal point. Reward per step: w_l * distance + w_d * (distance change)
+ w_s * success, success meaning the distal point came within the threshold
of the target. Terminated instances auto-reset so rollouts stay fixed-size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .mesh import SceneConfig, load_scene
from .solver import Simulation

OBSERVATION_SIZE = 6
ACTION_SIZE = 3


@dataclass
class EnvConfig:
    w_distance: float = -1.0
    w_delta: float = -10.0
    w_success: float = 100.0
    success_threshold: float = 0.003
    max_episode_steps: int = 200
    action_scale: float = 0.005
    reward_scale: float = 1.0
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    workspace_low: np.ndarray = field(default_factory=lambda: -np.ones(3))
    workspace_high: np.ndarray = field(default_factory=lambda: np.ones(3))
    held_clamp_angle: float = 2.0

    @classmethod
    def from_scene(cls, cfg: SceneConfig):
        out = cls(
            w_distance=cfg.reward_distance_weight,
            w_delta=cfg.reward_delta_weight,
            w_success=cfg.reward_success_weight,
            success_threshold=cfg.success_threshold,
            max_episode_steps=cfg.max_episode_steps,
            action_scale=cfg.action_scale,
            reward_scale=cfg.reward_scale,
            start=np.asarray(cfg.tool_start, dtype=np.float64),
            target=np.asarray(cfg.target, dtype=np.float64),
            workspace_low=np.asarray(cfg.workspace_low, dtype=np.float64),
            workspace_high=np.asarray(cfg.workspace_high, dtype=np.float64),
            held_clamp_angle=cfg.clamp_angle,
        )
        for name, p in (("tool_start", out.start), ("target", out.target)):
            if np.any(p < out.workspace_low) or np.any(p > out.workspace_high):
                raise ValidationError(f"{name} lies outside the workspace box")
        return out


def compute_reward(distance, delta, success, cfg: EnvConfig):
    """Reward of one step; broadcasts over arrays."""
    return cfg.reward_scale * (
        cfg.w_distance * distance
        + cfg.w_delta * delta
        + cfg.w_success * np.asarray(success, dtype=np.float64)
    )


class EnvBatch:
    """N independent reach-task instances stepped as one batch."""

    observation_size = OBSERVATION_SIZE
    action_size = ACTION_SIZE

    def __init__(self, scene, num_envs: int = 1, seed: int = 0, backend: str = "auto",
                 mode: str = "deterministic", threads: int | None = None):
        if isinstance(scene, (str,)):
            mesh, rest, cfg = load_scene(scene)
        else:
            mesh, rest, cfg = scene
        if num_envs < 1:
            raise ValidationError("num_envs must be >= 1")
        self.scene_config = cfg
        self.config = EnvConfig.from_scene(cfg)
        self.sim = Simulation(mesh, rest, cfg, num_instances=num_envs,
                              backend=backend, mode=mode, threads=threads)
        self.num_envs = num_envs
        n = num_envs
        self._steps = np.zeros(n, dtype=np.int64)
        self._l_prev = np.zeros(n)
        self._return = np.zeros(n)
        self._rng = None
        self._ready = False
        self.seed_value = seed

    # -- helpers ------------------------------------------------------------

    def _normalize(self, p):
        lo, hi = self.config.workspace_low, self.config.workspace_high
        return 2.0 * (p - lo) / (hi - lo) - 1.0

    def _distances(self, idx=None):
        drag = self.sim.tool.drag_points()
        if idx is not None:
            drag = drag[idx]
        rel = drag - self.config.target[None, :]
        return np.sqrt(np.einsum("nq,nq->n", rel, rel))

    def _observe_rows(self, idx):
        drag = self.sim.tool.drag_points()[idx]
        obs = np.empty((len(idx), OBSERVATION_SIZE))
        obs[:, 0:3] = self._normalize(drag)
        obs[:, 3:6] = self._normalize(self.config.target[None, :])
        return obs

    def observe(self, instance: int):
        """Observation of one instance: normalized distal point and target."""
        return self._observe_rows(np.array([instance]))[0]

    # -- episodic API ---------------------------------------------------------

    def reset(self, indices=None, seed=None):
        """Restore instances to rest, tool at start pose; returns their observations.

        The per-instance RNG is reseeded when a seed is given; start and
        target are fixed, so it is reserved for future randomization.
        """
        idx = np.arange(self.num_envs) if indices is None else np.atleast_1d(indices)
        if seed is not None:
            self.seed_value = seed
        if self._rng is None or seed is not None:
            self._rng = [
                np.random.default_rng(s)
                for s in np.random.SeedSequence(self.seed_value).generate_state(self.num_envs)
            ]
        self.sim.reset_instances(idx)
        self._steps[idx] = 0
        self._return[idx] = 0.0
        self._l_prev[idx] = self._distances(idx)
        self._ready = True
        return self._observe_rows(idx)

    def step(self, actions):
        """Advance every instance one outer simulation step.

        Returns (observations, rewards, terminated, truncated, info); done
        instances are auto-reset, their closing observation parked in
        info["final_observation"].
        """
        if not self._ready:
            raise RuntimeError("step called before reset")
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, ACTION_SIZE):
            raise ValidationError(
                f"actions must have shape {(self.num_envs, ACTION_SIZE)}, got {actions.shape}"
            )
        if not np.all(np.isfinite(actions)):
            raise ValidationError("actions must be finite")
        actions = np.clip(actions, -1.0, 1.0)

        targets = self.sim.tool.drag_points() + actions * self.config.action_scale
        angles = np.full(self.num_envs, self.config.held_clamp_angle)
        step_info = self.sim.step(targets, angles, raise_on_divergence=False)
        diverged = step_info["diverged"]

        distance = self._distances()
        success = distance < self.config.success_threshold
        reward = compute_reward(distance, distance - self._l_prev, success, self.config)
        self._steps += 1
        self._return += reward

        terminated = success & ~diverged
        truncated = (~terminated) & ((self._steps >= self.config.max_episode_steps) | diverged)
        done = terminated | truncated

        info = {
            "distance": distance.copy(),
            "success": success.copy(),
            "diverged": diverged.copy(),
            "clipped": step_info.get("clipped"),
            "contacts": step_info["contacts"],
            "episode_return": self._return.copy(),
            "episode_length": self._steps.copy(),
            "done_mask": done.copy(),
            "final_observation": None,
        }

        all_idx = np.arange(self.num_envs)
        self._l_prev[~done] = distance[~done]
        if np.any(done):
            final_obs = np.zeros((self.num_envs, OBSERVATION_SIZE))
            final_obs[done] = self._observe_rows(all_idx[done])
            info["final_observation"] = final_obs
            self.reset(all_idx[done])  # also refreshes _l_prev of done rows

        return self._observe_rows(all_idx), reward, terminated, truncated, info
