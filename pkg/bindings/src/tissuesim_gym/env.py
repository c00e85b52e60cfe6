from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tissuesim.env import ACTION_SIZE, OBSERVATION_SIZE, EnvBatch


@dataclass(frozen=True)
class Box:
    """Bounded box space in the prevailing gym signature (low, high, shape, dtype)."""

    low: np.ndarray
    high: np.ndarray
    shape: tuple
    dtype: np.dtype

    def contains(self, value) -> bool:
        arr = np.asarray(value)
        return (arr.shape == self.shape
                and bool(np.all(arr >= self.low) and np.all(arr <= self.high)))


def _unit_box(size: int) -> Box:
    return Box(
        low=np.full(size, -1.0),
        high=np.full(size, 1.0),
        shape=(size,),
        dtype=np.dtype(np.float64),
    )


class BoundEnv:
    """Handle to a native environment batch with declared spaces.

    One caller at a time; numerical results are the native batch's own,
    bit for bit in deterministic mode.
    """

    def __init__(self, scene_path: str, num_envs: int = 1, seed: int = 0, **kwargs):
        self._native = EnvBatch(scene_path, num_envs=num_envs, seed=seed, **kwargs)
        self.num_envs = num_envs
        self.observation_space = _unit_box(OBSERVATION_SIZE)
        self.action_space = _unit_box(ACTION_SIZE)

    @property
    def native(self) -> EnvBatch:
        return self._native

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Reset every instance; returns observations shaped (num_envs, 6)."""
        obs = self._native.reset(seed=seed)
        return np.array(obs, dtype=self.observation_space.dtype)

    def step(self, actions):
        """Five-tuple step. Actions must be finite and shaped (num_envs, 3)."""
        actions = np.asarray(actions)
        expected = (self.num_envs,) + self.action_space.shape
        if actions.shape != expected:
            raise ValueError(f"actions must have shape {expected}, got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise ValueError("actions must be finite")
        obs, rewards, terminated, truncated, info = self._native.step(
            actions.astype(np.float64, copy=False))
        return (
            np.array(obs, dtype=self.observation_space.dtype),
            np.array(rewards, dtype=np.float64),
            np.array(terminated, dtype=bool),
            np.array(truncated, dtype=bool),
            info,
        )

    def close(self):
        self._native = None


def make(scene_path: str, num_envs: int = 1, seed: int = 0, **kwargs) -> BoundEnv:
    """Construct a bound environment; native load errors propagate untouched."""
    return BoundEnv(scene_path, num_envs=num_envs, seed=seed, **kwargs)
