"""Convention conformance script: shapes, dtypes, five-tuple, seeded reset.

Run as ``python -m tissuesim_gym.conformance --scene PATH``; prints one
PASS/FAIL line per check and exits nonzero on any failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import make


def run_checks(scene: str, num_envs: int = 4, seed: int = 0, verbose: bool = True):
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok)))
        if verbose:
            status = "PASS" if ok else "FAIL"
            print(f"{status} {name}" + (f"  ({detail})" if detail and not ok else ""))

    env = make(scene, num_envs=num_envs, seed=seed)
    check("spaces declared", env.observation_space.shape == (6,)
          and env.action_space.shape == (3,))
    check("space bounds unit", np.all(env.observation_space.low == -1.0)
          and np.all(env.action_space.high == 1.0))

    obs = env.reset(seed=seed)
    check("reset shape", obs.shape == (num_envs, 6), f"got {obs.shape}")
    check("reset dtype", obs.dtype == env.observation_space.dtype, f"got {obs.dtype}")
    check("reset within bounds", all(env.observation_space.contains(row) for row in obs))

    obs2 = env.reset(seed=seed)
    check("seeded reset deterministic", np.array_equal(obs, obs2))

    actions = np.zeros((num_envs, 3))
    out = env.step(actions)
    check("step returns five-tuple", isinstance(out, tuple) and len(out) == 5)
    nobs, rewards, terminated, truncated, info = out
    check("observation shape", nobs.shape == (num_envs, 6))
    check("reward shape/dtype", rewards.shape == (num_envs,)
          and rewards.dtype == np.float64)
    check("terminated bool vector", terminated.shape == (num_envs,)
          and terminated.dtype == np.bool_)
    check("truncated bool vector", truncated.shape == (num_envs,)
          and truncated.dtype == np.bool_)
    check("info is a mapping", isinstance(info, dict))

    try:
        env.step(np.full((num_envs, 3), np.nan))
        check("non-finite actions rejected", False)
    except Exception:
        check("non-finite actions rejected", True)
    try:
        env.step(np.zeros((num_envs + 1, 3)))
        check("misshaped actions rejected", False)
    except Exception:
        check("misshaped actions rejected", True)

    buffers_copied = True
    frozen = nobs.copy()
    env.step(np.full((num_envs, 3), 0.5))
    buffers_copied = np.array_equal(nobs, frozen)
    check("returned buffers are copies", buffers_copied)

    failed = [name for name, ok in results if not ok]
    return len(failed) == 0, results


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", required=True)
    parser.add_argument("--num-envs", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    ok, _ = run_checks(args.scene, args.num_envs, args.seed)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
