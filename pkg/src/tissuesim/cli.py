"""Command line front end: throughput benchmarks, training runs, policy evaluation."""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .env import EnvBatch
from .errors import CheckpointError, ParseError, SimulationDiverged, ValidationError
from .mesh import SLAB_PRESETS, load_scene, make_slab_scene

DEFAULT_BENCH_SEEDS = 5


@dataclass
class BenchRow:
    envs: int
    tets: int
    mode: str
    backend: str
    mean_sps: float
    std_sps: float
    available: bool = True


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("envs,tets,mode,backend,mean_sps,std_sps,available\n")
            for r in self.rows:
                fh.write(f"{r.envs},{r.tets},{r.mode},{r.backend},"
                         f"{float(r.mean_sps)!r},{float(r.std_sps)!r},{int(r.available)}\n")

    @classmethod
    def from_csv(cls, path):
        report = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("envs,"):
                raise ParseError(f"{path} is not a benchmark report")
            for line in fh:
                envs, tets, mode, backend, mean, std, avail = line.strip().split(",")
                report.rows.append(BenchRow(int(envs), int(tets), mode, backend,
                                            float(mean), float(std), bool(int(avail))))
        return report

    def pretty(self):
        lines = [f"{'envs':>5} {'tets':>7} {'mode':>4} {'backend':>9} "
                 f"{'steps/s':>12} {'std':>10}"]
        for r in self.rows:
            if r.available:
                lines.append(f"{r.envs:>5} {r.tets:>7} {r.mode:>4} {r.backend:>9} "
                             f"{r.mean_sps:>12.1f} {r.std_sps:>10.1f}")
            else:
                lines.append(f"{r.envs:>5} {r.tets:>7} {r.mode:>4} {r.backend:>9} "
                             f"{'--':>12} {'--':>10}")
        return "\n".join(lines)


def _bench_one_sim(scene, num_envs, steps, seed, backend, threads, warmup):
    env = EnvBatch(scene, num_envs=num_envs, seed=seed, backend=backend, threads=threads)
    rng = np.random.default_rng(seed)
    env.reset(seed=seed)
    batches = max(1, math.ceil(steps / num_envs))
    for _ in range(warmup):
        env.step(rng.uniform(-1.0, 1.0, (num_envs, 3)))
    t0 = time.perf_counter()
    for _ in range(batches):
        env.step(rng.uniform(-1.0, 1.0, (num_envs, 3)))
    elapsed = time.perf_counter() - t0
    return batches * num_envs / elapsed


def _bench_one_rl(scene, num_envs, steps, seed, backend, threads):
    from . import ppo
    env = EnvBatch(scene, num_envs=num_envs, seed=seed, backend=backend, threads=threads)
    cfg = ppo.PPOConfig(seed=seed)
    cfg.total_steps = max(cfg.steps_before_update, steps)
    stats = ppo.train(env, cfg)
    total = stats.rows[-1]["env_steps"] if stats.rows else cfg.total_steps
    return total / stats.wall_clock


def run_benchmark(mode, env_counts, scene, steps, seeds, backend="auto",
                  threads=None, warmup=100) -> BenchReport:
    """Throughput rows (mean/std over seeded runs) for each environment count.

    `steps` counts environment steps summed over the batch; warm-up steps are
    excluded from timing. Batches that exhaust memory yield unavailable rows.
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if mode not in ("sim", "rl"):
        raise ValidationError("mode must be 'sim' or 'rl'")
    mesh, _, _ = load_scene(scene)
    n_tets = len(mesh.tets)
    report = BenchReport()
    for count in env_counts:
        rates = []
        available = True
        for seed in seeds:
            try:
                if mode == "sim":
                    rates.append(_bench_one_sim(scene, count, steps, seed, backend,
                                                threads, warmup))
                else:
                    rates.append(_bench_one_rl(scene, count, steps, seed, backend, threads))
            except MemoryError:
                available = False
                break
        if available:
            arr = np.asarray(rates)
            report.rows.append(BenchRow(count, n_tets, mode, backend,
                                        float(arr.mean()), float(arr.std())))
        else:
            report.rows.append(BenchRow(count, n_tets, mode, backend,
                                        float("nan"), float("nan"), available=False))
    return report


def _apply_overrides(pairs, scene_cfg, ppo_cfg):
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key.startswith("ppo."):
            name = key[4:]
            if ppo_cfg is None or not hasattr(ppo_cfg, name):
                raise ValidationError(f"unknown ppo setting {name!r}")
            current = getattr(ppo_cfg, name)
            setattr(ppo_cfg, name, _cast_like(current, value))
        else:
            if not hasattr(scene_cfg, key):
                raise ValidationError(f"unknown scene setting {key!r}")
            current = getattr(scene_cfg, key)
            setattr(scene_cfg, key, _cast_like(current, value))


def _cast_like(current, value):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, np.ndarray):
        return np.array([float(t) for t in value.split()], dtype=np.float64)
    if isinstance(current, (tuple, list)):
        return type(current)(int(t) for t in value.split())
    if current is None:
        return float(value)
    return value


def _load_scene_with_overrides(scene_path, set_pairs, ppo_cfg=None):
    mesh, rest, cfg = load_scene(scene_path)
    _apply_overrides(set_pairs, cfg, ppo_cfg)
    cfg.validate()
    return mesh, rest, cfg


def run_training(scene, out_dir, num_envs=8, seed=0, backend="auto", threads=None,
                 steps=None, set_pairs=None, verbose=True) -> int:
    from . import ppo
    ppo_cfg = ppo.PPOConfig(seed=seed)
    scene_tuple = _load_scene_with_overrides(scene, set_pairs, ppo_cfg)
    if steps is not None:
        ppo_cfg.total_steps = steps
    env = EnvBatch(scene_tuple, num_envs=num_envs, seed=seed, backend=backend,
                   threads=threads)
    try:
        stats = ppo.train(env, ppo_cfg, out_dir=out_dir, verbose=verbose)
    except SimulationDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    last = stats.rows[-1]
    print(f"finished: {last['env_steps']} env steps, "
          f"mean episode reward {last['mean_ep_reward']:.2f}, "
          f"wall clock {stats.wall_clock:.1f}s")
    if stats.reward_crossed_at is not None:
        print(f"trailing mean first exceeded 80 at {stats.reward_crossed_at} env steps")
    return 0


def run_eval(checkpoint, scene, episodes=100, num_envs=8, seed=0, backend="auto",
             threads=None, set_pairs=None):
    from . import ppo
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    scene_tuple = _load_scene_with_overrides(scene, set_pairs)
    env = EnvBatch(scene_tuple, num_envs=num_envs, seed=seed, backend=backend,
                   threads=threads)
    model, _ = ppo.load_checkpoint(checkpoint, expect_obs_dim=env.observation_size,
                                   expect_act_dim=env.action_size)
    result = ppo.evaluate(env, model, episodes=episodes, seed=seed)
    print(f"success rate {result['success_rate']:.3f}  "
          f"mean episode reward {result['mean_reward']:.2f}  "
          f"mean length {result['mean_length']:.1f}")
    return result


def _resolve_scene(args, parser):
    if getattr(args, "scene", None):
        return args.scene
    if getattr(args, "tets", None):
        out = os.path.join(tempfile.gettempdir(), "tissuesim_scenes")
        return make_slab_scene(out, tets=args.tets)
    parser.error("provide --scene PATH or --tets N")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tissuesim",
        description="Batched soft-tissue simulator: benchmarks, PPO training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scene", help="scene file path")
    common.add_argument("--tets", type=int, choices=sorted(SLAB_PRESETS),
                        help="generate a slab scene of roughly this many tets")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--backend", default="auto",
                        choices=("auto", "compiled", "numpy"))
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--set", dest="set_pairs", action="append", metavar="KEY=VALUE",
                        help="override a scene or ppo.* setting")

    b = sub.add_parser("bench", parents=[common], help="measure steps/second")
    b.add_argument("--mode", choices=("sim", "rl"), default="sim")
    b.add_argument("--num-envs", default="1",
                   help="comma-separated environment counts, e.g. 1,4,8")
    b.add_argument("--steps", type=int, default=2000,
                   help="environment steps per run (summed over the batch)")
    b.add_argument("--runs", type=int, default=DEFAULT_BENCH_SEEDS,
                   help="seeded runs per row")
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--csv", help="write the report here")
    b.add_argument("--compare-backends", action="store_true",
                   help="benchmark every available backend")

    t = sub.add_parser("train", parents=[common], help="train the reach-task policy")
    t.add_argument("--num-envs", type=int, default=8)
    t.add_argument("--steps", type=int, default=None,
                   help="override total environment steps")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--num-envs", type=int, default=8)

    m = sub.add_parser("make-scene", help="generate a slab scene")
    m.add_argument("--tets", type=int, default=1170, choices=sorted(SLAB_PRESETS))
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--pin", default="y0", choices=("x0", "x1", "y0", "y1"))
    m.add_argument("--spacing", type=float, default=0.0075)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench":
            scene = _resolve_scene(args, parser)
            counts = [int(t) for t in str(args.num_envs).split(",") if t]
            if not counts or min(counts) < 1:
                raise ValidationError("--num-envs needs positive integers")
            if args.steps < 1:
                raise ValidationError("--steps must be >= 1")
            seeds = [args.seed + k for k in range(args.runs)]
            from . import backends
            names = backends.available_backends() if args.compare_backends else [args.backend]
            report = BenchReport()
            for name in names:
                part = run_benchmark(args.mode, counts, scene, args.steps, seeds,
                                     backend=name, threads=args.threads,
                                     warmup=args.warmup)
                report.rows.extend(part.rows)
            print(report.pretty())
            if args.csv:
                report.to_csv(args.csv)
                print(f"wrote {args.csv}")
            return 0
        if args.command == "train":
            scene = _resolve_scene(args, parser)
            return run_training(scene, args.out, num_envs=args.num_envs, seed=args.seed,
                                backend=args.backend, threads=args.threads,
                                steps=args.steps, set_pairs=args.set_pairs,
                                verbose=not args.quiet)
        if args.command == "eval":
            scene = _resolve_scene(args, parser)
            run_eval(args.checkpoint, scene, episodes=args.episodes,
                     num_envs=args.num_envs, seed=args.seed, backend=args.backend,
                     threads=args.threads, set_pairs=args.set_pairs)
            return 0
        if args.command == "make-scene":
            path = make_slab_scene(args.out, tets=args.tets, spacing=args.spacing,
                                   pin=args.pin)
            print(path)
            return 0
    except (ParseError, ValidationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimulationDiverged as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return 3
    parser.error(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
