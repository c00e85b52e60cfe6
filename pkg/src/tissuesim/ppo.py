"""Proximal policy optimization with clipped surrogate and generalized advantage estimation.

The trainer alternates fixed-size rollouts over an environment batch with
minibatch updates. Both clip range and learning rate follow linear schedules
that end at zero. Seeded end to end: with a fixed seed and a deterministic
environment, two runs produce identical parameter trajectories and logs
(modulo wall-clock columns).
"""

from __future__ import annotations

import math
import os
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ValidationError

CHECKPOINT_FORMAT = "tissuesim-policy-v1"
LOG2PI = math.log(2.0 * math.pi)


@dataclass
class PPOConfig:
    total_steps: int = 500_000
    steps_before_update: int = 1024   # summed over environments
    minibatch_size: int = 256
    epochs: int = 4
    gamma: float = 0.995
    gae_lambda: float = 0.95
    clip_range: float = 0.1           # linear schedule start, ends at 0
    value_clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    learning_rate: float = 2.5e-4     # linear schedule start, ends at 0
    hidden_sizes: tuple = (128, 128)
    log_std_init: float = 0.0
    # scheduled exploration: log-std anneals linearly to log_std_final over
    # the first log_std_anneal_frac of the run, then holds (None leaves it a
    # learned parameter). The reach policy saturates the action bounds, which
    # starves the learned-sigma gradient; annealing keeps early exploration
    # wide and late landings precise.
    log_std_final: float | None = -2.5
    log_std_anneal_frac: float = 0.25
    normalize_advantages: bool = True
    seed: int = 0
    torch_threads: int = 1
    stop_at_reward: float | None = None  # stop once the trailing mean clears this
    stop_window: int = 100               # episodes in the trailing mean
    stop_patience: int = 5               # consecutive updates the mean must hold

    def validate(self):
        if self.total_steps < 1 or self.steps_before_update < 1:
            raise ValidationError("step counts must be positive")
        if self.steps_before_update % self.minibatch_size != 0:
            raise ValidationError("steps_before_update must be a multiple of minibatch_size")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValidationError("gamma and gae_lambda must lie in [0, 1]")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        return self


def linear_schedule(x0: float, t: float, total: float) -> float:
    """Value of a schedule starting at x0 and ending at 0 after `total` steps."""
    if not 0.0 <= t <= total:
        raise ValidationError(f"schedule time {t} outside [0, {total}]")
    return x0 * (1.0 - t / total)


class ActorCritic(nn.Module):
    """Shared tanh trunk, Gaussian policy head with state-independent log-std, value head."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128), log_std_init=0.0):
        super().__init__()
        layers = []
        last = obs_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.Tanh()]
            last = width
        self.trunk = nn.Sequential(*layers)
        self.policy_mean = nn.Linear(last, act_dim)
        self.value_head = nn.Linear(last, 1)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std_init)))
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        for mod in self.trunk:
            if isinstance(mod, nn.Linear):
                nn.init.orthogonal_(mod.weight, gain=math.sqrt(2.0))
                nn.init.zeros_(mod.bias)
        nn.init.orthogonal_(self.policy_mean.weight, gain=0.01)
        nn.init.zeros_(self.policy_mean.bias)
        nn.init.orthogonal_(self.value_head.weight, gain=1.0)
        nn.init.zeros_(self.value_head.bias)

    def forward(self, obs):
        z = self.trunk(obs)
        return self.policy_mean(z), self.value_head(z).squeeze(-1)

    def _log_prob(self, mean, actions):
        var = torch.exp(2.0 * self.log_std)
        return (-0.5 * ((actions - mean) ** 2 / var + 2.0 * self.log_std + LOG2PI)).sum(-1)

    @torch.no_grad()
    def act(self, obs, generator=None):
        mean, value = self(obs)
        std = torch.exp(self.log_std)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        action = mean + std * noise
        return action, self._log_prob(mean, action), value

    @torch.no_grad()
    def act_greedy(self, obs):
        mean, _ = self(obs)
        return mean

    def evaluate_actions(self, obs, actions):
        mean, value = self(obs)
        entropy = (self.log_std + 0.5 * (1.0 + LOG2PI)).sum().expand(len(obs))
        return self._log_prob(mean, actions), entropy, value


def compute_gae(rewards, values, bootstrap_value, terminated, gamma, lam,
                truncated=None, truncation_values=None):
    """Backward GAE recursion over (T,) or (T, N) arrays.

    `terminated` marks true episode ends (no bootstrap); `truncated` marks
    cut-offs whose next value is replaced by the critic value of the terminal
    observation. Returns (advantages, returns = advantages + values).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    squeeze = rewards.ndim == 1
    r = rewards.reshape(len(rewards), -1)
    v = np.asarray(values, dtype=np.float64).reshape(r.shape)
    term = np.asarray(terminated, dtype=bool).reshape(r.shape)
    trunc = (np.zeros_like(term) if truncated is None
             else np.asarray(truncated, dtype=bool).reshape(r.shape))
    tv = (np.zeros_like(r) if truncation_values is None
          else np.asarray(truncation_values, dtype=np.float64).reshape(r.shape))
    boot = np.asarray(bootstrap_value, dtype=np.float64).reshape(r.shape[1])

    horizon = len(r)
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1])
    for t in range(horizon - 1, -1, -1):
        next_value = v[t + 1] if t + 1 < horizon else boot
        next_value = np.where(trunc[t], tv[t], next_value)
        lives = ~(term[t] | trunc[t])
        bootstrap_mask = np.where(term[t], 0.0, 1.0)
        delta = r[t] + gamma * bootstrap_mask * next_value - v[t]
        last = delta + gamma * lam * np.where(lives, 1.0, 0.0) * last
        adv[t] = last
    ret = adv + v
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


class RolloutBuffer:
    """Fixed-capacity on-policy storage, (horizon, num_envs) major."""

    def __init__(self, horizon, num_envs, obs_dim, act_dim):
        self.horizon = horizon
        self.num_envs = num_envs
        self.obs = np.zeros((horizon, num_envs, obs_dim))
        self.actions = np.zeros((horizon, num_envs, act_dim))
        self.log_probs = np.zeros((horizon, num_envs))
        self.values = np.zeros((horizon, num_envs))
        self.rewards = np.zeros((horizon, num_envs))
        self.terminated = np.zeros((horizon, num_envs), dtype=bool)
        self.truncated = np.zeros((horizon, num_envs), dtype=bool)
        self.trunc_values = np.zeros((horizon, num_envs))
        self.pos = 0

    def add(self, obs, actions, log_probs, values, rewards, terminated, truncated,
            trunc_values):
        t = self.pos
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.terminated[t] = terminated
        self.truncated[t] = truncated
        self.trunc_values[t] = trunc_values
        self.pos += 1

    @property
    def full(self):
        return self.pos == self.horizon

    def reset(self):
        self.pos = 0


@dataclass
class TrainStats:
    columns = ("update", "env_steps", "mean_ep_reward", "mean_ep_len",
               "episodes", "policy_loss", "value_loss", "entropy",
               "grad_norm", "lr", "clip_range", "sps")
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    horizon: int = 0
    num_envs: int = 0
    stopped_early_at: int | None = None
    # env steps when the trailing mean first held above 80 for stop_patience updates
    reward_crossed_at: int | None = None
    model: object = None  # trained ActorCritic, attached by train()

    def add_row(self, **kw):
        self.rows.append({c: kw[c] for c in self.columns})

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# horizon = {self.horizon}\n")
            fh.write(f"# num_envs = {self.num_envs}\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_csv_cell(row[c]) for c in self.columns) + "\n")

    @classmethod
    def from_csv(cls, path):
        stats = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("update"):
                    if line.startswith("# horizon"):
                        stats.horizon = int(line.split("=")[1])
                    if line.startswith("# num_envs"):
                        stats.num_envs = int(line.split("=")[1])
                    continue
                parts = line.split(",")
                row = {}
                for name, cell in zip(cls.columns, parts):
                    row[name] = (int(cell) if name in ("update", "env_steps", "episodes")
                                 else float(cell))
                stats.rows.append(row)
        return stats


def _csv_cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def ppo_update(model, optimizer, batch, clip_eps, lr, cfg: PPOConfig, generator):
    """One update pass: `epochs` sweeps of shuffled minibatches over the buffer."""
    obs, actions, old_log_probs, old_values, advantages, returns = batch
    n = len(obs)
    for group in optimizer.param_groups:
        group["lr"] = lr

    if cfg.normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "grad_norm": 0.0}
    batches = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            log_probs, entropy, values = model.evaluate_actions(obs[idx], actions[idx])
            ratio = torch.exp(log_probs - old_log_probs[idx])
            adv = advantages[idx]
            surrogate = torch.min(
                ratio * adv,
                torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv,
            )
            policy_loss = -surrogate.mean()

            clipped_values = old_values[idx] + torch.clamp(
                values - old_values[idx], -cfg.value_clip, cfg.value_clip
            )
            value_loss = 0.5 * torch.max(
                (values - returns[idx]) ** 2,
                (clipped_values - returns[idx]) ** 2,
            ).mean()

            entropy_mean = entropy.mean()
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_mean
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss (policy {policy_loss.item()}, value {value_loss.item()})"
                )
            optimizer.zero_grad()
            loss.backward()
            grad_norm = nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()

            stats["policy_loss"] += policy_loss.item()
            stats["value_loss"] += value_loss.item()
            stats["entropy"] += entropy_mean.item()
            stats["grad_norm"] += min(grad_norm.item(), cfg.max_grad_norm)
            batches += 1
    return {k: v / batches for k, v in stats.items()}


def train(env, cfg: PPOConfig, out_dir: str | None = None, log_every: int = 1,
          verbose: bool = False) -> TrainStats:
    """Run the rollout/update loop until total_steps environment steps."""
    cfg.validate()
    if cfg.steps_before_update % env.num_envs != 0:
        raise ValidationError(
            f"steps_before_update ({cfg.steps_before_update}) must divide evenly "
            f"across {env.num_envs} environments"
        )
    horizon = cfg.steps_before_update // env.num_envs
    n_updates = cfg.total_steps // cfg.steps_before_update

    torch.set_num_threads(cfg.torch_threads)
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    model = ActorCritic(env.observation_size, env.action_size,
                        tuple(cfg.hidden_sizes), cfg.log_std_init)
    if cfg.log_std_final is not None:
        model.log_std.requires_grad_(False)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg.learning_rate)

    stats = TrainStats(horizon=horizon, num_envs=env.num_envs)
    buffer = RolloutBuffer(horizon, env.num_envs, env.observation_size, env.action_size)
    ep_rewards = deque(maxlen=cfg.stop_window)
    ep_lengths = deque(maxlen=cfg.stop_window)
    above_bar = 0
    above_80 = 0

    obs = env.reset(seed=cfg.seed)
    env_steps = 0
    t_start = time.perf_counter()
    for update in range(1, n_updates + 1):
        progress = env_steps
        lr = linear_schedule(cfg.learning_rate, progress, cfg.total_steps)
        clip_eps = linear_schedule(cfg.clip_range, progress, cfg.total_steps)
        if cfg.log_std_final is not None:
            frac = min(1.0, progress / (cfg.log_std_anneal_frac * cfg.total_steps))
            with torch.no_grad():
                model.log_std.fill_(
                    cfg.log_std_init + (cfg.log_std_final - cfg.log_std_init) * frac)

        t_update = time.perf_counter()
        buffer.reset()
        for _ in range(horizon):
            obs_t = torch.as_tensor(obs, dtype=torch.float32)
            action, log_prob, value = model.act(obs_t, generator)
            action_np = action.numpy().astype(np.float64)
            next_obs, reward, terminated, truncated, info = env.step(action_np)

            trunc_values = np.zeros(env.num_envs)
            needs_boot = truncated & ~info["diverged"]
            if np.any(needs_boot):
                final_obs = torch.as_tensor(
                    info["final_observation"][needs_boot], dtype=torch.float32
                )
                with torch.no_grad():
                    _, boot_v = model(final_obs)
                trunc_values[needs_boot] = boot_v.numpy()

            buffer.add(obs, action_np, log_prob.numpy(), value.numpy(),
                       reward, terminated, truncated, trunc_values)
            done = terminated | truncated
            for i in np.flatnonzero(done):
                ep_rewards.append(float(info["episode_return"][i]))
                ep_lengths.append(int(info["episode_length"][i]))
            obs = next_obs
            env_steps += env.num_envs

        with torch.no_grad():
            _, bootstrap = model(torch.as_tensor(obs, dtype=torch.float32))
        advantages, returns = compute_gae(
            buffer.rewards, buffer.values, bootstrap.numpy(), buffer.terminated,
            cfg.gamma, cfg.gae_lambda, buffer.truncated, buffer.trunc_values,
        )

        flat = cfg.steps_before_update
        batch = (
            torch.as_tensor(buffer.obs.reshape(flat, -1), dtype=torch.float32),
            torch.as_tensor(buffer.actions.reshape(flat, -1), dtype=torch.float32),
            torch.as_tensor(buffer.log_probs.reshape(flat), dtype=torch.float32),
            torch.as_tensor(buffer.values.reshape(flat), dtype=torch.float32),
            torch.as_tensor(advantages.reshape(flat), dtype=torch.float32),
            torch.as_tensor(returns.reshape(flat), dtype=torch.float32),
        )
        update_stats = ppo_update(model, optimizer, batch, clip_eps, lr, cfg, generator)

        mean_reward = float(np.mean(ep_rewards)) if ep_rewards else float("nan")
        mean_len = float(np.mean(ep_lengths)) if ep_lengths else float("nan")
        sps = cfg.steps_before_update / (time.perf_counter() - t_update)
        if update % log_every == 0 or update == n_updates:
            stats.add_row(update=update, env_steps=env_steps,
                          mean_ep_reward=mean_reward, mean_ep_len=mean_len,
                          episodes=len(ep_rewards), sps=sps,
                          lr=lr, clip_range=clip_eps, **update_stats)
        if verbose and (update % max(1, log_every) == 0):
            print(f"update {update:4d} steps {env_steps:7d} "
                  f"reward {mean_reward:8.2f} len {mean_len:6.1f} sps {sps:7.0f}")

        window_full = len(ep_rewards) == ep_rewards.maxlen
        above_80 = above_80 + 1 if (window_full and mean_reward > 80.0) else 0
        if stats.reward_crossed_at is None and above_80 >= cfg.stop_patience:
            stats.reward_crossed_at = env_steps
        if cfg.stop_at_reward is not None:
            above_bar = above_bar + 1 if (window_full and mean_reward > cfg.stop_at_reward) else 0
            if above_bar >= cfg.stop_patience:
                stats.stopped_early_at = env_steps
                break

    stats.wall_clock = time.perf_counter() - t_start
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        stats.to_csv(os.path.join(out_dir, "train_log.csv"))
        with open(os.path.join(out_dir, "reward_curve.csv"), "w", encoding="utf-8") as fh:
            fh.write("env_steps,mean_ep_reward\n")
            for row in stats.rows:
                fh.write(f"{row['env_steps']},{_csv_cell(row['mean_ep_reward'])}\n")
        save_checkpoint(os.path.join(out_dir, "policy.pt"), model, cfg)
    stats.model = model
    return stats


def evaluate(env, model, episodes: int = 100, greedy: bool = True, seed: int = 0,
             generator=None):
    """Roll episodes with the (mean-action) policy; reports success rate and returns."""
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    obs = env.reset(seed=seed)
    successes = 0
    rewards = []
    lengths = []
    while len(rewards) < episodes:
        obs_t = torch.as_tensor(obs, dtype=torch.float32)
        if greedy:
            action = model.act_greedy(obs_t).numpy().astype(np.float64)
        else:
            action = model.act(obs_t, generator)[0].numpy().astype(np.float64)
        obs, _, terminated, truncated, info = env.step(action)
        done = terminated | truncated
        for i in np.flatnonzero(done):
            if len(rewards) < episodes:
                rewards.append(float(info["episode_return"][i]))
                lengths.append(int(info["episode_length"][i]))
                successes += bool(terminated[i])
    return {
        "success_rate": successes / episodes,
        "mean_reward": float(np.mean(rewards)),
        "mean_length": float(np.mean(lengths)),
    }


def save_checkpoint(path, model: ActorCritic, cfg: PPOConfig | None = None, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "obs_dim": model.obs_dim,
        "act_dim": model.act_dim,
        "hidden_sizes": [layer.out_features for layer in model.trunk
                         if isinstance(layer, nn.Linear)],
        "state_dict": model.state_dict(),
        "config": asdict(cfg) if cfg else None,
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path, expect_obs_dim=None, expect_act_dim=None) -> tuple:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    obs_dim = payload["obs_dim"]
    act_dim = payload["act_dim"]
    if expect_obs_dim is not None and obs_dim != expect_obs_dim:
        raise CheckpointError(
            f"observation size mismatch: expected {expect_obs_dim}, checkpoint has {obs_dim}"
        )
    if expect_act_dim is not None and act_dim != expect_act_dim:
        raise CheckpointError(
            f"action size mismatch: expected {expect_act_dim}, checkpoint has {act_dim}"
        )
    model = ActorCritic(obs_dim, act_dim, tuple(payload["hidden_sizes"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
