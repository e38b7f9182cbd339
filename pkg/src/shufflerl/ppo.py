"""Proximal Policy Optimization over the trading environment.

A diagonal-Gaussian policy and a value head share one extractor trunk.
Rollouts of fixed length are collected from a single environment, advantages
come from GAE, and updates minimize the clipped surrogate plus a value MSE
term, with advantages normalized per minibatch (the 1e-6 reward scaling
makes raw advantages tiny enough to stall learning otherwise).

Everything is deterministic given (seed, config, dataset): one generator
seeded from the config drives action sampling and minibatch shuffling, and
parameter init is seeded separately from the same config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from shufflerl.data import MarketDataset
from shufflerl.env import EnvConfig, EpisodeResult, TradingEnv, run_episode
from shufflerl.errors import NonFiniteError, ShuffleRlError, UndefinedMetricError
from shufflerl.features import (
    CANONICAL,
    SHUFFLED,
    FeatureLayout,
    FeatureVector,
    WindowMatrix,
    ticker_block_permutation,
)
from shufflerl.metrics import cumulative_return, daily_returns, sharpe_ratio
from shufflerl.nn import ActorCritic, ArchSpec

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    rollout_length: int = 2048
    minibatch_size: int = 64
    epochs_per_update: int = 10
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_timesteps: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ShuffleRlError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ShuffleRlError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_epsilon <= 0:
            raise ShuffleRlError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        if min(self.rollout_length, self.minibatch_size, self.epochs_per_update) < 1:
            raise ShuffleRlError("rollout_length, minibatch_size, epochs_per_update must be >= 1")


AGENT_KINDS = ("mlp", "cnn", "cnn-shuffled")


@dataclass(frozen=True)
class AgentSpec:
    """Which extractor an agent uses and how its observations are laid out."""

    kind: str = "cnn"  # mlp | cnn | cnn-shuffled
    arch: ArchSpec | None = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ShuffleRlError(f"agent kind must be one of {AGENT_KINDS}, got {self.kind!r}")
        if self.arch is not None and self.arch.kind != self.extractor_kind:
            raise ShuffleRlError(
                f"architecture kind {self.arch.kind!r} does not match agent {self.kind!r}"
            )

    @property
    def extractor_kind(self) -> str:
        return "mlp" if self.kind == "mlp" else "cnn"

    @property
    def layout(self) -> str:
        return SHUFFLED if self.kind == "cnn-shuffled" else CANONICAL

    def resolve_arch(self) -> ArchSpec:
        return self.arch if self.arch is not None else ArchSpec(kind=self.extractor_kind)


def _obs_array(obs) -> np.ndarray:
    if isinstance(obs, WindowMatrix):
        return obs.rows
    if isinstance(obs, FeatureVector):
        return obs.values
    return np.asarray(obs, dtype=np.float64)


class RolloutBuffer:
    """Fixed-length trajectory store with GAE results attached."""

    def __init__(self, length: int, obs_shape: tuple[int, ...], action_dim: int):
        self.length = length
        self.observations = np.zeros((length, *obs_shape))
        self.actions = np.zeros((length, action_dim))
        self.log_probs = np.zeros(length)
        self.rewards = np.zeros(length)
        self.values = np.zeros(length)
        self.dones = np.zeros(length, dtype=bool)
        self.advantages = np.zeros(length)
        self.returns = np.zeros(length)
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.length

    def add(self, obs, action, log_prob, reward, value, done):
        if self.full:
            raise ShuffleRlError("rollout buffer is full")
        i = self.pos
        self.observations[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.pos += 1

    def finalize(self, bootstrap_value: float, gamma: float, lam: float):
        if not self.full:
            raise ShuffleRlError(f"buffer has {self.pos}/{self.length} steps")
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, bootstrap_value, gamma, lam
        )
        if not np.all(np.isfinite(self.advantages)):
            raise NonFiniteError("advantages")


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density of each row of ``actions``."""
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * z**2 - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def sample_action(net: ActorCritic, obs, rng: np.random.Generator):
    """Draw a raw (unclipped) action; env-side decoding clips it.

    Returns (action, log_prob of the raw sample, value estimate).
    """
    batch = _obs_array(obs)[None, ...]
    mu, value, _ = net.forward(batch)
    log_std = net.effective_log_std()
    action = mu[0] + np.exp(log_std) * rng.standard_normal(net.action_dim)
    log_prob = float(gaussian_log_prob(action[None, :], mu, log_std)[0])
    if not np.isfinite(log_prob):
        raise NonFiniteError("sample_action", "log probability")
    return action, log_prob, float(value[0])


def policy_mean(net: ActorCritic, obs) -> np.ndarray:
    mu, _, _ = net.forward(_obs_array(obs)[None, ...])
    return mu[0]


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation.

    ``delta_t = r_t + gamma*v_{t+1}*(1-done_t) - v_t`` with the bootstrap
    value standing in for the final v; advantages accumulate backwards as
    ``A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1}``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape:
        raise ShuffleRlError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}"
        )
    n = rewards.shape[0]
    advantages = np.zeros(n)
    next_value = bootstrap_value
    next_advantage = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_advantage = delta + gamma * lam * live * next_advantage
        advantages[t] = next_advantage
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class LossDiagnostics:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "policy_loss": self.policy_loss,
            "value_loss": self.value_loss,
            "entropy": self.entropy,
            "clip_fraction": self.clip_fraction,
            "approx_kl": self.approx_kl,
        }


def ppo_loss_and_grads(
    net: ActorCritic,
    observations: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PpoConfig,
) -> tuple[LossDiagnostics, dict[str, np.ndarray]]:
    """Clipped-surrogate loss with its full analytic gradient.

    ``advantages`` are expected to be already normalized. The min(.)
    gradient is active exactly when the unclipped surrogate is the smaller
    branch (which includes the whole unclipped region).
    """
    eps = config.clip_epsilon
    batch = observations.shape[0]
    mu, values, cache = net.forward(observations)
    log_std = net.effective_log_std()
    sigma_sq = np.exp(2.0 * log_std)

    log_probs = gaussian_log_prob(actions, mu, log_std)
    ratio = np.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    policy_loss = -np.minimum(unclipped, clipped).mean()
    value_errors = values - returns
    value_loss = float(np.mean(value_errors**2))
    entropy = float(np.sum(log_std + 0.5 * (1.0 + _LOG_2PI)))
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    if not np.isfinite(loss):
        raise NonFiniteError("ppo_loss", f"loss={loss}")

    # d(policy_loss)/d(log_prob_i): active iff the unclipped branch is the min.
    active = (unclipped <= clipped).astype(np.float64)
    dlogp = -(active * advantages * ratio) / batch
    dmu = dlogp[:, None] * (actions - mu) / sigma_sq[None, :]
    dvalue = config.value_coef * 2.0 * value_errors / batch
    grads = net.backward(cache, dmu, dvalue)

    z_sq = ((actions - mu) ** 2) / sigma_sq[None, :]
    dlog_std = (dlogp[:, None] * (z_sq - 1.0)).sum(axis=0) - config.entropy_coef
    grads["log_std"] = dlog_std * net.log_std_grad_mask()

    diagnostics = LossDiagnostics(
        loss=float(loss),
        policy_loss=float(policy_loss),
        value_loss=value_loss,
        entropy=entropy,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
        approx_kl=float(np.mean(old_log_probs - log_probs)),
    )
    return diagnostics, grads


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(
        self,
        params: list[tuple[str, np.ndarray]],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p) for name, p in params}
        self.v = {name: np.zeros_like(p) for name, p in params}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, param in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g**2
            param -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


def update(
    net: ActorCritic,
    optimizer: Adam,
    buffer: RolloutBuffer,
    config: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """One PPO update: several epochs of shuffled minibatches over the buffer."""
    if not buffer.full:
        raise ShuffleRlError("update requires a full rollout buffer")
    diagnostics: list[LossDiagnostics] = []
    for _ in range(config.epochs_per_update):
        order = rng.permutation(buffer.length)
        for start in range(0, buffer.length, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            adv = buffer.advantages[idx]
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            diag, grads = ppo_loss_and_grads(
                net,
                buffer.observations[idx],
                buffer.actions[idx],
                buffer.log_probs[idx],
                adv,
                buffer.returns[idx],
                config,
            )
            clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(grads)
            diagnostics.append(diag)
    keys = ("loss", "policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")
    return {k: float(np.mean([getattr(d, k) for d in diagnostics])) for k in keys}


@dataclass
class TrainResult:
    net: ActorCritic
    curve: list[tuple[int, int, float]] = field(default_factory=list)  # (timestep, episode, reward)
    update_stats: list[dict] = field(default_factory=list)
    timesteps: int = 0

    def write_curve_csv(self, path) -> None:
        """Episode reward curve as ``timestep,episode,reward``."""
        with open(path, "w", newline="", encoding="utf-8") as handle:
            handle.write("timestep,episode,reward\n")
            for timestep, episode, reward in self.curve:
                handle.write(f"{timestep},{episode},{float(reward)!r}\n")


def train_on_env(
    env,
    obs_shape: tuple[int, ...],
    action_dim: int,
    arch: ArchSpec,
    config: PpoConfig,
) -> TrainResult:
    """Generic PPO loop over anything with reset()/step() semantics.

    Episodes restart transparently inside rollouts; each completed episode
    appends (global timestep, episode index, cumulative reward) to the
    curve. ``total_timesteps`` below one rollout means zero updates.
    """
    net = ActorCritic(arch, obs_shape, action_dim, seed=config.seed)
    net.set_training(True)
    optimizer = Adam(net.named_parameters(), config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    result = TrainResult(net)

    n_updates = config.total_timesteps // config.rollout_length
    if n_updates == 0:
        return result

    obs = _obs_array(env.reset())
    episode_reward = 0.0
    episode_index = 0
    for _ in range(n_updates):
        buffer = RolloutBuffer(config.rollout_length, obs_shape, action_dim)
        last_done = False
        while not buffer.full:
            action, log_prob, value = sample_action(net, obs, rng)
            step = env.step(action)
            buffer.add(obs, action, log_prob, step.reward, value, step.done)
            episode_reward += step.reward
            result.timesteps += 1
            last_done = step.done
            if step.done:
                result.curve.append((result.timesteps, episode_index, episode_reward))
                episode_index += 1
                episode_reward = 0.0
                obs = _obs_array(env.reset())
            else:
                obs = _obs_array(step.observation)
        if last_done:
            bootstrap = 0.0
        else:
            _, value_now, _ = net.forward(obs[None, ...])
            bootstrap = float(value_now[0])
        buffer.finalize(bootstrap, config.gamma, config.gae_lambda)
        result.update_stats.append(update(net, optimizer, buffer, config, rng))
    return result


def make_env_config(base: EnvConfig, agent: AgentSpec, ticker_count: int) -> EnvConfig:
    """Fit the layout mode (and permutation) of an env config to an agent."""
    if agent.layout == SHUFFLED:
        perm = ticker_block_permutation(FeatureLayout(ticker_count))
        return replace(base, layout=SHUFFLED, permutation=perm)
    return replace(base, layout=CANONICAL, permutation=None)


def train(
    dataset: MarketDataset,
    env_config: EnvConfig,
    agent: AgentSpec,
    config: PpoConfig,
) -> TrainResult:
    """Train one agent on one market stream (single env, deterministic)."""
    env_config = make_env_config(env_config, agent, dataset.ticker_count)
    env = TradingEnv(dataset, env_config)
    obs_shape = (env_config.window_length, FeatureLayout(dataset.ticker_count).total)
    return train_on_env(env, obs_shape, dataset.ticker_count, agent.resolve_arch(), config)


@dataclass
class EvalReport:
    cumulative_reward: float
    discounted_return: float
    cumulative_return: float
    sharpe_annualized: float | None
    sharpe_raw: float | None
    total_costs: float
    final_value: float
    n_steps: int
    value_series: list[float]

    def to_dict(self) -> dict:
        return {
            "cumulative_reward": self.cumulative_reward,
            "discounted_return": self.discounted_return,
            "cumulative_return": self.cumulative_return,
            "sharpe_annualized": self.sharpe_annualized,
            "sharpe_raw": self.sharpe_raw,
            "total_costs": self.total_costs,
            "final_value": self.final_value,
            "n_steps": self.n_steps,
        }


def evaluate(
    net: ActorCritic,
    dataset: MarketDataset,
    env_config: EnvConfig,
    gamma: float = 0.99,
) -> tuple[EvalReport, TradingEnv]:
    """Deterministic evaluation: the action is the policy mean, batch-norm
    uses its running statistics. Returns the report and the env (whose
    trace holds the daily ledger for CSV export)."""
    env = TradingEnv(dataset, env_config)
    expected = (env_config.window_length, FeatureLayout(dataset.ticker_count).total)
    if tuple(net.obs_shape) != expected:
        raise ShuffleRlError(
            f"checkpoint expects observations {net.obs_shape}, environment emits {expected}"
        )
    was_training = net.training
    net.set_training(False)
    try:
        episode: EpisodeResult = run_episode(env, lambda obs: policy_mean(net, obs), gamma)
    finally:
        net.set_training(was_training)
    values = episode.values
    try:
        returns = daily_returns(values)
        sharpe_ann = sharpe_ratio(returns)
        sharpe_raw = sharpe_ratio(returns, annualization=1.0)
    except UndefinedMetricError:
        sharpe_ann = None
        sharpe_raw = None
    return (
        EvalReport(
            cumulative_reward=episode.total_reward,
            discounted_return=episode.discounted_return,
            cumulative_return=cumulative_return(values),
            sharpe_annualized=sharpe_ann,
            sharpe_raw=sharpe_raw,
            total_costs=env.state.trade_cost_accum,
            final_value=values[-1],
            n_steps=len(episode.rewards),
            value_series=list(values),
        ),
        env,
    )
