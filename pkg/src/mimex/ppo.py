"""PPO actor-critic with a pluggable intrinsic-reward explorer.

Each rollout steps ``num_envs`` environments for ``horizon`` steps.  After
collection the explorer scores every transition (window ending at the
observation the action led to), rewards are mixed with the explorer's
``beta``, the explorer runs one update pass, and PPO runs its clipped
surrogate updates on the mixed reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .baselines import ICM, RND, ExplorationBatch, Explorer, NoiseExplorer
from .config import ExperimentConfig, PpoConfig
from .engine import MimexExplorer, mix_rewards
from .envs import Box, Discrete, Env, make_env
from .nn import MLP
from .transformer import Linear, TransformerConfig, expected_param_count

LOG_2PI = float(np.log(2 * np.pi))


class ObsNormalizer:
    """Frozen per-dimension affine map fitted on random-policy observations."""

    def __init__(self, mean: np.ndarray, std: np.ndarray, clip: float = 5.0):
        self.mean = mean.astype(np.float32)
        # dims that never varied in the warmup keep unit scale; dividing by ~0
        # would saturate every unseen state at the clip value
        self.std = np.where(std < 1e-6, 1.0, std).astype(np.float32)
        self.clip = clip

    @classmethod
    def identity(cls, dim: int) -> "ObsNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, env: Env, steps: int, rng: np.random.Generator) -> "ObsNormalizer":
        if steps <= 0:
            return cls.identity(env.obs_dim)
        obs = [env.reset(int(rng.integers(2**31)))]
        while len(obs) < steps:
            o, _, done, _ = env.step(env.action_space.sample(rng))
            obs.append(o)
            if done:
                obs.append(env.reset(int(rng.integers(2**31))))
        arr = np.asarray(obs[:steps], dtype=np.float64)
        return cls(arr.mean(axis=0), arr.std(axis=0))

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        z = (np.asarray(obs, dtype=np.float32) - self.mean) / self.std
        return np.clip(z, -self.clip, self.clip).astype(np.float32)


class PolicyNet:
    """Observation encoder shared by an actor head and a critic head."""

    def __init__(self, obs_dim: int, space, rng: np.random.Generator, hidden: int = 64, embed_dim: int = 32):
        self.space = space
        self.discrete = isinstance(space, Discrete)
        self.encoder = MLP(rng, [obs_dim, hidden, embed_dim], "policy.encoder", final_activation=True)
        out = space.n if self.discrete else space.dim
        self.actor = Linear(rng, embed_dim, out, "policy.actor")
        self.actor.weight.data *= 0.01
        self.critic = MLP(rng, [embed_dim, hidden, 1], "policy.critic")
        self.log_std = None if self.discrete else ad.parameter(np.full(out, -0.5, dtype=np.float32), "policy.log_std")
        self.embed_dim = embed_dim

    def encoder_parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.actor.parameters() + self.critic.parameters()
        return params + ([self.log_std] if self.log_std is not None else [])

    def embed(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.encoder(obs).data

    def forward(self, obs):
        z = self.encoder(obs)
        return self.actor(z), ad.reshape(self.critic(z), (z.shape[0],))

    def act(self, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
        """Sample (or take the mode of) the policy; returns actions, log-probs, values."""
        with ad.no_grad():
            head, value = self.forward(obs)
        head, value = head.data.astype(np.float64), value.data.astype(np.float64)
        if self.discrete:
            logp_all = head - head.max(axis=-1, keepdims=True)
            logp_all -= np.log(np.exp(logp_all).sum(axis=-1, keepdims=True))
            if deterministic:
                actions = logp_all.argmax(axis=-1)
            else:
                u = rng.random(len(head))[:, None]
                actions = (np.cumsum(np.exp(logp_all), axis=-1) < u).sum(axis=-1)
                actions = np.minimum(actions, self.space.n - 1)
            return actions.astype(np.int64), logp_all[np.arange(len(head)), actions], value
        std = np.exp(self.log_std.data.astype(np.float64))
        actions = head if deterministic else head + std * rng.standard_normal(head.shape)
        return actions, self._gauss_logp(head, std, actions), value

    @staticmethod
    def _gauss_logp(mean, std, actions):
        z = (actions - mean) / std
        return (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=-1)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logp, _, _ = self.evaluate(obs, actions)
        return logp.data.astype(np.float64)

    def evaluate(self, obs: np.ndarray, actions: np.ndarray):
        """Differentiable log-prob, entropy and value for a batch."""
        head, value = self.forward(obs)
        n = head.shape[0]
        if self.discrete:
            logp_all = ad.log_softmax(head)
            logp = ad.pick(logp_all, np.asarray(actions, dtype=np.int64))
            probs = ad.exp(logp_all)
            entropy = ad.scale(ad.tsum(ad.mul(probs, logp_all), axis=-1), -1.0)
            return logp, entropy, value
        d = head.shape[1]
        ones = Tensor(np.ones((n, 1), dtype=head.dtype))
        log_std = ad.matmul(ones, ad.reshape(self.log_std, (1, d)))
        inv_std = ad.exp(ad.scale(log_std, -1.0))
        z = ad.mul(ad.sub(Tensor(np.asarray(actions, dtype=head.dtype)), head), inv_std)
        per_dim = ad.add(ad.add(ad.scale(ad.square(z), -0.5), ad.scale(log_std, -1.0)), -0.5 * LOG_2PI)
        logp = ad.tsum(per_dim, axis=-1)
        entropy = ad.add(ad.tsum(log_std, axis=-1), d * 0.5 * (1.0 + LOG_2PI))
        return logp, entropy, value


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    next_obs: np.ndarray
    z: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    last_values: np.ndarray
    rewards_ext: np.ndarray
    rewards_int: np.ndarray
    dones: np.ndarray
    successes: np.ndarray
    windows: np.ndarray | None = None
    window_pad: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rewards_ext.size

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        H, N = self.rewards_ext.shape
        return arr.reshape((H * N,) + arr.shape[2:])

    def exploration_batch(self, policy: PolicyNet) -> ExplorationBatch:
        return ExplorationBatch(
            obs=self.flat("obs"), next_obs=self.flat("next_obs"), actions=self.flat("actions"),
            windows=None if self.windows is None else self.flat("windows"),
            window_pad=None if self.window_pad is None else self.flat("window_pad"),
            embed=policy.embed, embed_tensor=policy.encoder, encoder_params=tuple(policy.encoder_parameters()),
        )


class VecRunner:
    """``num_envs`` independent environments plus per-env episode history."""

    def __init__(self, envs: list[Env], normalizer: ObsNormalizer, window_length: int, seed_rng: np.random.Generator):
        self.envs = envs
        self.normalizer = normalizer
        self.T = window_length
        self.seed_rng = seed_rng
        self.obs = np.stack([normalizer(env.reset(int(seed_rng.integers(2**31)))) for env in envs])
        self.history: list[list[np.ndarray]] = [[o] for o in self.obs]
        self.episode_returns = np.zeros(len(envs))
        self.finished_returns: list[float] = []
        self.finished_success: list[bool] = []

    def window(self, i: int, nxt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        past = self.history[i][-(self.T - 1):] if self.T > 1 else []
        rows = past + [nxt]
        pad = self.T - len(rows)
        arr = np.zeros((self.T, nxt.shape[0]), dtype=np.float32)
        arr[pad:] = np.stack(rows)
        flags = np.zeros(self.T, dtype=bool)
        flags[:pad] = True
        return arr, flags


def collect_rollout(policy: PolicyNet, runner: VecRunner, explorer: Explorer, horizon: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Step every env ``horizon`` times, then attach intrinsic rewards from ``explorer``."""
    N, obs_dim = runner.obs.shape
    discrete = policy.discrete
    act_shape = () if discrete else (policy.space.dim,)
    T = explorer.window_length
    buf = dict(
        obs=np.zeros((horizon, N, obs_dim), np.float32), next_obs=np.zeros((horizon, N, obs_dim), np.float32),
        z=np.zeros((horizon, N, policy.embed_dim), np.float32),
        actions=np.zeros((horizon, N) + act_shape, np.int64 if discrete else np.float64),
        log_probs=np.zeros((horizon, N)), values=np.zeros((horizon, N)), rewards_ext=np.zeros((horizon, N)),
        dones=np.zeros((horizon, N), bool), successes=np.zeros((horizon, N), bool),
    )
    windows = np.zeros((horizon, N, T, obs_dim), np.float32) if T else None
    pads = np.zeros((horizon, N, T), bool) if T else None
    for t in range(horizon):
        obs = runner.obs
        actions, logp, values = policy.act(obs, rng)
        executed = explorer.perturb(actions, rng)
        if not np.array_equal(executed, actions):
            logp = policy.log_prob(obs, executed)
        buf["obs"][t] = obs
        buf["z"][t] = policy.embed(obs)
        buf["actions"][t] = executed
        buf["log_probs"][t] = logp
        buf["values"][t] = values
        for i, env in enumerate(runner.envs):
            a = int(executed[i]) if discrete else np.clip(executed[i], policy.space.low, policy.space.high)
            raw, reward, done, info = env.step(a)
            nxt = runner.normalizer(raw)
            buf["next_obs"][t, i] = nxt
            buf["rewards_ext"][t, i] = reward
            buf["dones"][t, i] = done
            buf["successes"][t, i] = info["success"]
            if T:
                windows[t, i], pads[t, i] = runner.window(i, nxt)
            runner.episode_returns[i] += reward
            if done:
                runner.finished_returns.append(runner.episode_returns[i])
                runner.finished_success.append(bool(info["success"]))
                runner.episode_returns[i] = 0.0
                nxt = runner.normalizer(env.reset(int(runner.seed_rng.integers(2**31))))
                runner.history[i] = [nxt]
            else:
                runner.history[i].append(nxt)
                if len(runner.history[i]) > max(T - 1, 1):
                    runner.history[i].pop(0)
            runner.obs[i] = nxt
    with ad.no_grad():
        _, last_v = policy.forward(runner.obs)
    rb = RolloutBuffer(last_values=last_v.data.astype(np.float64), rewards_int=np.zeros((horizon, N)),
                       windows=windows, window_pad=pads, **buf)
    if explorer.kind not in ("none", "noise"):
        rb.rewards_int = explorer.rewards(rb.exploration_batch(policy)).reshape(horizon, N)
    return rb


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_values=None):
    """Generalised advantage estimates and returns.

    ``values`` holds V(s_t) for every step, optionally followed by one extra
    entry bootstrapping the state after the final step; ``last_values`` is the
    same thing passed separately (zero if neither is given).  Arrays may be [H] or [H, N].
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if values.shape[:1] == (rewards.shape[0] + 1,) and last_values is None:
        values, last_values = values[:-1], values[-1]
    if not (rewards.shape == values.shape == dones.shape):
        raise ContractError(f"compute_gae length mismatch: {rewards.shape}, {values.shape}, {dones.shape}")
    H = rewards.shape[0]
    next_v = np.zeros(rewards.shape[1:]) if last_values is None else np.asarray(last_values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(H)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centred = adv - adv.mean()
    std = centred.std()
    return centred / std if std > 1e-12 else centred


def ppo_loss(policy: PolicyNet, obs, actions, old_logp, adv, returns, cfg: PpoConfig):
    logp, entropy, value = policy.evaluate(obs, actions)
    ratio = ad.exp(ad.sub(logp, Tensor(old_logp.astype(logp.dtype))))
    adv_c = adv.astype(logp.dtype)
    surr = ad.minimum(ad.mul(ratio, adv_c), ad.mul(ad.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps), adv_c))
    policy_loss = ad.scale(ad.mean(surr), -1.0)
    value_loss = ad.mse(value, returns.astype(value.dtype))
    ent = ad.mean(entropy)
    total = ad.add(ad.add(policy_loss, ad.scale(value_loss, cfg.value_coef)), ad.scale(ent, -cfg.entropy_coef))
    clipped = np.abs(ratio.data - 1.0) > cfg.clip_eps
    return total, policy_loss, value_loss, ent, float(clipped.mean())


def ppo_update(policy: PolicyNet, optimizer: ad.Adam, buf: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator) -> dict[str, float]:
    obs, actions = buf.flat("obs"), buf.flat("actions")
    old_logp, returns = buf.flat("log_probs"), buf.flat("returns")
    adv = normalize_advantages(buf.flat("advantages"))
    n = len(obs)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = order[lo:lo + cfg.minibatch_size]
            optimizer.zero_grad()
            total, pl, vl, ent, clipfrac = ppo_loss(policy, obs[idx], actions[idx], old_logp[idx], adv[idx],
                                                    returns[idx], cfg)
            total.backward()
            ad.clip_grad_norm(optimizer.params, cfg.max_grad_norm)
            optimizer.step()
            stats["policy_loss"].append(float(pl.data))
            stats["value_loss"].append(float(vl.data))
            stats["entropy"].append(float(ent.data))
            stats["clip_fraction"].append(clipfrac)
    return {k: float(np.mean(v)) for k, v in stats.items()}


def evaluate(policy: PolicyNet, env: Env, normalizer: ObsNormalizer, episodes: int,
             rng: np.random.Generator) -> tuple[float, float]:
    """Deterministic episodes on extrinsic reward only: (success rate, mean return)."""
    wins, total = 0, 0.0
    for _ in range(episodes):
        obs = normalizer(env.reset(int(rng.integers(2**31))))
        done = False
        while not done:
            action, _, _ = policy.act(obs[None], rng, deterministic=True)
            a = int(action[0]) if policy.discrete else np.clip(action[0], policy.space.low, policy.space.high)
            raw, reward, done, info = env.step(a)
            total += reward
            obs = normalizer(raw)
        wins += bool(info["success"])
    return wins / episodes, total / episodes


@dataclass
class CurvePoint:
    env_steps: int
    success_rate: float
    mean_intrinsic: float
    mimex_loss: float


def build_env(cfg: ExperimentConfig, seed: int) -> Env:
    return make_env(cfg.env.name, sparsity=cfg.env.sparsity, seed=seed, **cfg.env.params)


def _baseline_hidden(cfg: ExperimentConfig, obs_dim: int, action_dim: int) -> int:
    """Hidden width for RND/ICM giving roughly the masked model's parameter count."""
    if cfg.baseline.hidden > 0:
        return cfg.baseline.hidden
    t = cfg.transformer
    target = expected_param_count(TransformerConfig(
        input_dim=cfg.ppo.embed_dim, max_len=cfg.mimex.window_length, encoder_dim=t.encoder_dim,
        encoder_blocks=t.encoder_blocks, encoder_heads=t.encoder_heads, decoder_dim=t.decoder_dim,
        decoder_blocks=t.decoder_blocks, decoder_heads=t.decoder_heads, mlp_ratio=t.mlp_ratio))
    f = cfg.baseline.feature_dim
    if cfg.explorer == "rnd":
        count = lambda h: (obs_dim + 1) * h + (h + 1) * h + (h + 1) * f  # predictor only
    else:
        count = lambda h: (obs_dim + 1) * h + (h + 1) * f + (2 * f + 1) * h + (h + 1) * action_dim \
            + (f + action_dim + 1) * h + (h + 1) * f
    h = 8
    while count(h) < target / 1.5 and h < 4096:
        h += 8
    return h


def make_explorer(cfg: ExperimentConfig, obs_dim: int, space, seed) -> Explorer:
    kind = cfg.explorer
    if kind == "none":
        return Explorer()
    if kind == "noise":
        return NoiseExplorer(space, cfg.baseline.noise_scale, seed)
    action_dim = space.n if isinstance(space, Discrete) else space.dim
    if kind == "rnd":
        return RND(obs_dim, seed, beta=cfg.mimex.beta, feature_dim=cfg.baseline.feature_dim,
                   hidden=_baseline_hidden(cfg, obs_dim, action_dim), learning_rate=cfg.baseline.learning_rate,
                   batch_size=cfg.baseline.batch_size)
    if kind == "icm":
        return ICM(obs_dim, space, seed, beta=cfg.mimex.beta, feature_dim=cfg.baseline.feature_dim,
                   hidden=_baseline_hidden(cfg, obs_dim, action_dim), learning_rate=cfg.baseline.learning_rate,
                   forward_weight=cfg.baseline.icm_forward_weight, batch_size=cfg.baseline.batch_size)
    t = cfg.transformer
    tcfg = TransformerConfig(input_dim=cfg.ppo.embed_dim, max_len=cfg.mimex.window_length,
                             encoder_dim=t.encoder_dim, encoder_blocks=t.encoder_blocks,
                             encoder_heads=t.encoder_heads, decoder_dim=t.decoder_dim,
                             decoder_blocks=t.decoder_blocks, decoder_heads=t.decoder_heads, mlp_ratio=t.mlp_ratio)
    return MimexExplorer(cfg.mimex, tcfg, seed)


@dataclass
class Trainer:
    """Holds every piece of one seeded training run."""

    cfg: ExperimentConfig
    seed: int
    policy: PolicyNet = field(init=False)
    explorer: Explorer = field(init=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed)
        (init_s, act_s, norm_s, env_s, expl_s, ppo_s, eval_s) = ss.spawn(7)
        cfg = self.cfg
        probe = build_env(cfg, 0)
        self.obs_dim, self.space = probe.obs_dim, probe.action_space
        self.normalizer = ObsNormalizer.fit(probe, cfg.ppo.obs_norm_steps, np.random.default_rng(norm_s))
        self.policy = PolicyNet(self.obs_dim, self.space, np.random.default_rng(init_s),
                                cfg.ppo.hidden, cfg.ppo.embed_dim)
        self.optimizer = ad.Adam(self.policy.parameters(), lr=cfg.ppo.learning_rate)
        explorer_obs_dim = cfg.ppo.embed_dim if cfg.explorer == "mimex" else self.obs_dim
        self.explorer = make_explorer(cfg, explorer_obs_dim, self.space, expl_s)
        env_rng = np.random.default_rng(env_s)
        envs = [build_env(cfg, int(env_rng.integers(2**31))) for _ in range(cfg.ppo.num_envs)]
        self.runner = VecRunner(envs, self.normalizer, self.explorer.window_length, env_rng)
        self.act_rng = np.random.default_rng(act_s)
        self.ppo_rng = np.random.default_rng(ppo_s)
        self.eval_rng = np.random.default_rng(eval_s)
        self.eval_env = build_env(cfg, 0)
        self.env_steps = 0
        self.last_stats: dict[str, float] = {}

    def iteration(self) -> tuple[RolloutBuffer, float]:
        cfg = self.cfg
        buf = collect_rollout(self.policy, self.runner, self.explorer, cfg.ppo.horizon, self.act_rng)
        self.env_steps += len(buf)
        explorer_loss = 0.0
        if self.explorer.kind not in ("none", "noise"):
            explorer_loss = self.explorer.update(buf.exploration_batch(self.policy))
        total = mix_rewards(buf.rewards_ext, buf.rewards_int, self.explorer.beta)
        buf.advantages, buf.returns = compute_gae(total, buf.values, buf.dones, cfg.ppo.gamma, cfg.ppo.lam,
                                                  buf.last_values)
        self.last_stats = ppo_update(self.policy, self.optimizer, buf, cfg.ppo, self.ppo_rng)
        return buf, explorer_loss

    def evaluate(self) -> float:
        return evaluate(self.policy, self.eval_env, self.normalizer, self.cfg.eval_episodes, self.eval_rng)[0]


def train(cfg: ExperimentConfig, seed: int, progress=None) -> list[CurvePoint]:
    """Run PPO for ``cfg.total_env_steps`` steps, evaluating every ``cfg.eval_every`` steps."""
    trainer = Trainer(cfg, seed)
    curve = [CurvePoint(0, trainer.evaluate(), 0.0, 0.0)]
    next_eval = cfg.eval_every
    while trainer.env_steps < cfg.total_env_steps:
        buf, loss = trainer.iteration()
        if trainer.env_steps >= next_eval or trainer.env_steps >= cfg.total_env_steps:
            point = CurvePoint(trainer.env_steps, trainer.evaluate(), float(buf.rewards_int.mean()), loss)
            curve.append(point)
            if progress is not None:
                progress(seed, point)
            while next_eval <= trainer.env_steps:
                next_eval += cfg.eval_every
    return curve
