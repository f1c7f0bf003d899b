"""Reference exploration methods: action noise, RND and ICM.

All of them plug into the trainer through the same explorer interface as
the masked-prediction explorer (``rewards`` / ``update`` / ``perturb``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .envs import Box, Discrete
from .nn import MLP


def seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


@dataclass
class ExplorationBatch:
    """Everything an explorer may need about one rollout, flattened over steps."""

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    windows: np.ndarray | None = None
    window_pad: np.ndarray | None = None
    embed: object = None
    embed_tensor: object = None
    encoder_params: tuple = ()


class Explorer:
    """Intrinsic reward provider interface.  The default explores with nothing."""

    kind = "none"
    window_length = 0
    beta = 0.0

    def rewards(self, batch: ExplorationBatch) -> np.ndarray:
        return np.zeros(len(batch.obs))

    def update(self, batch: ExplorationBatch) -> float:
        return 0.0

    def perturb(self, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return actions


def action_noise(action, scale: float, rng: np.random.Generator, space):
    """Gaussian noise clipped to bounds (continuous) or epsilon-greedy resampling (discrete)."""
    if scale < 0:
        raise ContractError("noise scale must be >= 0")
    if isinstance(space, Discrete):
        if scale > 0 and rng.random() < scale:
            return int(rng.integers(space.n))
        return action
    a = np.asarray(action, dtype=np.float64)
    if scale == 0:
        return a
    return np.clip(a + rng.normal(0.0, scale, size=a.shape), space.low, space.high)


class NoiseExplorer(Explorer):
    kind = "noise"

    def __init__(self, space, scale: float, seed):
        self.space = space
        self.scale = scale
        self.rng = np.random.default_rng(seed)

    def perturb(self, actions, rng=None):
        return np.array([action_noise(a, self.scale, self.rng, self.space) for a in actions])


class RND(Explorer):
    """Predictor regresses a frozen random target network; error is the bonus."""

    kind = "rnd"

    def __init__(self, obs_dim: int, seed, beta: float = 0.05, feature_dim: int = 32, hidden: int = 64,
                 learning_rate: float = 1e-3, batch_size: int = 256):
        init_rng, self.rng = (np.random.default_rng(s) for s in seed_sequence(seed).spawn(2))
        self.beta = beta
        self.target = MLP(init_rng, [obs_dim, hidden, feature_dim], "rnd.target")
        self.predictor = MLP(init_rng, [obs_dim, hidden, hidden, feature_dim], "rnd.predictor")
        for p in self.target.parameters():
            p.requires_grad = False
        self.optimizer = ad.Adam(self.predictor.parameters(), lr=learning_rate)
        self.batch_size = batch_size

    def reward(self, obs: np.ndarray) -> np.ndarray:
        """Squared prediction error for each row of ``obs``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float32))
        with ad.no_grad():
            diff = self.predictor(obs).data - self.target(obs).data
        return (diff.astype(np.float64) ** 2).sum(axis=-1)

    def rewards(self, batch):
        return self.reward(batch.next_obs)

    def train_step(self, obs: np.ndarray) -> float:
        obs = np.asarray(obs, dtype=np.float32)
        with ad.no_grad():
            target = self.target(obs).data
        self.optimizer.zero_grad()
        loss = ad.mse(self.predictor(obs), target)
        loss.backward()
        self.optimizer.step()
        return float(loss.data)

    def update(self, batch):
        obs = np.asarray(batch.next_obs, dtype=np.float32)
        order = self.rng.permutation(len(obs))
        losses = [self.train_step(obs[order[i:i + self.batch_size]]) for i in range(0, len(obs), self.batch_size)]
        return float(np.mean(losses))


class ICM(Explorer):
    """Inverse-dynamics features plus a forward model whose error is the bonus.

    The forward loss sees detached features, so only the inverse loss
    shapes the feature encoder.
    """

    kind = "icm"

    def __init__(self, obs_dim: int, space, seed, beta: float = 0.05, feature_dim: int = 32, hidden: int = 64,
                 learning_rate: float = 1e-3, forward_weight: float = 0.2, batch_size: int = 256):
        init_rng, self.rng = (np.random.default_rng(s) for s in seed_sequence(seed).spawn(2))
        self.beta = beta
        self.space = space
        self.discrete = isinstance(space, Discrete)
        self.action_dim = space.n if self.discrete else space.dim
        self.features = MLP(init_rng, [obs_dim, hidden, feature_dim], "icm.features", final_activation=True)
        self.inverse = MLP(init_rng, [2 * feature_dim, hidden, self.action_dim], "icm.inverse")
        self.forward_model = MLP(init_rng, [feature_dim + self.action_dim, hidden, feature_dim], "icm.forward")
        params = self.features.parameters() + self.inverse.parameters() + self.forward_model.parameters()
        self.optimizer = ad.Adam(params, lr=learning_rate)
        self.forward_weight = forward_weight
        self.batch_size = batch_size

    def _action_input(self, actions) -> np.ndarray:
        if self.discrete:
            return np.eye(self.action_dim, dtype=np.float32)[np.asarray(actions, dtype=np.int64)]
        return np.asarray(actions, dtype=np.float32).reshape(-1, self.action_dim)

    def reward(self, obs, actions, next_obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float32))
        next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float32))
        with ad.no_grad():
            phi = self.features(obs).data
            phi_next = self.features(next_obs).data
            pred = self.forward_model(np.concatenate([phi, self._action_input(actions)], axis=-1)).data
        return ((pred - phi_next).astype(np.float64) ** 2).sum(axis=-1)

    def rewards(self, batch):
        return self.reward(batch.obs, batch.actions, batch.next_obs)

    def losses(self, obs, actions, next_obs):
        phi = self.features(np.asarray(obs, dtype=np.float32))
        phi_next = self.features(np.asarray(next_obs, dtype=np.float32))
        out = self.inverse(ad.concat([phi, phi_next], axis=-1))
        if self.discrete:
            inverse_loss = ad.scale(ad.mean(ad.pick(ad.log_softmax(out), np.asarray(actions, dtype=np.int64))), -1.0)
        else:
            inverse_loss = ad.mse(out, self._action_input(actions))
        fwd_in = np.concatenate([phi.data, self._action_input(actions)], axis=-1)
        forward_loss = ad.mse(self.forward_model(fwd_in), phi_next.data)
        return inverse_loss, forward_loss

    def train_step(self, obs, actions, next_obs) -> float:
        self.optimizer.zero_grad()
        inv, fwd = self.losses(obs, actions, next_obs)
        loss = ad.add(ad.scale(inv, 1.0 - self.forward_weight), ad.scale(fwd, self.forward_weight))
        loss.backward()
        self.optimizer.step()
        return float(loss.data)

    def inverse_accuracy(self, obs, actions, next_obs) -> float:
        with ad.no_grad():
            phi = self.features(np.asarray(obs, dtype=np.float32))
            phi_next = self.features(np.asarray(next_obs, dtype=np.float32))
            logits = self.inverse(ad.concat([phi, phi_next], axis=-1)).data
        return float((logits.argmax(axis=-1) == np.asarray(actions)).mean())

    def update(self, batch):
        n = len(batch.obs)
        order = self.rng.permutation(n)
        losses = []
        for i in range(0, n, self.batch_size):
            idx = order[i:i + self.batch_size]
            losses.append(self.train_step(batch.obs[idx], batch.actions[idx], batch.next_obs[idx]))
        return float(np.mean(losses))
