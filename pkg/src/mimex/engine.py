"""Masked-prediction intrinsic reward.

A window is the sequence of the last ``T`` observation embeddings ending at
step ``t`` of an episode, zero-padded before the episode start.  The reward
for that window is the masked reconstruction error of the sequence model,
averaged over ``M`` independently sampled masks.  The model is trained
online with one fresh mask per window; rewards never update parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .baselines import ExplorationBatch, Explorer, seed_sequence
from .masking import MaskKind, MaskSpec, sample_mask, sample_mask_batch
from .transformer import MaskedSequenceAutoencoder, TransformerConfig

__all__ = [
    "TransitionRecord",
    "MimexConfig",
    "EmbeddingWindow",
    "build_window",
    "window_indices",
    "intrinsic_reward",
    "intrinsic_rewards",
    "update",
    "mix_rewards",
    "RunningStd",
    "MimexModel",
    "MimexExplorer",
]

REWARD_CHUNK = 4096


@dataclass
class TransitionRecord:
    observation: np.ndarray
    action: object = None
    reward: float = 0.0
    done: bool = False


@dataclass
class MimexConfig:
    window_length: int = 5
    beta: float = 0.05
    mask: MaskSpec = field(default_factory=MaskSpec)
    learning_rate: float = 1e-4
    batch_size: int = 512
    detach_embeddings: bool = True
    normalize_reward: bool = False

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskSpec(**self.mask)
        fixed_current = self.mask.kind == MaskKind.FIXED_CURRENT_TOKEN
        if self.window_length < (1 if fixed_current else 2):
            raise ContractError(f"window_length must be >= 2, got {self.window_length}")
        if self.beta < 0:
            raise ContractError(f"beta must be >= 0, got {self.beta}")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class EmbeddingWindow:
    embeddings: np.ndarray
    pad_flags: np.ndarray
    end_step: int


def window_indices(t: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Source indices for the window ending at ``t`` plus its pad flags."""
    idx = np.arange(t - T + 1, t + 1)
    pad = idx < 0
    return np.where(pad, 0, idx), pad


def build_window(trajectory: Sequence[TransitionRecord], t: int, T: int,
                 encoder: Callable[[np.ndarray], np.ndarray] | None = None) -> EmbeddingWindow:
    """Embeddings ``(z_{t-T+1}, ..., z_t)`` of one episode, zero rows before its start."""
    if not 0 <= t < len(trajectory):
        raise ContractError(f"step {t} outside trajectory of length {len(trajectory)}")
    idx, pad = window_indices(t, T)
    obs = np.stack([np.asarray(trajectory[i].observation, dtype=np.float32) for i in idx])
    if encoder is not None:
        with ad.no_grad():
            z = np.asarray(encoder(obs), dtype=np.float32)
    else:
        z = obs
    z = np.where(pad[:, None], 0.0, z).astype(np.float32)
    return EmbeddingWindow(z, pad, t)


def mix_rewards(r_e, r_i, beta: float):
    return r_e + beta * r_i


def intrinsic_rewards(model: MaskedSequenceAutoencoder, windows: np.ndarray, spec: MaskSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Mean masked error over ``spec.num_samples`` masks for each window in ``windows[B, T, D]``."""
    windows = np.asarray(windows, dtype=model.dtype)
    B, T, D = windows.shape
    M = spec.num_samples
    if B == 0:
        return np.zeros(0)
    repeated = np.repeat(windows, M, axis=0)
    masks = sample_mask_batch(spec, B * M, T, D, rng)
    losses = np.empty(B * M, dtype=np.float64)
    for lo in range(0, B * M, REWARD_CHUNK):
        hi = min(lo + REWARD_CHUNK, B * M)
        fm = None if masks.feature_mask is None else masks.feature_mask[lo:hi]
        losses[lo:hi] = model.per_window_loss(repeated[lo:hi], masks.time_mask[lo:hi], fm)
    return losses.reshape(B, M).mean(axis=1)


def intrinsic_reward(window, model: MaskedSequenceAutoencoder, spec: MaskSpec, rng: np.random.Generator) -> float:
    """Reward for a single window; draws ``spec.num_samples`` masks one by one."""
    z = window.embeddings if isinstance(window, EmbeddingWindow) else np.asarray(window)
    T, D = z.shape
    total = 0.0
    for _ in range(spec.num_samples):
        m = sample_mask(spec, T, D, rng)
        fm = None if m.feature_mask is None else m.feature_mask[None]
        total += float(model.per_window_loss(z[None], m.time_mask[None], fm)[0])
    return total / spec.num_samples


def update(model: MaskedSequenceAutoencoder, optimizer: ad.Adam, windows, spec: MaskSpec,
           rng: np.random.Generator) -> float:
    """One Adam step on a batch of windows with one fresh mask each; returns the pre-step loss.

    ``windows`` is an array ``[B, T, D]`` or a Tensor (when gradients should
    reach whatever produced the embeddings).
    """
    shape = windows.shape
    if len(shape) != 3 or shape[0] == 0:
        raise ContractError("update needs a nonempty [B, T, D] batch of windows")
    B, T, D = shape
    masks = sample_mask_batch(spec, B, T, D, rng)
    optimizer.zero_grad()
    loss = model.masked_loss(windows, masks.time_mask, masks.feature_mask)
    loss.backward()
    optimizer.step()
    return float(loss.data)


class RunningStd:
    """Running standard deviation used to optionally rescale rewards."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: np.ndarray) -> None:
        """Merge a batch into the running moments (parallel-variance update)."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        n, mean = x.size, float(x.mean())
        m2 = float(((x - mean) ** 2).sum())
        total = self.count + n
        delta = mean - self.mean
        self.mean += delta * n / total
        self.m2 += m2 + delta * delta * self.count * n / total
        self.count = total

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(float(np.sqrt(self.m2 / (self.count - 1))), 1e-8)


class MimexModel:
    """Sequence autoencoder, its optimizer and the mask rng stream."""

    def __init__(self, cfg: MimexConfig, tcfg: TransformerConfig, seed, dtype=np.float32):
        init_rng, mask_rng = (np.random.default_rng(s) for s in seed_sequence(seed).spawn(2))
        self.cfg = cfg
        self.net = MaskedSequenceAutoencoder(tcfg, init_rng, dtype)
        self.optimizer = ad.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.rng = mask_rng
        self.normalizer = RunningStd() if cfg.normalize_reward else None

    def rewards(self, windows: np.ndarray) -> np.ndarray:
        r = intrinsic_rewards(self.net, windows, self.cfg.mask, self.rng)
        if self.normalizer is not None:
            self.normalizer.update(r)
            r = r / self.normalizer.std
        return r

    def train_pass(self, windows, extra_params: Sequence[Tensor] = (),
                   embed: Callable[[np.ndarray], Tensor] | None = None, pad: np.ndarray | None = None) -> float:
        """One shuffled pass of minibatch updates over ``windows``; returns the mean loss.

        With ``embed`` set, ``windows`` hold raw observations that are
        embedded with gradient tracking so the loss reaches ``extra_params``.
        """
        n = len(windows)
        if n == 0:
            raise ContractError("train_pass needs at least one window")
        if extra_params:
            self.optimizer = _extend_optimizer(self.optimizer, extra_params)
        order = self.rng.permutation(n)
        losses = []
        for lo in range(0, n, self.cfg.batch_size):
            idx = order[lo:lo + self.cfg.batch_size]
            batch = windows[idx]
            if embed is not None:
                batch = _embed_windows(embed, batch, pad[idx])
            losses.append(update(self.net, self.optimizer, batch, self.cfg.mask, self.rng))
        return float(np.mean(losses))


def _embed_windows(embed, obs_windows: np.ndarray, pad: np.ndarray) -> Tensor:
    B, T, obs_dim = obs_windows.shape
    z = embed(obs_windows.reshape(B * T, obs_dim))
    keep = (~pad).reshape(B * T, 1).astype(z.dtype)
    z = ad.mul(z, np.broadcast_to(keep, z.shape))
    return ad.reshape(z, (B, T, z.shape[-1]))


def _extend_optimizer(opt: ad.Adam, extra: Sequence[Tensor]) -> ad.Adam:
    known = {id(p) for p in opt.params}
    new = [p for p in extra if id(p) not in known]
    if new:
        fresh = ad.Adam(new, lr=opt.lr)
        opt.params.extend(fresh.params)
        opt.states.extend(fresh.states)
    return opt


class MimexExplorer(Explorer):
    """Masked-prediction explorer over windows of policy-encoder embeddings."""

    kind = "mimex"

    def __init__(self, cfg: MimexConfig, tcfg: TransformerConfig, seed):
        self.cfg = cfg
        self.model = MimexModel(cfg, tcfg, seed)
        self.window_length = cfg.window_length
        self.beta = cfg.beta

    def embedded_windows(self, batch: ExplorationBatch) -> np.ndarray:
        n, T, obs_dim = batch.windows.shape
        z = np.asarray(batch.embed(batch.windows.reshape(n * T, obs_dim)), dtype=np.float32)
        z = z.reshape(n, T, -1)
        z[batch.window_pad] = 0.0
        return z

    def rewards(self, batch):
        return self.model.rewards(self.embedded_windows(batch))

    def update(self, batch):
        if self.cfg.detach_embeddings:
            return self.model.train_pass(self.embedded_windows(batch))
        return self.model.train_pass(batch.windows, extra_params=batch.encoder_params,
                                     embed=batch.embed_tensor, pad=batch.window_pad)
