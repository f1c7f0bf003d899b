"""Small hard-exploration environments with selectable reward sparsity.

Every task defines three reward levels.  ``sparser`` pays only the terminal
success bonus, ``sparse`` adds one intermediate milestone bonus, and
``dense`` further adds a non-negative per-step shaping term that grows as
the agent approaches its current sub-goal.  Terms are only ever removed
when moving to a sparser level, so per-step rewards are ordered
dense >= sparse >= sparser along any trajectory.
"""

from __future__ import annotations

import csv
import hashlib
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .autodiff import ContractError

__all__ = [
    "SparsityLevel",
    "Discrete",
    "Box",
    "Env",
    "ChainMDP",
    "KeyDoorGrid",
    "ContinuousPoint",
    "NoisyLiftWrapper",
    "CatalogEntry",
    "env_catalog",
    "make_env",
    "ENV_REGISTRY",
    "record_episode",
    "write_trace",
    "obs_hash",
]

SHAPING_SCALE = 0.01


class SparsityLevel(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    SPARSER = "sparser"


@dataclass(frozen=True)
class Discrete:
    n: int

    def sample(self, rng: np.random.Generator):
        return int(rng.integers(self.n))

    def contains(self, action) -> bool:
        return isinstance(action, (int, np.integer)) and 0 <= action < self.n


@dataclass(frozen=True)
class Box:
    low: float
    high: float
    dim: int

    def sample(self, rng: np.random.Generator):
        return rng.uniform(self.low, self.high, size=self.dim)

    def contains(self, action) -> bool:
        a = np.asarray(action, dtype=np.float64)
        return a.shape == (self.dim,) and bool(((a >= self.low - 1e-6) & (a <= self.high + 1e-6)).all())


class Env:
    """Base class: seeded reset, horizon bookkeeping, done guard."""

    name = "Env"
    obs_dim: int
    action_space: Discrete | Box
    horizon: int

    def __init__(self, sparsity: SparsityLevel | str = SparsityLevel.SPARSER, horizon: int = 100, seed: int = 0):
        self.sparsity = SparsityLevel(sparsity)
        if horizon < 1:
            raise ContractError("horizon must be >= 1")
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self.done = False
        self._reset_state()
        return self.observe()

    def step(self, action):
        if self.done:
            raise ContractError(f"{self.name}: step() called on a finished episode; call reset()")
        if not self.action_space.contains(action):
            raise ContractError(f"{self.name}: action {action!r} outside {self.action_space}")
        terms, success = self._transition(action)
        self.step_count += 1
        reward = float(sum(terms.values()))
        self.done = success or self.step_count >= self.horizon
        info = {"success": success, "state_id": self.state_id(), "reward_terms": terms}
        return self.observe(), reward, self.done, info

    def _reward_terms(self, success: bool, milestone: bool, progress: float) -> dict[str, float]:
        terms = {"success": 1.0 if success else 0.0}
        if self.sparsity != SparsityLevel.SPARSER:
            terms["milestone"] = 0.5 if milestone else 0.0
        if self.sparsity == SparsityLevel.DENSE:
            terms["shaping"] = SHAPING_SCALE * float(np.clip(progress, 0.0, 1.0))
        return terms

    def _reset_state(self) -> None:
        raise NotImplementedError

    def _transition(self, action) -> tuple[dict[str, float], bool]:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def state_id(self):
        raise NotImplementedError

    def num_states(self) -> int | None:
        return None


class ChainMDP(Env):
    """Chain of ``N`` states; one action advances, the other drops into an absorbing pit.

    Which of the two actions advances is drawn per state from ``layout_seed``
    and then fixed, so "always press the same button" is not a solution and
    a policy has to learn every state separately.  The agent starts at state
    0 and succeeds on reaching state ``N-1``; a uniformly random policy
    succeeds with probability exactly 2^-(N-1) per episode.  The pit keeps
    the episode running until the horizon.  The milestone is the first
    visit to the middle state.  Observations are one-hot over the ``N``
    chain states plus the pit.
    """

    name = "ChainMDP"

    def __init__(self, N: int = 25, sparsity=SparsityLevel.SPARSER, horizon: int | None = None, seed: int = 0,
                 layout_seed: int = 0):
        if N < 2:
            raise ContractError("ChainMDP needs N >= 2")
        super().__init__(sparsity, horizon if horizon is not None else max(2 * N, 10), seed)
        self.N = N
        self.obs_dim = N + 1
        self.action_space = Discrete(2)
        self.advance_action = np.random.default_rng([layout_seed, 0xC4A1]).integers(2, size=N)

    def _reset_state(self):
        self.pos = 0
        self.milestone_paid = False

    def _transition(self, action):
        if self.pos == self.N:
            pass
        elif action == self.advance_action[self.pos]:
            self.pos += 1
        else:
            self.pos = self.N
        success = self.pos == self.N - 1
        milestone = False
        if self.pos == self.N // 2 and not self.milestone_paid:
            milestone = self.milestone_paid = True
        progress = 0.0 if self.pos == self.N else self.pos / (self.N - 1)
        return self._reward_terms(success, milestone, progress), success

    def observe(self):
        obs = np.zeros(self.obs_dim, dtype=np.float32)
        obs[self.pos] = 1.0
        return obs

    def state_id(self):
        return int(self.pos)

    def num_states(self):
        return self.N + 1


class KeyDoorGrid(Env):
    """Two-room grid: fetch the key from the far room, then come back to the door.

    Layout (x right, y down) for the default 7x7 grid::

        S S . . . . D
        S S . . . . .
        S S . . . . .
        # # # # # . #
        . . . . . . .
        . . . . . . .
        K . . . . . .

    The agent starts on a random ``S`` cell.  The door is impassable without
    the key; stepping onto it with the key is success, so a solution crosses
    the gap twice.  Milestone: key pickup (+0.5 at the sparse level).
    Shaping uses shortest-path distance to the key, then to the door.
    Observations are a one-hot cell index followed by a has-key flag.
    """

    name = "KeyDoorGrid"
    MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))

    def __init__(self, width: int = 7, height: int = 7, sparsity=SparsityLevel.SPARSE,
                 horizon: int = 100, seed: int = 0):
        if width < 4 or height < 4:
            raise ContractError("KeyDoorGrid needs width, height >= 4")
        super().__init__(sparsity, horizon, seed)
        self.W, self.H = width, height
        self.wall_y = height // 2
        self.gap = (width - 2, self.wall_y)
        self.key_pos = (0, height - 1)
        self.door_pos = (width - 1, 0)
        self.start_cells = [(x, y) for y in range(self.wall_y) for x in range(2)]
        self.obs_dim = width * height + 1
        self.action_space = Discrete(4)
        self.dist_to_key = self._bfs(self.key_pos)
        self.dist_to_door = self._bfs(self.door_pos)
        self.max_dist = max(max(self.dist_to_key.values()), max(self.dist_to_door.values()))

    def _free(self, cell, has_key: bool) -> bool:
        x, y = cell
        if not (0 <= x < self.W and 0 <= y < self.H):
            return False
        if y == self.wall_y and cell != self.gap:
            return False
        return has_key or cell != self.door_pos

    def _bfs(self, target):
        dist = {target: 0}
        queue = deque([target])
        while queue:
            cx, cy = queue.popleft()
            for dx, dy in self.MOVES:
                nxt = (cx + dx, cy + dy)
                if nxt not in dist and self._free(nxt, True):
                    dist[nxt] = dist[(cx, cy)] + 1
                    queue.append(nxt)
        return dist

    def _reset_state(self):
        self.pos = self.start_cells[int(self.rng.integers(len(self.start_cells)))]
        self.has_key = False

    def _transition(self, action):
        dx, dy = self.MOVES[int(action)]
        nxt = (self.pos[0] + dx, self.pos[1] + dy)
        if self._free(nxt, self.has_key):
            self.pos = nxt
        milestone = False
        if not self.has_key and self.pos == self.key_pos:
            self.has_key = milestone = True
        success = self.has_key and self.pos == self.door_pos
        dist = (self.dist_to_door if self.has_key else self.dist_to_key)[self.pos]
        return self._reward_terms(success, milestone, 1.0 - dist / self.max_dist), success

    def observe(self):
        obs = np.zeros(self.obs_dim, dtype=np.float32)
        obs[self.pos[1] * self.W + self.pos[0]] = 1.0
        obs[-1] = float(self.has_key)
        return obs

    def state_id(self):
        return int(2 * (self.pos[1] * self.W + self.pos[0]) + self.has_key)

    def num_states(self):
        return 2 * self.W * self.H


class ContinuousPoint(Env):
    """Velocity-controlled point in [-1, 1]^2 that must enter a small goal ball.

    Actions in [-1, 1]^2 are scaled by ``speed``.  The start is jittered
    around the corner opposite the goal.  Milestone: first entry into the
    ball of radius ``0.5`` around the goal.
    """

    name = "ContinuousPoint"

    def __init__(self, goal_radius: float = 0.1, speed: float = 0.05, sparsity=SparsityLevel.SPARSER,
                 horizon: int = 100, seed: int = 0):
        super().__init__(sparsity, horizon, seed)
        self.goal = np.array([0.7, 0.7])
        self.goal_radius = goal_radius
        self.speed = speed
        self.obs_dim = 2
        self.action_space = Box(-1.0, 1.0, 2)
        self.max_dist = float(np.linalg.norm([2.0, 2.0]))

    def _reset_state(self):
        self.pos = np.array([-0.7, -0.7]) + self.rng.uniform(-0.1, 0.1, size=2)
        self.milestone_paid = False

    def _transition(self, action):
        self.pos = np.clip(self.pos + self.speed * np.asarray(action, dtype=np.float64), -1.0, 1.0)
        dist = float(np.linalg.norm(self.pos - self.goal))
        milestone = False
        if dist < 0.5 and not self.milestone_paid:
            milestone = self.milestone_paid = True
        success = dist < self.goal_radius
        return self._reward_terms(success, milestone, 1.0 - dist / self.max_dist), success

    def observe(self):
        return self.pos.astype(np.float32)

    def state_id(self):
        return obs_hash(self.observe())


class NoisyLiftWrapper(Env):
    """Lift another env's observation into ``D`` dims: fixed orthonormal projection plus noise."""

    name = "NoisyLiftWrapper"

    def __init__(self, base: Env, D: int = 64, sigma: float = 0.05, seed: int = 0):
        if D < base.obs_dim:
            raise ContractError(f"lift dimension {D} smaller than base obs_dim {base.obs_dim}")
        self.base = base
        self.D = D
        self.sigma = sigma
        proj_rng = np.random.default_rng([seed, 0x11F7])
        q, _ = np.linalg.qr(proj_rng.standard_normal((D, base.obs_dim)))
        self.projection = q.astype(np.float32)
        self.noise_rng = np.random.default_rng([seed, 0x5EED])
        self.obs_dim = D
        self.action_space = base.action_space
        self.horizon = base.horizon
        self.sparsity = base.sparsity

    @property
    def step_count(self):
        return self.base.step_count

    @property
    def done(self):
        return self.base.done

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.noise_rng = np.random.default_rng([seed, 0x5EED])
        return self._lift(self.base.reset(seed))

    def step(self, action):
        obs, reward, done, info = self.base.step(action)
        return self._lift(obs), reward, done, info

    def _lift(self, obs):
        noise = self.sigma * self.noise_rng.standard_normal(self.D)
        return (self.projection @ obs + noise).astype(np.float32)

    def state_id(self):
        return self.base.state_id()

    def num_states(self):
        return self.base.num_states()


def _make_lift(sparsity=SparsityLevel.SPARSER, base: str = "ChainMDP", base_params: dict | None = None,
               D: int = 64, sigma: float = 0.05, seed: int = 0):
    inner = make_env(base, sparsity=sparsity, seed=seed, **(base_params or {}))
    return NoisyLiftWrapper(inner, D=D, sigma=sigma, seed=seed)


ENV_REGISTRY: dict[str, Callable[..., Env]] = {
    "ChainMDP": ChainMDP,
    "KeyDoorGrid": KeyDoorGrid,
    "ContinuousPoint": ContinuousPoint,
    "NoisyLiftWrapper": _make_lift,
}


def make_env(name: str, sparsity=SparsityLevel.SPARSER, seed: int = 0, **params) -> Env:
    if name not in ENV_REGISTRY:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(ENV_REGISTRY)}")
    return ENV_REGISTRY[name](sparsity=sparsity, seed=seed, **params)


class CatalogEntry(NamedTuple):
    name: str
    obs_dim: int
    action_space: Discrete | Box
    horizon: int


def env_catalog() -> list[CatalogEntry]:
    """Default instance of every registered environment."""
    out = []
    for name in ENV_REGISTRY:
        env = make_env(name)
        out.append(CatalogEntry(name, env.obs_dim, env.action_space, env.horizon))
    return out


def obs_hash(obs: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(obs, dtype=np.float32).tobytes()).hexdigest()[:12]


def record_episode(env: Env, policy: Callable[[np.ndarray], object], seed: int | None = None) -> list[tuple]:
    """Run one episode and return trace rows ``(step, state_id, action, reward, done)``."""
    obs = env.reset(seed)
    rows = []
    done = False
    while not done:
        action = policy(obs)
        obs, reward, done, info = env.step(action)
        shown = action if np.isscalar(action) else ";".join(f"{a:.6g}" for a in np.ravel(action))
        rows.append((env.step_count, info["state_id"], shown, reward, int(done)))
    return rows


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "state_id", "action", "reward", "done"])
        writer.writerows(rows)
