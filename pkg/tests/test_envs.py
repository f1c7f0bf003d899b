import csv
import itertools
from collections import deque

import numpy as np
import pytest

from mimex.autodiff import ContractError
from mimex.envs import (
    Box,
    ChainMDP,
    ContinuousPoint,
    Discrete,
    KeyDoorGrid,
    NoisyLiftWrapper,
    SparsityLevel,
    env_catalog,
    make_env,
    record_episode,
    write_trace,
)

LEVELS = ("dense", "sparse", "sparser")


def test_reset_is_seed_deterministic():
    for name in ("ChainMDP", "KeyDoorGrid", "ContinuousPoint", "NoisyLiftWrapper"):
        env = make_env(name)
        a = env.reset(seed=3)
        b = env.reset(seed=3)
        assert a.tobytes() == b.tobytes() and env.step_count == 0


@pytest.mark.parametrize("name", ["KeyDoorGrid", "ContinuousPoint"])
def test_stochastic_starts_vary_with_seed(name):
    env = make_env(name)
    starts = {env.reset(seed=s).tobytes() for s in range(20)}
    assert len(starts) > 1


def test_step_contracts():
    env = ChainMDP(N=3, horizon=5)
    with pytest.raises(ContractError):
        env.step(1)  # never reset
    env.reset(0)
    with pytest.raises(ContractError):
        env.step(2)
    env.step(int(env.advance_action[0]))
    env.step(int(env.advance_action[1]))
    assert env.done
    with pytest.raises(ContractError):
        env.step(1)
    box = ContinuousPoint()
    box.reset(0)
    with pytest.raises(ContractError):
        box.step(np.array([2.0, 0.0]))


def test_chain_sparser_rewards_only_at_far_end():
    env = ChainMDP(N=30, sparsity="sparser")
    env.reset(0)
    rewards = []
    done = False
    while not done:
        _, r, done, info = env.step(int(env.advance_action[env.pos]))
        rewards.append(r)
    assert rewards == [0.0] * 28 + [1.0] and info["success"]


def test_chain_left_falls_into_absorbing_pit():
    env = ChainMDP(N=5, horizon=10)
    env.reset(0)
    env.step(1 - int(env.advance_action[0]))
    for _ in range(8):
        _, r, done, info = env.step(int(env.advance_action[0]))
        assert r == 0.0 and info["state_id"] == 5
    assert not done
    assert env.step(0)[2]


def test_chain_layout_is_fixed_and_mixed():
    a, b = ChainMDP(N=25, seed=1), ChainMDP(N=25, seed=2)
    np.testing.assert_array_equal(a.advance_action, b.advance_action)
    assert 0 < a.advance_action.sum() < 25
    assert not np.array_equal(a.advance_action, ChainMDP(N=25, layout_seed=1).advance_action)


def test_chain_random_success_probability_by_enumeration():
    N, horizon = 5, 8
    wins = 0
    for actions in itertools.product((0, 1), repeat=horizon):
        env = ChainMDP(N=N, horizon=horizon)
        env.reset(0)
        for a in actions:
            _, _, done, info = env.step(a)
            if done:
                break
        wins += info["success"]
    assert wins / 2 ** horizon <= 2.0 ** -(N - 1)
    assert wins / 2 ** horizon == pytest.approx(2.0 ** -(N - 1))


def _bfs_path(env: KeyDoorGrid, start, goal, has_key):
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        for a, (dx, dy) in enumerate(KeyDoorGrid.MOVES):
            nxt = (cur[0] + dx, cur[1] + dy)
            if nxt not in prev and env._free(nxt, has_key):
                prev[nxt] = (cur, a)
                queue.append(nxt)
    actions = []
    while prev[goal] is not None:
        goal, a = prev[goal]
        actions.append(a)
    return actions[::-1]


def scripted_keydoor(sparsity, seed=0):
    env = KeyDoorGrid(sparsity=sparsity)
    env.reset(seed)
    plan = _bfs_path(env, env.pos, env.key_pos, False) + _bfs_path(env, env.key_pos, env.door_pos, True)
    out = []
    for a in plan:
        _, r, done, info = env.step(a)
        out.append((r, info))
    return out


def test_keydoor_sparse_rewards():
    steps = scripted_keydoor("sparse")
    rewards = [r for r, _ in steps]
    assert sorted(set(rewards)) == [0.0, 0.5, 1.0]
    assert rewards.count(0.5) == 1 and rewards[-1] == 1.0
    assert steps[-1][1]["success"]
    assert all("shaping" not in info["reward_terms"] for _, info in steps)


def test_keydoor_door_blocks_without_key():
    env = KeyDoorGrid()
    env.reset(0)
    env.pos, env.has_key = (env.door_pos[0] - 1, env.door_pos[1]), False
    env.step(3)  # move right into the door
    assert env.pos != env.door_pos


def test_sparsification_is_monotone_along_scripted_trajectory():
    per_level = {lvl: [r for r, _ in scripted_keydoor(lvl)] for lvl in LEVELS}
    for d, s, ss in zip(per_level["dense"], per_level["sparse"], per_level["sparser"]):
        assert d >= s >= ss
    goal = {lvl: scripted_keydoor(lvl)[-1][1]["reward_terms"] for lvl in LEVELS}
    assert sum(goal["dense"].values()) - goal["dense"].get("shaping", 0.0) >= sum(goal["sparse"].values()) - 0.5


def test_continuous_point_reaches_goal():
    env = ContinuousPoint(sparsity="sparser")
    obs = env.reset(0)
    done = False
    while not done:
        direction = env.goal - obs
        obs, r, done, info = env.step(np.clip(direction / (np.abs(direction).max() + 1e-9), -1, 1))
    assert info["success"] and r == 1.0


def test_catalog():
    cat = {e.name: e for e in env_catalog()}
    assert {"ChainMDP", "KeyDoorGrid", "NoisyLiftWrapper"} <= set(cat)
    assert all(e.horizon >= 10 for e in cat.values())
    assert cat["NoisyLiftWrapper"].obs_dim == 64
    assert isinstance(cat["KeyDoorGrid"].action_space, Discrete)
    assert isinstance(cat["ContinuousPoint"].action_space, Box)


def _decode(vec, base):
    if isinstance(base, KeyDoorGrid):
        cell = int(vec[:-1].argmax())
        return (cell % base.W, cell // base.W, int(vec[-1] > 0.5))
    return int(vec.argmax())


def _true_state(base):
    if isinstance(base, KeyDoorGrid):
        return (*base.pos, int(base.has_key))
    return base.state_id()


def _random_state(base, rng):
    if isinstance(base, KeyDoorGrid):
        free = [(x, y) for x in range(base.W) for y in range(base.H) if base._free((x, y), True)]
        base.pos = free[rng.integers(len(free))]
        base.has_key = bool(rng.integers(2))
    else:
        base.pos = int(rng.integers(base.N + 1))


@pytest.mark.parametrize("base", [ChainMDP(N=25, horizon=60), KeyDoorGrid()], ids=["chain", "keydoor"])
def test_noisy_lift_linear_probe_decodes_state(base):
    # least-squares map from lifted obs back to the base obs, fit on 1000 states drawn uniformly
    env = NoisyLiftWrapper(base, D=64, sigma=0.05, seed=1)
    env.reset(0)
    rng = np.random.default_rng(0)
    lifted, clean, states = [], [], []
    for _ in range(3000):
        _random_state(base, rng)
        lifted.append(env._lift(base.observe()))
        clean.append(base.observe())
        states.append(_true_state(base))
    X = np.c_[np.array(lifted), np.ones(len(lifted))]
    W, *_ = np.linalg.lstsq(X[:1000], np.array(clean)[:1000], rcond=None)
    decoded = [_decode(v, base) for v in X[1000:] @ W]
    accuracy = np.mean([d == t for d, t in zip(decoded, states[1000:])])
    assert accuracy > 0.99


def test_trace_csv(tmp_path):
    env = ChainMDP(N=4, horizon=6)
    rows = record_episode(env, lambda obs: int(env.advance_action[int(np.argmax(obs))]), seed=0)
    path = tmp_path / "trace.csv"
    write_trace(path, rows)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["step", "state_id", "action", "reward", "done"]
    assert table[-1][-1] == "1" and float(table[-1][3]) == 1.0


def test_sparsity_enum_values():
    assert [s.value for s in SparsityLevel] == list(LEVELS)
