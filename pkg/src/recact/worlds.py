"""Built-in environments and dataset generators.

Dark-Room: a grid world with an invisible goal; the agent only observes its
own (x, y). Reward is +1 for every step taken while standing on the goal, so
the best return is horizon - manhattan(start, goal). A tabular Q-learning
runner records whole learning histories for in-context-learning training.

PointReach: a continuous-action reaching task (non-paper); it exists to
exercise action discretization, state padding, and multi-domain batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import Trajectory

DARKROOM_ACTIONS = ("up", "down", "left", "right", "stay")
_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))


@dataclass
class DarkRoomConfig:
    grid_size: int = 10
    horizon: int = 100
    goal: tuple[int, int] = (9, 9)
    start: tuple[int, int] = (0, 0)
    image_obs: bool = False

    def __post_init__(self):
        for c in (*self.goal, *self.start):
            if not 0 <= c < self.grid_size:
                raise ValueError("goal and start must lie inside the grid")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class PointReachConfig:
    horizon: int = 50
    goal: tuple[float, float] = (0.5, 0.5)
    start: tuple[float, float] = (0.0, 0.0)
    max_step: float = 0.1

    def __post_init__(self):
        if not all(-1.0 <= g <= 1.0 for g in self.goal):
            raise ValueError("goal must lie inside the [-1,1]^2 arena")


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    t: int  # step index, 1-based; done iff t == horizon


class DarkRoomEnv:
    """Reward is paid for the position an action is taken from, so staying on
    the goal keeps collecting +1 and the first arrival step earns nothing."""

    def __init__(self, cfg: DarkRoomConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> np.ndarray:
        self.pos = tuple(self.cfg.start)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.cfg.image_obs:
            return darkroom_render(self.pos, self.cfg)
        return np.asarray(self.pos, dtype=np.float32)

    def step(self, action: int) -> EnvStep:
        if not 0 <= int(action) < len(DARKROOM_ACTIONS):
            raise ValueError(f"invalid action id {action}")
        if self.t >= self.cfg.horizon:
            raise RuntimeError("episode is over; call reset()")
        reward = 1.0 if self.pos == tuple(self.cfg.goal) else 0.0
        dx, dy = _MOVES[int(action)]
        g = self.cfg.grid_size
        self.pos = (min(max(self.pos[0] + dx, 0), g - 1), min(max(self.pos[1] + dy, 0), g - 1))
        self.t += 1
        return EnvStep(self.observe(), reward, self.t == self.cfg.horizon, self.t)


def darkroom_render(pos: tuple[int, int], cfg: DarkRoomConfig) -> np.ndarray:
    """Grayscale 1x64x64 frame: agent cell bright, everything else dark.

    The goal is not drawn (the room is dark)."""
    img = np.zeros((1, 64, 64), dtype=np.float32)
    cell = 64 // cfg.grid_size
    x0, y0 = pos[0] * cell, pos[1] * cell
    img[0, y0 : y0 + cell, x0 : x0 + cell] = 1.0
    return img


def darkroom_max_return(cfg: DarkRoomConfig) -> int:
    dist = abs(cfg.goal[0] - cfg.start[0]) + abs(cfg.goal[1] - cfg.start[1])
    return cfg.horizon - dist


def sample_goal_split(
    n_train: int = 80, n_eval: int = 20, seed: int = 0, grid_size: int = 10
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    cells = [(x, y) for x in range(grid_size) for y in range(grid_size)]
    if n_train + n_eval > len(cells):
        raise ValueError("goal split exceeds the number of grid cells")
    order = np.random.default_rng(seed).permutation(len(cells))
    train = [cells[i] for i in order[:n_train]]
    evals = [cells[i] for i in order[n_train : n_train + n_eval]]
    return train, evals


class PointReachEnv:
    def __init__(self, cfg: PointReachConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> np.ndarray:
        self.pos = np.asarray(self.cfg.start, dtype=np.float64)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.concatenate([self.pos, self.cfg.goal]).astype(np.float32)

    def step(self, action: np.ndarray) -> EnvStep:
        if self.t >= self.cfg.horizon:
            raise RuntimeError("episode is over; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.pos = np.clip(self.pos + self.cfg.max_step * a, -1.0, 1.0)
        self.t += 1
        reward = -float(np.linalg.norm(self.pos - np.asarray(self.cfg.goal)))
        return EnvStep(self.observe(), reward, self.t == self.cfg.horizon, self.t)


def pointreach_best_return(cfg: PointReachConfig) -> float:
    """Analytic optimum. Actions are box-constrained per coordinate, so each
    coordinate independently closes at most max_step per move."""
    delta = np.abs(np.asarray(cfg.start, float) - np.asarray(cfg.goal, float))
    k = np.arange(1, cfg.horizon + 1)[:, None]
    rem = np.maximum(delta[None, :] - cfg.max_step * k, 0.0)
    return float(-np.sqrt((rem**2).sum(axis=1)).sum())


def pointreach_expert_action(pos: np.ndarray, goal, max_step: float) -> np.ndarray:
    return np.clip((np.asarray(goal, float) - pos) / max_step, -1.0, 1.0)


# ---------------------------------------------------------------------------
# data generators


def _record_episode(env, policy_fn, domain: str, task: str, meta=None) -> Trajectory:
    obs = env.reset()
    states, actions, rewards = [], [], []
    done = False
    while not done:
        a = policy_fn(obs)
        step = env.step(a)
        states.append(obs)
        actions.append(a)
        rewards.append(step.reward)
        obs = step.observation
        done = step.done
    if isinstance(actions[0], (int, np.integer)):
        acts = np.asarray(actions, dtype=np.int64)
    else:
        acts = np.asarray(actions, dtype=np.float32)
    return Trajectory(
        domain=domain,
        task=task,
        states=np.asarray(states, dtype=np.float32),
        actions=acts,
        rewards=np.asarray(rewards, dtype=np.float32),
        meta=meta or {},
    )


def darkroom_expert_policy(cfg: DarkRoomConfig, eps: float, rng: np.random.Generator):
    gx, gy = cfg.goal

    def policy(obs):
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(0, 5))
        if cfg.image_obs:
            raise ValueError("expert policy needs vector observations")
        x, y = int(obs[0]), int(obs[1])
        if x < gx:
            return 3
        if x > gx:
            return 2
        if y < gy:
            return 1
        if y > gy:
            return 0
        return 4

    return policy


def gen_darkroom_expert(
    cfg: DarkRoomConfig, episodes: int, eps: float = 0.1, seed: int = 0
) -> list[Trajectory]:
    rng = np.random.default_rng(seed)
    task = f"darkroom_{cfg.goal[0]}_{cfg.goal[1]}"
    out = []
    for i in range(episodes):
        env = DarkRoomEnv(cfg)
        policy = darkroom_expert_policy(cfg, eps, rng)
        out.append(_record_episode(env, policy, "darkroom", task, {"episode_index": i}))
    return out


def gen_pointreach_expert(
    cfg: PointReachConfig, episodes: int, noise: float = 0.05, seed: int = 0
) -> list[Trajectory]:
    rng = np.random.default_rng(seed)
    task = f"pointreach_{cfg.goal[0]:+.2f}_{cfg.goal[1]:+.2f}"
    out = []
    for i in range(episodes):
        env = PointReachEnv(cfg)

        def policy(obs):
            a = pointreach_expert_action(obs[:2].astype(np.float64), cfg.goal, cfg.max_step)
            if noise > 0.0:
                a = np.clip(a + rng.normal(0.0, noise, 2), -1.0, 1.0)
            return a.astype(np.float32)

        out.append(_record_episode(env, policy, "pointreach", task, {"episode_index": i}))
    return out


@dataclass
class QLearnConfig:
    lr: float = 0.1
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05


def generate_learning_history(
    cfg: DarkRoomConfig,
    transitions_budget: int,
    qcfg: QLearnConfig = None,
    seed: int = 0,
) -> list[Trajectory]:
    """Record every episode of an epsilon-greedy tabular Q-learning run, in
    training order. Later episodes have (statistically) higher return; the
    run stops once another full episode would exceed the budget."""
    qcfg = qcfg or QLearnConfig()
    if transitions_budget < cfg.horizon:
        raise ValueError("budget must cover at least one episode")
    rng = np.random.default_rng(seed)
    g = cfg.grid_size
    q = np.zeros((g, g, 5))
    n_episodes = transitions_budget // cfg.horizon
    task = f"darkroom_{cfg.goal[0]}_{cfg.goal[1]}"
    history = []
    for ep in range(n_episodes):
        frac = ep / max(n_episodes - 1, 1)
        eps = qcfg.eps_start + (qcfg.eps_end - qcfg.eps_start) * frac
        env = DarkRoomEnv(cfg)
        obs = env.reset()
        states, actions, rewards = [], [], []
        done = False
        while not done:
            x, y = int(obs[0]), int(obs[1])
            if rng.random() < eps:
                a = int(rng.integers(0, 5))
            else:
                row = q[x, y]
                a = int(rng.choice(np.flatnonzero(row == row.max())))
            step = env.step(a)
            nx, ny = int(step.observation[0]), int(step.observation[1])
            target = step.reward + (0.0 if step.done else qcfg.gamma * q[nx, ny].max())
            q[x, y, a] += qcfg.lr * (target - q[x, y, a])
            states.append(obs)
            actions.append(a)
            rewards.append(step.reward)
            obs = step.observation
            done = step.done
        history.append(
            Trajectory(
                domain="darkroom",
                task=task,
                states=np.asarray(states, dtype=np.float32),
                actions=np.asarray(actions, dtype=np.int64),
                rewards=np.asarray(rewards, dtype=np.float32),
                meta={"episode_index": ep, "seed": seed},
            )
        )
    return history


def measure_random_return(make_env, episodes: int = 100, seed: int = 0) -> float:
    """Mean return of a uniform-random policy; the normalization baseline."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        env = make_env()
        env.reset()
        done = False
        while not done:
            if isinstance(env, DarkRoomEnv):
                a = int(rng.integers(0, 5))
            else:
                a = rng.uniform(-1.0, 1.0, 2)
            step = env.step(a)
            total += step.reward
            done = step.done
    return total / episodes
