"""Deterministic desk-scale control tasks: a walled gridworld and a 2-D point mass."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int = 0
    dim: int = 0
    low: float = -1.0
    high: float = 1.0

    @classmethod
    def discrete_space(cls, n: int) -> "ActionSpace":
        return cls("discrete", n=n)

    @classmethod
    def continuous_space(cls, dim: int, low: float = -1.0, high: float = 1.0) -> "ActionSpace":
        return cls("continuous", dim=dim, low=low, high=high)

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def encoding_width(self) -> int:
        return self.n if self.discrete else self.dim

    def contains(self, action) -> bool:
        if self.discrete:
            return isinstance(action, (int, np.integer)) and 0 <= int(action) < self.n
        a = np.asarray(action, dtype=float)
        return a.shape == (self.dim,) and bool(np.all((a >= self.low) & (a <= self.high)))

    def sample(self, rng: np.random.Generator):
        if self.discrete:
            return int(rng.integers(self.n))
        return rng.uniform(self.low, self.high, size=self.dim)


# up, down, left, right, noop
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

DEFAULT_WALLS = frozenset({(2, 1), (2, 2), (2, 3), (2, 4), (5, 3), (5, 4), (5, 5), (5, 6)})


@dataclass
class GridWorld:
    size: int = 8
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] | None = None
    walls: frozenset = DEFAULT_WALLS
    step_penalty: float = -0.01
    goal_reward: float = 1.0
    max_steps: int = 100
    random_start: bool = False
    agent: tuple[int, int] = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        if self.goal is None:
            self.goal = (self.size - 1, self.size - 1)
        self.walls = frozenset(w for w in self.walls if self._inside(w))
        if self.start in self.walls or self.goal in self.walls:
            raise ValueError("start and goal must not be walls")
        self.action_space = ActionSpace.discrete_space(len(MOVES))
        self.obs_dim = 3 * self.size * self.size
        self.agent = self.start
        self._rng = np.random.default_rng(0)
        self._done = False

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size)
                if (r, c) not in self.walls and (r, c) != self.goal]

    def observation(self) -> np.ndarray:
        n2 = self.size * self.size
        obs = np.zeros(3 * n2)
        obs[self.agent[0] * self.size + self.agent[1]] = 1.0
        obs[n2 + self.goal[0] * self.size + self.goal[1]] = 1.0
        for r, c in self.walls:
            obs[2 * n2 + r * self.size + c] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if self.random_start:
            cells = self.free_cells()
            self.agent = cells[int(self._rng.integers(len(cells)))]
        else:
            self.agent = self.start
        self.t = 0
        self._done = False
        return self.observation()

    def move(self, cell, action: int) -> tuple[int, int]:
        dr, dc = MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        if not self._inside(nxt) or nxt in self.walls:
            return cell
        return nxt

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        """Returns (observation, reward, terminal, truncated)."""
        if not self.action_space.contains(action):
            raise ContractError(f"action {action!r} not in discrete(0..{len(MOVES) - 1})")
        if self._done:
            raise ContractError("step() after episode end; call reset()")
        self.agent = self.move(self.agent, int(action))
        self.t += 1
        if self.agent == self.goal:
            self._done = True
            return self.observation(), self.goal_reward, True, False
        truncated = self.t >= self.max_steps
        self._done = truncated
        return self.observation(), self.step_penalty, False, truncated

    def render(self) -> str:
        rows = []
        for r in range(self.size):
            row = []
            for c in range(self.size):
                cell = (r, c)
                row.append("#" if cell in self.walls else "A" if cell == self.agent
                           else "G" if cell == self.goal else ".")
            rows.append("".join(row))
        return "\n".join(rows)


def shortest_path_length(env: GridWorld, start=None) -> int | None:
    """BFS distance in moves from ``start`` (default: env.start) to the goal."""
    start = env.start if start is None else start
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        cell, d = queue.popleft()
        if cell == env.goal:
            return d
        for a in range(len(MOVES) - 1):
            nxt = env.move(cell, a)
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, d + 1))
    return None


def optimal_return_oracle(env: GridWorld, start=None) -> float | None:
    """Best undiscounted episode return, or None when the goal is unreachable
    within the step limit."""
    d = shortest_path_length(env, start)
    if d is None or d > env.max_steps:
        return None
    if d == 0:
        return 0.0
    return env.goal_reward + (d - 1) * env.step_penalty


@dataclass
class PointMass:
    dt: float = 0.05
    damping: float = 0.1
    v_max: float = 1.0
    max_steps: int = 200

    def __post_init__(self):
        self.action_space = ActionSpace.continuous_space(2)
        self.obs_dim = 4
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0
        self._rng = np.random.default_rng(0)

    def observation(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.pos = self._rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)
        self.t = 0
        return self.observation()

    def dynamics(self, pos, vel, action):
        vel = np.clip((1.0 - self.damping) * vel + self.dt * np.asarray(action, dtype=float),
                      -self.v_max, self.v_max)
        raw = pos + self.dt * vel
        pos = np.clip(raw, -1.0, 1.0)
        vel = np.where(raw != pos, 0.0, vel)
        return pos, vel

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        if not self.action_space.contains(action):
            raise ContractError(f"action {action!r} outside [-1, 1]^2")
        if self.t >= self.max_steps:
            raise ContractError("step() after episode end; call reset()")
        self.pos, self.vel = self.dynamics(self.pos, self.vel, action)
        self.t += 1
        reward = -float(np.linalg.norm(self.pos))
        return self.observation(), reward, False, self.t >= self.max_steps


def make_env(name: str, **kwargs):
    if name == "gridworld":
        return GridWorld(**kwargs)
    if name == "pointmass":
        return PointMass(**kwargs)
    raise ValueError(f"unknown env {name!r}")
