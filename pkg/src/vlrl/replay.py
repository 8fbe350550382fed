"""Ring-buffer replay with episode-aware segment and n-step sampling.

Each stored transition keeps a link to its in-episode successor, so windows
are followed along episodes rather than along physical slots. Interleaved
episodes therefore work, and a window never crosses an episode boundary or
the eviction point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors


class NotEnoughData(RuntimeError):
    """No valid window of the requested length is stored yet."""


@dataclass
class Transition:
    obs: np.ndarray
    action: object
    reward: float
    terminal: bool
    episode: int
    step: int
    next_obs: np.ndarray


@dataclass
class SegmentBatch:
    obs: np.ndarray        # (B, K+1, d_obs)
    actions: np.ndarray    # (B, K) discrete or (B, K, d_a)
    rewards: np.ndarray    # (B, K)
    terminals: np.ndarray  # (B, K)
    slots: np.ndarray      # (B,) start slots

    @property
    def k(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return len(self.slots)


@dataclass
class RLBatch:
    obs: np.ndarray
    actions: np.ndarray
    returns: np.ndarray    # sum_i gamma^i r_{t+i} over the window actually used
    next_obs: np.ndarray
    done: np.ndarray       # 1.0 where a terminal fell inside the window
    discount: np.ndarray   # gamma^m, m = window length actually used

    def __len__(self) -> int:
        return len(self.returns)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int | None = None,
                 dtype=np.float32):
        """``action_dim=None`` stores integer (discrete) actions."""
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.discrete = action_dim is None
        self.obs = np.zeros((capacity, obs_dim), dtype=dtype)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=dtype)
        if self.discrete:
            self.actions = np.zeros(capacity, dtype=np.int64)
        else:
            self.actions = np.zeros((capacity, action_dim), dtype=dtype)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episodes = np.full(capacity, -1, dtype=np.int64)
        self.steps = np.full(capacity, -1, dtype=np.int64)
        self.succ = np.full(capacity, -1, dtype=np.int64)
        self._tail: dict[int, int] = {}  # episode id -> slot of its latest transition
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition) -> None:
        s = self.ptr
        old_ep = int(self.episodes[s])
        if old_ep >= 0 and self._tail.get(old_ep) == s:
            del self._tail[old_ep]
        self.obs[s] = tr.obs
        self.next_obs[s] = tr.next_obs
        self.actions[s] = tr.action
        self.rewards[s] = tr.reward
        self.terminals[s] = tr.terminal
        self.episodes[s] = tr.episode
        self.steps[s] = tr.step
        self.succ[s] = -1
        prev = self._tail.get(tr.episode)
        if prev is not None and self.steps[prev] == tr.step - 1 and self.episodes[prev] == tr.episode:
            self.succ[prev] = s
        self._tail[tr.episode] = s
        self.ptr = (s + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    # -- window machinery --------------------------------------------------

    def _follow(self, slots: np.ndarray, j_max: int) -> tuple[np.ndarray, np.ndarray]:
        """Chain of successors for each start: (B, j_max+1) slots and a mask of
        positions that are genuinely the next step of the same episode."""
        chain = np.empty((len(slots), j_max + 1), dtype=np.int64)
        ok = np.ones((len(slots), j_max + 1), dtype=bool)
        chain[:, 0] = slots
        ep0 = self.episodes[slots]
        st0 = self.steps[slots]
        cur = slots.copy()
        alive = np.ones(len(slots), dtype=bool)
        for j in range(1, j_max + 1):
            nxt = np.where(alive, self.succ[cur], -1)
            safe = np.where(nxt >= 0, nxt, 0)
            alive = alive & (nxt >= 0) & (self.episodes[safe] == ep0) & (self.steps[safe] == st0 + j)
            cur = np.where(alive, safe, cur)
            chain[:, j] = cur
            ok[:, j] = alive
        return chain, ok

    def valid_segment_starts(self, slots: np.ndarray, k: int) -> np.ndarray:
        """A start is valid when k in-episode transitions follow it with no
        terminal before the last one."""
        slots = np.asarray(slots, dtype=np.int64)
        if k == 0:
            return np.ones(len(slots), dtype=bool)
        chain, ok = self._follow(slots, k - 1)
        valid = ok.all(axis=1)
        if k > 1:
            valid &= ~self.terminals[chain[:, :-1]].any(axis=1)
        return valid

    def all_valid_segment_starts(self, k: int) -> np.ndarray:
        slots = np.arange(self.size)
        return slots[self.valid_segment_starts(slots, k)]

    def sample_segment_starts(self, batch: int, k: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise NotEnoughData("buffer is empty")
        got: list[np.ndarray] = []
        n = 0
        for _ in range(16):
            cand = rng.integers(self.size, size=2 * batch + 8)
            cand = cand[self.valid_segment_starts(cand, k)]
            got.append(cand)
            n += len(cand)
            if n >= batch:
                return np.concatenate(got)[:batch]
        # valid windows are rare: enumerate them exhaustively instead
        valid = self.all_valid_segment_starts(k)
        if len(valid) == 0:
            raise NotEnoughData(f"no in-episode window of {k} transitions stored")
        return valid[rng.integers(len(valid), size=batch)]

    def segments_at(self, starts: np.ndarray, k: int) -> SegmentBatch:
        starts = np.asarray(starts, dtype=np.int64)
        if k == 0:
            obs = self.obs[starts][:, None, :]
            empty_a = self.actions[starts][:, None][:, :0]
            z = np.zeros((len(starts), 0))
            return SegmentBatch(obs, empty_a, z, z.astype(bool), starts)
        chain, _ = self._follow(starts, k - 1)
        obs = np.concatenate([self.obs[chain], self.next_obs[chain[:, -1]][:, None, :]], axis=1)
        return SegmentBatch(obs, self.actions[chain], self.rewards[chain],
                            self.terminals[chain], starts)

    def sample_segments(self, batch: int, k: int, rng: np.random.Generator) -> SegmentBatch:
        """Uniform over valid length-(k+1) observation windows."""
        return self.segments_at(self.sample_segment_starts(batch, k, rng), k)

    def rl_batch_at(self, starts: np.ndarray, n_step: int, gamma: float) -> RLBatch:
        starts = np.asarray(starts, dtype=np.int64)
        chain, ok = self._follow(starts, n_step - 1)
        b = len(starts)
        returns = np.zeros(b)
        done = np.zeros(b)
        discount = np.zeros(b)
        last = starts.copy()
        live = np.ones(b, dtype=bool)
        for j in range(n_step):
            live = live & ok[:, j]
            slot = chain[:, j]
            returns += np.where(live, gamma ** j * self.rewards[slot], 0.0)
            last = np.where(live, slot, last)
            discount = np.where(live, gamma ** (j + 1), discount)
            term = live & self.terminals[slot]
            done = np.where(term, 1.0, done)
            live = live & ~self.terminals[slot]
        return RLBatch(self.obs[starts], self.actions[starts], returns,
                       self.next_obs[last], done, discount)

    def sample_rl_batch(self, batch: int, n_step: int, gamma: float,
                        rng: np.random.Generator) -> RLBatch:
        """n-step targets from uniformly drawn transitions.

        Windows are cut at a terminal (``done=1``) or where the stored episode
        ends (bootstrapped from that last next observation with ``gamma^m``).
        """
        if self.size == 0:
            raise NotEnoughData("buffer is empty")
        if n_step < 1:
            raise ValueError("n_step must be >= 1")
        return self.rl_batch_at(rng.integers(self.size, size=batch), n_step, gamma)

    # -- persistence --------------------------------------------------------

    _FIELDS = ("obs", "next_obs", "actions", "rewards", "terminals", "episodes", "steps", "succ")

    def dump(self, path: str | Path) -> None:
        arrays = {f: getattr(self, f)[: self.size] for f in self._FIELDS}
        arrays["meta"] = np.array([self.capacity, self.ptr, self.size])
        save_tensors(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        arrays = load_tensors(path)
        capacity, ptr, size = (int(x) for x in arrays["meta"])
        act = arrays["actions"]
        buf = cls(capacity, arrays["obs"].shape[1], None if act.ndim == 1 else act.shape[1])
        for f in cls._FIELDS:
            dst = getattr(buf, f)
            dst[:size] = arrays[f].astype(dst.dtype)
        buf.ptr, buf.size = ptr, size
        for s in range(size):
            ep = int(buf.episodes[s])
            if ep not in buf._tail or buf.steps[s] > buf.steps[buf._tail[ep]]:
                buf._tail[ep] = s
        return buf
