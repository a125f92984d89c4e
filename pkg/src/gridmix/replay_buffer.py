"""Fixed-capacity uniform-sampling store of joint transitions.

One entry holds a full joint step for all agents: observations, action
codes, rewards, next observations, the flattened global state before and
after, done flags, active-at-step-start flags, and a terminal marker (all
agents finished or the episode was truncated).

Storage is preallocated ring arrays; once full, the oldest entry is
overwritten. Observations and states are stored as float32 to bound
memory and upcast to float64 on sampling; everything else keeps its
native width. Single writer, single sampler: the training loop alternates
push and sample phases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Underfilled(RuntimeError):
    """sample() asked for more entries than the buffer currently holds."""


@dataclass
class JointTransition:
    obs: np.ndarray          # (n_agents, obs_dim)
    actions: np.ndarray      # (n_agents,)
    rewards: np.ndarray      # (n_agents,)
    next_obs: np.ndarray     # (n_agents, obs_dim)
    state: np.ndarray        # (state_dim,)
    next_state: np.ndarray   # (state_dim,)
    done: np.ndarray         # (n_agents,) reached goal this step
    active: np.ndarray       # (n_agents,) active at step start
    terminal: bool           # episode ended with this step


@dataclass
class Batch:
    obs: np.ndarray          # (b, n_agents, obs_dim) float64
    actions: np.ndarray      # (b, n_agents) int64
    rewards: np.ndarray      # (b, n_agents) float64
    next_obs: np.ndarray
    state: np.ndarray        # (b, state_dim) float64
    next_state: np.ndarray
    done: np.ndarray         # (b, n_agents) bool
    active: np.ndarray       # (b, n_agents) bool
    terminal: np.ndarray     # (b,) bool

    def __len__(self) -> int:
        return self.obs.shape[0]


class Buffer:
    """Ring buffer over joint transitions with uniform with-replacement sampling."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int,
                 seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.size = 0
        self.cursor = 0
        self.rng = np.random.default_rng(seed)
        self._obs = np.zeros((capacity, n_agents, obs_dim), dtype=np.float32)
        self._next_obs = np.zeros((capacity, n_agents, obs_dim), dtype=np.float32)
        self._state = np.zeros((capacity, state_dim), dtype=np.float32)
        self._next_state = np.zeros((capacity, state_dim), dtype=np.float32)
        self._actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self._rewards = np.zeros((capacity, n_agents), dtype=np.float64)
        self._done = np.zeros((capacity, n_agents), dtype=bool)
        self._active = np.zeros((capacity, n_agents), dtype=bool)
        self._terminal = np.zeros(capacity, dtype=bool)

    def push(self, transition: JointTransition) -> None:
        """Store at the cursor, advance modulo capacity; overwrites FIFO when full."""
        k = self.cursor
        self._obs[k] = transition.obs
        self._next_obs[k] = transition.next_obs
        self._state[k] = transition.state
        self._next_state[k] = transition.next_state
        self._actions[k] = transition.actions
        self._rewards[k] = transition.rewards
        self._done[k] = transition.done
        self._active[k] = transition.active
        self._terminal[k] = transition.terminal
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> Batch:
        """Uniform with replacement; deterministic given the buffer's rng state."""
        if self.size < batch_size:
            raise Underfilled(f"buffer holds {self.size} < batch {batch_size}")
        idx = self.rng.integers(0, self.size, size=batch_size)
        return Batch(
            obs=self._obs[idx].astype(np.float64),
            actions=self._actions[idx].copy(),
            rewards=self._rewards[idx].copy(),
            next_obs=self._next_obs[idx].astype(np.float64),
            state=self._state[idx].astype(np.float64),
            next_state=self._next_state[idx].astype(np.float64),
            done=self._done[idx].copy(),
            active=self._active[idx].copy(),
            terminal=self._terminal[idx].copy(),
        )
