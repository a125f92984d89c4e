"""Ring storage and uniform sampling."""
import numpy as np
import pytest

from gridmix.replay_buffer import Buffer, JointTransition, Underfilled


def transition(tag, n_agents=2, obs_dim=6, state_dim=4):
    """A transition whose entries encode ``tag`` for overwrite tracking."""
    return JointTransition(
        obs=np.full((n_agents, obs_dim), tag, dtype=np.float32),
        actions=np.full(n_agents, tag % 5),
        rewards=np.full(n_agents, 0.5 * tag),
        next_obs=np.full((n_agents, obs_dim), tag + 0.5, dtype=np.float32),
        state=np.full(state_dim, tag),
        next_state=np.full(state_dim, tag + 0.5),
        done=np.array([tag % 2 == 0] * n_agents),
        active=np.ones(n_agents, dtype=bool),
        terminal=tag % 3 == 0,
    )


def make_buffer(capacity=3, seed=0):
    return Buffer(capacity, n_agents=2, obs_dim=6, state_dim=4, seed=seed)


class TestPush:
    def test_first_push(self):
        buf = make_buffer()
        buf.push(transition(1))
        assert buf.size == 1
        assert buf.cursor == 1

    def test_ring_overwrite(self):
        buf = make_buffer(capacity=3)
        for tag in range(4):
            buf.push(transition(tag))
        assert buf.size == 3
        # entry 0 was overwritten by tag 3; tags 1 and 2 survive
        stored = sorted(buf._state[:, 0].tolist())
        assert stored == [1.0, 2.0, 3.0]

    def test_cursor_wraps_to_zero(self):
        buf = make_buffer(capacity=3)
        for tag in range(3):
            buf.push(transition(tag))
        assert buf.cursor == 0
        assert buf.size == 3

    def test_overwrite_is_atomic(self):
        # every field of the slot belongs to the newest transition
        buf = make_buffer(capacity=2)
        for tag in range(5):
            buf.push(transition(tag))
        k = 0  # slot 0 was last written by tag 4
        assert buf._state[k, 0] == 4.0
        assert buf._obs[k, 0, 0] == 4.0
        assert buf._rewards[k, 0] == 2.0
        assert buf._next_state[k, 0] == 4.5


class TestSample:
    def test_single_entry(self):
        buf = make_buffer()
        buf.push(transition(7))
        batch = buf.sample(1)
        assert len(batch) == 1
        assert batch.state[0, 0] == 7.0
        assert batch.obs.dtype == np.float64

    def test_underfilled(self):
        buf = make_buffer()
        buf.push(transition(0))
        with pytest.raises(Underfilled):
            buf.sample(2)

    def test_deterministic_given_seed(self):
        batches = []
        for _ in range(2):
            buf = make_buffer(capacity=10, seed=42)
            for tag in range(10):
                buf.push(transition(tag))
            batch = buf.sample(6)
            batches.append(batch.state[:, 0].tolist())
        assert batches[0] == batches[1]

    def test_shapes_and_dtypes(self):
        buf = make_buffer(capacity=8)
        for tag in range(8):
            buf.push(transition(tag))
        batch = buf.sample(5)
        assert batch.obs.shape == (5, 2, 6)
        assert batch.next_obs.shape == (5, 2, 6)
        assert batch.state.shape == (5, 4)
        assert batch.actions.shape == (5, 2)
        assert batch.actions.dtype == np.int64
        assert batch.rewards.dtype == np.float64
        assert batch.done.dtype == np.bool_
        assert batch.terminal.shape == (5,)

    def test_near_uniform_frequencies(self):
        # repeated draws from a 4-entry buffer: each entry within 5 sigma of 1/4
        buf = make_buffer(capacity=4, seed=3)
        for tag in range(4):
            buf.push(transition(tag))
        draws = 40_000
        counts = np.zeros(4)
        for _ in range(draws // 4):
            batch = buf.sample(4)
            counts += np.bincount(batch.state[:, 0].astype(int), minlength=4)
        p = 0.25
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.abs(counts - draws * p).max() < 5 * sigma

    def test_only_stored_entries_sampled(self):
        buf = make_buffer(capacity=10)
        for tag in (1, 2, 3):
            buf.push(transition(tag))
        batch = buf.sample(3)
        assert set(batch.state[:, 0].tolist()) <= {1.0, 2.0, 3.0}
