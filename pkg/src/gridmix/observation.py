"""Egocentric partial observations.

Each active agent sees a 4 x (2R+1) x (2R+1) window centered on itself:

  channel 0: obstacles, with out-of-grid cells encoded 1
  channel 1: other active agents; the center holds 1/d where d is the
             agent's own BFS distance to goal (d >= 1 while active)
  channel 2: goal cells of other active agents inside the window
  channel 3: the agent's own goal, projected onto the window border via
             componentwise clamping when it lies outside

Channels are independent matrices; a projected goal marker may land on a
cell that channel 0 marks as an obstacle. Finished agents and their goals
appear in no channel. Observations are pure functions of the environment
state and safe to compute for all agents in parallel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_world import EnvState


class InactiveAgent(RuntimeError):
    """observe() was called for an agent that already left the map."""


@dataclass
class Observation:
    """4-channel egocentric window; ``data`` has shape (4, 2R+1, 2R+1)."""

    data: np.ndarray

    def flat(self) -> np.ndarray:
        """Row-major per channel, channels in declared order; length 4*(2R+1)^2."""
        return self.data.reshape(-1)


def project_goal(delta_row: int, delta_col: int, radius: int) -> tuple[int, int]:
    """Clamp a goal offset into the observation window [-R, R]^2.

    In-window offsets are returned unchanged. Otherwise the result lies on
    the window border: it keeps any in-range axis coordinate, and lands on
    the nearest corner when both axes are out of range.
    """
    return (
        min(max(delta_row, -radius), radius),
        min(max(delta_col, -radius), radius),
    )


def obs_dim(obs_radius: int) -> int:
    """Flattened observation length for a given view radius."""
    width = 2 * obs_radius + 1
    return 4 * width * width


def observe(state: EnvState, agent_index: int, out: np.ndarray | None = None) -> Observation:
    """Encode the observation of one active agent.

    ``out`` may supply a preallocated (4, 2R+1, 2R+1) float64 array to
    avoid churn on the training hot path.
    """
    ag = state.agents[agent_index]
    if not ag.active:
        raise InactiveAgent(f"agent {agent_index} is no longer on the map")
    rad = state.config.obs_radius
    width = 2 * rad + 1
    r, c = ag.pos  # padded-array window origin equals the grid position
    if out is None:
        out = np.empty((4, width, width), dtype=np.float64)
    out[0] = state._pad_obstacles[r:r + width, c:c + width]
    out[1] = state._pad_agents[r:r + width, c:c + width]
    d = ag.dist_field[r, c]
    out[1, rad, rad] = 1.0 / d  # center carries inverse goal distance, not self
    np.greater(state._pad_goals[r:r + width, c:c + width], 0.0, out=out[2])
    gr, gc = ag.goal
    if abs(gr - r) <= rad and abs(gc - c) <= rad:
        out[2, gr - r + rad, gc - c + rad] = (
            1.0 if state._pad_goals[gr + rad, gc + rad] > 1.0 else 0.0
        )
    out[3] = 0.0
    pr, pc = project_goal(gr - r, gc - c, rad)
    out[3, pr + rad, pc + rad] = 1.0
    return Observation(out)
