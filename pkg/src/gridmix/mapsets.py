"""Fixed evaluation map sets: random maps and give-way maps.

A map set is a JSON document holding a provenance tag, the generation
parameters, and a list of map records in the grid_world schema. The set is
immutable during a run; its content hash goes into the metrics header.

Give-way maps come from a corridor template family: the whole grid is
blocked except a single width-1 corridor spanning the map and one passing
alcove adjacent to it. Two agents start at opposite corridor ends with
goals at the far sides, so their unique shortest paths traverse the
corridor in opposite directions and one agent must step into the alcove to
let the other pass. Template parameters (corridor position, alcove
position and side, orientation) are swept deterministically from the seed,
and every emitted map is certified by a rejection oracle: a simultaneous
greedy shortest-path rollout must fail for at least one agent.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .baselines import GreedyBfsPolicy
from .grid_world import (EnvConfig, GenerationFailed, env_from_record, generate,
                         map_hash, map_record)

MAPSET_VERSION = 1


def _config_header(config: EnvConfig) -> dict:
    return {
        "size": config.size,
        "density": config.density,
        "n_agents": config.n_agents,
        "obs_radius": config.obs_radius,
        "horizon": config.horizon,
        "goal_dist": config.goal_dist,
    }


def mapset_hash(mapset: dict) -> str:
    canon = {
        "kind": mapset["kind"],
        "config": mapset["config"],
        "maps": [map_hash(m) for m in mapset["maps"]],
    }
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def save_mapset(mapset: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(mapset, fh)


def load_mapset(path: str) -> dict:
    with open(path) as fh:
        mapset = json.load(fh)
    if mapset.get("format_version") != MAPSET_VERSION:
        raise ValueError(f"unsupported mapset version {mapset.get('format_version')}")
    return mapset


def greedy_rollout_fails(record: dict, obs_radius: int, horizon: int) -> bool:
    """True when the simultaneous greedy shortest-path rollout strands an agent."""
    env = env_from_record(record, obs_radius=obs_radius, horizon=horizon)
    policy = GreedyBfsPolicy()
    reached = np.zeros(env.n_agents, dtype=bool)
    while not env.episode_over:
        outcome = env.step(policy.actions(env))
        reached |= outcome.done
    return not reached.all()


MIN_CORRIDOR_LEN = 4  # BFS distance along the corridor; shorter maps are trivial


def _giveway_record(size: int, row: int, lo: int, hi: int, alcove: int, side: int,
                    orient: int, seed: int) -> dict:
    """Corridor template instance; orient 0 is horizontal, 1 is vertical.

    Only the corridor cells (row, lo..hi) and one alcove next to it are
    free; agents start at opposite corridor ends with swapped goals.
    """
    blocked = np.ones((size, size), dtype=bool)
    if orient == 0:
        blocked[row, lo:hi + 1] = False
        blocked[row + side, alcove] = False
        starts = [(row, lo), (row, hi)]
    else:
        blocked[lo:hi + 1, row] = False
        blocked[alcove, row + side] = False
        starts = [(lo, row), (hi, row)]
    return {
        "size": size,
        "blocked": [[int(r), int(c)] for r, c in np.argwhere(blocked)],
        "agents": [
            {"start": list(starts[0]), "goal": list(starts[1])},
            {"start": list(starts[1]), "goal": list(starts[0])},
        ],
        "seed": int(seed),
    }


def _giveway_combos(size: int) -> list[tuple[int, int, int, int, int, int]]:
    """Template sweep: corridor row, span, alcove position, side, orientation."""
    combos = []
    for orient in (0, 1):
        for row in range(1, size - 1):
            for lo in range(0, size - MIN_CORRIDOR_LEN):
                for hi in range(lo + MIN_CORRIDOR_LEN, size):
                    for alcove in range(lo + 1, hi):
                        for side in (-1, 1):
                            combos.append((row, lo, hi, alcove, side, orient))
    return combos


def sample_giveway_record(config: EnvConfig, rng: np.random.Generator) -> dict:
    """One random certified give-way map from the template family."""
    if config.n_agents != 2:
        raise GenerationFailed("the give-way template family is defined for 2 agents")
    if config.horizon < config.size + 3:
        raise GenerationFailed(
            f"horizon {config.horizon} leaves no room to yield on size {config.size}")
    combos = _giveway_combos(config.size)
    for _ in range(MAX_GIVEWAY_DRAWS):
        combo = combos[int(rng.integers(len(combos)))]
        record = _giveway_record(config.size, *combo,
                                 seed=int(rng.integers(2**63)))
        if greedy_rollout_fails(record, config.obs_radius, config.horizon):
            return record
    raise GenerationFailed("no give-way template passed the greedy-failure oracle")


MAX_GIVEWAY_DRAWS = 256


def gen_mapset(kind: str, count: int, config: EnvConfig, seed: int) -> dict:
    """Build a fixed map set of ``count`` maps.

    kind 'random': independent generate() outputs under ``config`` with
    per-map seeds drawn from ``seed``. kind 'giveway': distinct certified
    corridor templates, deterministically ordered from ``seed``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    maps: list[dict] = []
    if kind == "random":
        for _ in range(count):
            map_seed = int(rng.integers(2**63))
            cfg = EnvConfig(size=config.size, density=config.density,
                            n_agents=config.n_agents, obs_radius=config.obs_radius,
                            horizon=config.horizon, goal_dist=config.goal_dist,
                            seed=map_seed)
            maps.append(map_record(generate(cfg)))
    elif kind == "giveway":
        if config.n_agents != 2:
            raise GenerationFailed("the give-way template family is defined for 2 agents")
        if config.horizon < config.size + 3:
            raise GenerationFailed(
                f"horizon {config.horizon} leaves no room to yield on size {config.size}")
        combos = _giveway_combos(config.size)
        order = rng.permutation(len(combos))
        for idx in order:
            if len(maps) == count:
                break
            record = _giveway_record(config.size, *combos[int(idx)],
                                     seed=int(rng.integers(2**63)))
            if greedy_rollout_fails(record, config.obs_radius, config.horizon):
                maps.append(record)
        if len(maps) < count:
            raise GenerationFailed(
                f"give-way family for size {config.size} yields only {len(maps)} "
                f"certified maps, {count} requested")
    else:
        raise ValueError(f"unknown mapset kind {kind!r}")
    return {
        "format_version": MAPSET_VERSION,
        "kind": kind,
        "config": _config_header(config),
        "maps": maps,
    }
