"""Training and evaluation orchestration.

train() runs epsilon-greedy data collection over a bank of parallel
environment instances, one learner update per joint vector step once the
replay buffer is warm, hard target syncs on a fixed cadence, and a greedy
evaluation on a fixed unseen map set at every eval interval. Metrics go to
a CSV whose header records the evaluation set's content hash; the run is a
pure function of the config, so identical configs produce byte-identical
metrics files (wall-clock readings come from an injectable time source).

Per-environment RNG streams are keyed by (run seed, stream tag, env
index), which makes results independent of scheduling and reproducible
regardless of how many instances run.

evaluate() rolls a greedy policy (or a baseline) over every map of a set,
optionally in parallel over maps; the env var GRIDMIX_THREADS bounds the
worker count and the reduction order is fixed by map index.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import qmix_core
from .dense_net import forward
from .grid_world import (Action, EnvConfig, EnvState, env_from_record,
                         generate, map_hash, map_record)
from .mapsets import gen_mapset, load_mapset, mapset_hash, sample_giveway_record
from .observation import obs_dim, observe
from .qmix_core import MixerBundle, load_bundle, save_bundle, select_actions
from .replay_buffer import Buffer, JointTransition

# rng stream tags; fixed constants are part of the determinism contract
_TAG_MAPS = 1
_TAG_EXPLORE = 2
_TAG_NET = 3
_TAG_BUFFER = 4
_TAG_EVALSET = 5

METRICS_COLUMNS = ("steps", "loss_mean", "q_tot_mean", "grad_norm",
                   "eval_success_mean", "eval_success_per_map_json", "wall_s")


class ConfigInvalid(ValueError):
    """A RunConfig field violates its bounds."""


class TopologyMismatch(ValueError):
    """Checkpoint topology does not fit the map set's agents or view radius."""


@dataclass
class RunConfig:
    """Everything a training run depends on; JSON-serializable field for field."""

    size: int = 8
    density: float = 0.3
    n_agents: int = 2
    obs_radius: int = 5
    horizon: int = 16
    goal_dist: int | None = None
    seed: int = 0
    mode: str = "qmix"
    total_steps: int = 100_000
    eval_interval: int = 25_000
    eval_maps: str | None = None       # path; generated when absent
    eval_map_kind: str | None = None   # defaults to train_map_kind
    eval_map_count: int = 40
    eval_repeats: int = 1
    train_map_kind: str = "random"
    n_envs: int = 8
    train_every: int | None = None     # env steps per learner update; default n_envs
    buffer_capacity: int = 100_000
    min_buffer: int = 1_000
    batch_size: int = 64
    lr: float = 5e-4
    gamma: float = 0.99
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.1
    embed_dim: int = 32
    grad_clip: float = 10.0
    stop_at_success: float | None = None

    def validate(self) -> None:
        try:
            self.env_config()
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        if self.mode.lower() not in qmix_core.MODES:
            raise ConfigInvalid(f"mode must be one of {qmix_core.MODES}")
        if self.total_steps < 0:
            raise ConfigInvalid("total_steps must be >= 0")
        if self.eval_interval < 1 or self.eval_interval > max(self.total_steps, 1):
            raise ConfigInvalid("eval_interval must be in [1, total_steps]")
        if self.train_map_kind not in ("random", "giveway"):
            raise ConfigInvalid("train_map_kind must be 'random' or 'giveway'")
        if self.n_envs < 1 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigInvalid("n_envs, batch_size, buffer_capacity must be >= 1")
        if self.min_buffer < self.batch_size:
            raise ConfigInvalid("min_buffer must be >= batch_size")
        if self.train_every is not None and self.train_every < 1:
            raise ConfigInvalid("train_every must be >= 1")
        if not (0.0 <= self.eps_end <= self.eps_start <= 1.0):
            raise ConfigInvalid("need 0 <= eps_end <= eps_start <= 1")
        if not (0.0 <= self.eps_fraction <= 1.0):
            raise ConfigInvalid("eps_fraction must be in [0, 1]")
        if self.eval_repeats < 1 or self.eval_map_count < 1:
            raise ConfigInvalid("eval_repeats and eval_map_count must be >= 1")

    def env_config(self, seed: int | None = None) -> EnvConfig:
        return EnvConfig(size=self.size, density=self.density, n_agents=self.n_agents,
                         obs_radius=self.obs_radius, horizon=self.horizon,
                         goal_dist=self.goal_dist, seed=self.seed if seed is None else seed)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


@dataclass
class EvalReport:
    per_map: list[float]
    mean: float
    steps: int
    wall_s: float


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    steps: int
    final_eval: EvalReport
    train_map_hashes: set[str] = field(default_factory=set)


class GreedyNetPolicy:
    """Greedy (eps = 0) action selection from a trained bundle."""

    def __init__(self, bundle: MixerBundle):
        self.bundle = bundle

    def start_episode(self, map_index: int = 0, repeat: int = 0) -> None:
        pass

    def actions(self, env: EnvState) -> np.ndarray:
        n = env.n_agents
        rad = env.config.obs_radius
        width = 2 * rad + 1
        obs = np.zeros((n, 4, width, width))
        active = np.zeros(n, dtype=bool)
        for i, ag in enumerate(env.agents):
            if ag.active:
                observe(env, i, out=obs[i])
                active[i] = True
        return select_actions(self.bundle, obs.reshape(n, -1), 0.0, active=active)


def _as_policy(policy_or_bundle, mapset: dict):
    cfg = mapset["config"]
    if isinstance(policy_or_bundle, MixerBundle):
        expected = obs_dim(cfg["obs_radius"])
        if policy_or_bundle.obs_dim != expected:
            raise TopologyMismatch(
                f"bundle expects obs_dim {policy_or_bundle.obs_dim}, "
                f"map set implies {expected}")
        if policy_or_bundle.n_agents != cfg["n_agents"]:
            raise TopologyMismatch(
                f"bundle trained for {policy_or_bundle.n_agents} agents, "
                f"map set has {cfg['n_agents']}")
        return GreedyNetPolicy(policy_or_bundle)
    return policy_or_bundle


def _rollout_success(record: dict, obs_radius: int, horizon: int, policy,
                     map_index: int, repeat: int) -> float:
    env = env_from_record(record, obs_radius=obs_radius, horizon=horizon)
    policy.start_episode(map_index, repeat)
    reached = np.zeros(env.n_agents, dtype=bool)
    while not env.episode_over:
        outcome = env.step(policy.actions(env))
        reached |= outcome.done
    return float(reached.mean())


def _eval_workers() -> int:
    raw = os.environ.get("GRIDMIX_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def evaluate(policy_or_bundle, mapset, repeats: int = 1, steps_so_far: int = 0,
             time_fn=time.perf_counter) -> EvalReport:
    """Greedy rollout on every map of the set, ``repeats`` times each.

    Success per map is the mean fraction of agents that reached their goals
    within the horizon; the report mean averages over maps. Accepts a
    MixerBundle, a checkpoint path, or any policy object; map sets may be
    given as a path as well.
    """
    if isinstance(policy_or_bundle, str):
        policy_or_bundle = load_bundle(policy_or_bundle)
    if isinstance(mapset, str):
        mapset = load_mapset(mapset)
    policy = _as_policy(policy_or_bundle, mapset)
    cfg = mapset["config"]
    t0 = time_fn()

    def one_map(idx: int) -> float:
        record = mapset["maps"][idx]
        total = 0.0
        for rep in range(repeats):
            total += _rollout_success(record, cfg["obs_radius"], cfg["horizon"],
                                      policy, idx, rep)
        return total / repeats

    indices = range(len(mapset["maps"]))
    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_map = list(pool.map(one_map, indices))
    else:
        per_map = [one_map(i) for i in indices]
    mean = float(np.mean(per_map))
    return EvalReport(per_map=per_map, mean=mean, steps=steps_so_far,
                      wall_s=time_fn() - t0)


def epsilon_at(step: int, config: RunConfig) -> float:
    """Linear decay from eps_start to eps_end over the first eps_fraction of steps."""
    decay_steps = config.eps_fraction * config.total_steps
    if decay_steps <= 0:
        return config.eps_end
    frac = min(step / decay_steps, 1.0)
    return config.eps_start + (config.eps_end - config.eps_start) * frac


def _stream_rng(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, index)))


class _EnvSlot:
    """One training environment plus its private rng streams and obs cache.

    Observation and state buffers alternate between two banks so the
    pre-step arrays stay valid while the post-step ones are written.
    """

    def __init__(self, config: RunConfig, index: int, eval_hashes: set[str]):
        self.config = config
        self.map_rng = _stream_rng(config.seed, _TAG_MAPS, index)
        self.explore_rng = _stream_rng(config.seed, _TAG_EXPLORE, index)
        self.eval_hashes = eval_hashes
        width = 2 * config.obs_radius + 1
        self.n = config.n_agents
        state_d = 3 * config.size * config.size
        self._obs_banks = [np.zeros((self.n, 4, width, width)) for _ in range(2)]
        self._state_banks = [np.zeros((3, config.size, config.size)) for _ in range(2)]
        self._flip = 0
        self.env: EnvState | None = None
        self.obs: np.ndarray | None = None        # (n, obs_dim) float64 view
        self.state: np.ndarray | None = None      # (state_dim,) float64 view
        self.active: np.ndarray | None = None     # (n,) bool
        self.seen_hashes: set[str] = set()

    def reset(self) -> None:
        # resample until the drawn map is not part of the evaluation set
        while True:
            if self.config.train_map_kind == "giveway":
                record = sample_giveway_record(self.config.env_config(seed=0),
                                               self.map_rng)
                env = env_from_record(record, self.config.obs_radius,
                                      self.config.horizon)
            else:
                env = generate(self.config.env_config(
                    seed=int(self.map_rng.integers(2**63))))
                record = map_record(env)
            h = map_hash(record)
            if h not in self.eval_hashes:
                break
        self.seen_hashes.add(h)
        self.env = env
        self._refresh()

    def _refresh(self) -> None:
        env = self.env
        obs_buf = self._obs_banks[self._flip]
        state_buf = self._state_banks[self._flip]
        self._flip ^= 1
        self.active = np.array([ag.active for ag in env.agents], dtype=bool)
        for i in range(self.n):
            if self.active[i]:
                observe(env, i, out=obs_buf[i])
            else:
                obs_buf[i] = 0.0
        self.obs = obs_buf.reshape(self.n, -1)
        self.state = env.global_state(out=state_buf).reshape(-1)


def train(config: RunConfig, out_dir: str, time_fn=time.perf_counter) -> TrainResult:
    """Run one training job; returns paths to the checkpoint and metrics CSV.

    Deterministic given the config: the same seeds produce bit-identical
    parameter trajectories and metrics (modulo the injected time source).
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    t0 = time_fn()

    if config.eval_maps is not None:
        eval_set = load_mapset(config.eval_maps)
    else:
        kind = config.eval_map_kind or config.train_map_kind
        eval_seed = int(_stream_rng(config.seed, _TAG_EVALSET).integers(2**63))
        eval_set = gen_mapset(kind, config.eval_map_count,
                              config.env_config(seed=0), seed=eval_seed)
        with open(os.path.join(out_dir, "eval_maps.json"), "w") as fh:
            json.dump(eval_set, fh)
    if eval_set["config"]["n_agents"] != config.n_agents \
            or eval_set["config"]["obs_radius"] != config.obs_radius:
        raise ConfigInvalid("evaluation map set does not match the run's agents/radius")
    eval_hashes = {map_hash(m) for m in eval_set["maps"]}
    set_hash = mapset_hash(eval_set)

    obs_d = obs_dim(config.obs_radius)
    state_d = 3 * config.size * config.size
    bundle = MixerBundle(
        n_agents=config.n_agents, obs_dim=obs_d, state_dim=state_d,
        mode=config.mode, embed_dim=config.embed_dim, gamma=config.gamma,
        lr=config.lr, grad_clip=config.grad_clip,
        seed=int(_stream_rng(config.seed, _TAG_NET).integers(2**63)))
    buffer = Buffer(config.buffer_capacity, config.n_agents, obs_d, state_d,
                    seed=int(_stream_rng(config.seed, _TAG_BUFFER).integers(2**63)))

    slots = [_EnvSlot(config, i, eval_hashes) for i in range(config.n_envs)]
    for slot in slots:
        slot.reset()

    train_every = config.train_every or config.n_envs
    steps_done = 0
    trains_done = 0
    train_baseline: int | None = None
    loss_acc: list[float] = []
    qtot_acc: list[float] = []
    norm_acc: list[float] = []
    last_row_steps = -1
    next_eval_at = 0
    stop = False

    metrics_path = os.path.join(out_dir, "metrics.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.json")
    metrics_fh = open(metrics_path, "w", newline="")
    writer = csv.writer(metrics_fh)
    metrics_fh.write(f"# mapset_sha256={set_hash}\n")
    writer.writerow(METRICS_COLUMNS)

    def emit_row() -> EvalReport:
        nonlocal last_row_steps, loss_acc, qtot_acc, norm_acc
        report = evaluate(bundle, eval_set, repeats=config.eval_repeats,
                          steps_so_far=steps_done, time_fn=time_fn)
        row = (
            steps_done,
            repr(float(np.mean(loss_acc))) if loss_acc else "nan",
            repr(float(np.mean(qtot_acc))) if qtot_acc else "nan",
            repr(float(np.mean(norm_acc))) if norm_acc else "nan",
            repr(report.mean),
            json.dumps(report.per_map),
            repr(time_fn() - t0),
        )
        writer.writerow(row)
        metrics_fh.flush()
        loss_acc, qtot_acc, norm_acc = [], [], []
        last_row_steps = steps_done
        return report

    n = config.n_agents
    all_obs = np.zeros((config.n_envs * n, obs_d))
    try:
        last_report = emit_row()  # initial row at step 0
        next_eval_at = config.eval_interval
        while steps_done < config.total_steps and not stop:
            eps = epsilon_at(steps_done, config)
            # batched greedy pass over every slot's agents, one GEMM for all
            for e, slot in enumerate(slots):
                all_obs[e * n:(e + 1) * n] = slot.obs
            q_all, _ = forward(bundle.agent_net, all_obs)
            greedy = q_all.argmax(axis=1).reshape(config.n_envs, n)
            for e, slot in enumerate(slots):
                actions = np.full(n, int(Action.STAY), dtype=np.int64)
                rng = slot.explore_rng
                for i in range(n):
                    if not slot.active[i]:
                        continue
                    if eps > 0.0 and rng.random() < eps:
                        actions[i] = int(rng.integers(qmix_core.N_ACTIONS))
                    else:
                        actions[i] = int(greedy[e, i])
                env = slot.env
                prev_obs = slot.obs
                prev_state = slot.state
                prev_active = slot.active
                outcome = env.step(actions)
                slot._refresh()
                buffer.push(JointTransition(
                    obs=prev_obs, actions=actions, rewards=outcome.rewards,
                    next_obs=slot.obs, state=prev_state, next_state=slot.state,
                    done=outcome.done, active=prev_active,
                    terminal=outcome.episode_over))
                if outcome.episode_over:
                    slot.reset()
            steps_done += config.n_envs

            if buffer.size >= config.min_buffer:
                if train_baseline is None:
                    train_baseline = steps_done
                due = (steps_done - train_baseline) // train_every + 1
                while trains_done < due:
                    report = qmix_core.train_step(bundle,
                                                  buffer.sample(config.batch_size))
                    trains_done += 1
                    loss_acc.append(report.loss)
                    qtot_acc.append(report.q_tot_mean)
                    norm_acc.append(report.grad_norm)
                    if trains_done % config.target_sync == 0:
                        qmix_core.sync_targets(bundle)

            if steps_done >= next_eval_at:
                last_report = emit_row()
                while next_eval_at <= steps_done:
                    next_eval_at += config.eval_interval
                if config.stop_at_success is not None \
                        and last_report.mean >= config.stop_at_success:
                    stop = True

        if last_row_steps != steps_done:
            last_report = emit_row()
    finally:
        metrics_fh.close()
    save_bundle(bundle, checkpoint_path)
    hashes: set[str] = set()
    for slot in slots:
        hashes |= slot.seen_hashes
    return TrainResult(checkpoint_path=checkpoint_path, metrics_path=metrics_path,
                       steps=steps_done, final_eval=last_report,
                       train_map_hashes=hashes)


# --- benchmarks ---------------------------------------------------------------

def bench_env_stepping(env_config: EnvConfig, n_steps: int = 30_000,
                       include_observations: bool = False,
                       time_fn=time.perf_counter) -> dict:
    """Agent-steps per second of raw environment stepping.

    Only the stepping work (and, optionally, per-agent observation
    encoding) is timed; episode resets generate fresh maps outside the
    measured window. Actions are drawn ahead of time.
    """
    rng = np.random.default_rng(env_config.seed)
    n = env_config.n_agents

    def fresh_env() -> EnvState:
        cfg = EnvConfig(size=env_config.size, density=env_config.density,
                        n_agents=n, obs_radius=env_config.obs_radius,
                        horizon=env_config.horizon, goal_dist=env_config.goal_dist,
                        seed=int(rng.integers(2**63)))
        return generate(cfg)

    width = 2 * env_config.obs_radius + 1
    obs_buf = np.zeros((n, 4, width, width))
    actions = rng.integers(0, 5, size=(n_steps, n))
    env = fresh_env()
    agent_steps = 0
    elapsed = 0.0
    for k in range(n_steps):
        t0 = time_fn()
        outcome = env.step(actions[k])
        if include_observations:
            for i, ag in enumerate(env.agents):
                if ag.active:
                    observe(env, i, out=obs_buf[i])
        elapsed += time_fn() - t0
        agent_steps += n
        if outcome.episode_over:
            env = fresh_env()
    return {
        "agent_steps": agent_steps,
        "seconds": elapsed,
        "agent_steps_per_s": agent_steps / elapsed,
        "include_observations": include_observations,
    }


def bench_train_loop(config: RunConfig | None = None, total_steps: int = 8_000,
                     trials: int = 3, time_fn=time.perf_counter) -> dict:
    """Env-steps per second of the full loop (stepping + learning, batch 64).

    Runs ``trials`` identical short jobs and reports the best rate next to
    the mean: on shared hardware, scheduling noise only ever subtracts, so
    the best trial is the capability estimate.
    """
    import tempfile

    if config is None:
        config = RunConfig(total_steps=total_steps, eval_interval=total_steps,
                           eval_map_count=4, min_buffer=256)
    rates = []
    for _ in range(max(1, trials)):
        t0 = time_fn()
        with tempfile.TemporaryDirectory() as tmp:
            result = train(config, tmp, time_fn=time_fn)
        rates.append(result.steps / (time_fn() - t0))
    return {
        "env_steps": result.steps,
        "trials": len(rates),
        "env_steps_per_s": max(rates),
        "env_steps_per_s_mean": float(np.mean(rates)),
        "mode": config.mode,
        "batch_size": config.batch_size,
    }
