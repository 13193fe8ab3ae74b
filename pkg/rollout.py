"""
Trajectory collection and vine sampling.

An iteration collects N seed trajectories, picks p rollout states along
each, and grows N vines from every rollout state by restoring its snapshot.
The audited trajectory count is N + p * N^2 (136 at N=8, p=2).
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from env import EnvState, SnapshotMismatchError, stable_hash

CRITERIA = ("equal_spacing", "top_entropy", "top_critic_error")


class BudgetError(ValueError):
    """The (N, p) vine plan does not fit in the trajectory budget."""


class RestoreError(RuntimeError):
    """A rollout state could not be restored into the environment."""


class RngStreams:
    """Named, hierarchical numpy substreams derived from one root seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    @staticmethod
    def _word(part) -> int:
        if isinstance(part, (int, np.integer)) and part >= 0:
            return int(part)
        return stable_hash(str(part)) & 0xFFFFFFFF

    def generator(self, *path) -> np.random.Generator:
        key = tuple(self._word(p) for p in path)
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=key))


@dataclass
class Step:
    snapshot_id: int
    observation: np.ndarray
    action: int
    reward: float
    behavior_logprob: float
    critic_value: float


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)
    snapshots: list[EnvState] = field(default_factory=list)
    signature: frozenset = frozenset()
    terminal: bool = False
    success: bool = False
    origin: str = "seed"
    rollout_state_id: int = -1
    config_index: int = 0
    traj_id: int = -1
    bootstrap_value: float = 0.0
    gamma: float = 1.0
    start_items: frozenset = frozenset()
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    @property
    def ret(self) -> float:
        """R(tau): the gamma-discounted sum of step rewards."""
        discounts = self.gamma ** np.arange(len(self.steps))
        return float((discounts * self.rewards).sum())

    def recompute_signature(self) -> frozenset:
        return frozenset(self.start_items) | frozenset(i for i in self.items if i is not None)

    def to_record(self) -> dict:
        return {
            "traj_id": self.traj_id,
            "origin": self.origin,
            "rollout_state_id": self.rollout_state_id,
            "config_index": self.config_index,
            "return": self.ret,
            "success": self.success,
            "terminal": self.terminal,
            "signature": sorted(self.signature),
            "actions": [s.action for s in self.steps],
            "behavior_logprobs": [s.behavior_logprob for s in self.steps],
        }


@dataclass(frozen=True)
class RolloutState:
    state: EnvState
    snapshot_id: int
    timestep: int
    seed_index: int
    config_index: int = 0
    state_id: int = -1


@dataclass
class VineBatch:
    rollout_state: RolloutState
    vines: list[Trajectory]

    @property
    def timestep(self) -> int:
        return self.rollout_state.timestep


@dataclass(frozen=True)
class BudgetPlan:
    N: int
    p: int
    n: int
    B: int

    @property
    def total(self) -> int:
        """Audited count: N seeds plus N vines at each of p states per seed."""
        return self.N + self.p * self.N ** 2

    @property
    def printed_total(self) -> int:
        """The alternative count N + N^2 (p - 1), reported for comparison only."""
        return self.N + self.N ** 2 * (self.p - 1)

    @property
    def valid(self) -> bool:
        return self.total <= self.B


def feasible_plans(n: int, B: int) -> list[tuple[int, int]]:
    return [
        (N, p)
        for N in range(n + 1, B + 1)
        for p in range(1, B + 1)
        if N + p * N * N <= B
    ]


def plan_budget(N: int, p: int, B: int, n: int) -> BudgetPlan:
    if N <= n:
        raise BudgetError(f"N must exceed the set size (N={N}, n={n})")
    if p < 1 or B < N:
        raise BudgetError(f"Need p >= 1 and B >= N (p={p}, B={B}, N={N})")
    plan = BudgetPlan(N, p, n, B)
    if not plan.valid:
        options = ", ".join(f"(N={a}, p={b})" for a, b in feasible_plans(n, B))
        raise BudgetError(
            f"N + p*N^2 = {plan.total} exceeds budget B={B} for N={N}, p={p}. "
            f"Feasible: {options or 'none'}"
        )
    return plan


# ----------------------------------------------------------------------------
# Collection
# ----------------------------------------------------------------------------

def run_episode(env, policy, rng: np.random.Generator, horizon: int | None = None,
                critic=None, gamma: float = 1.0, origin: str = "seed",
                rollout_state_id: int = -1, config_index: int = 0) -> Trajectory:
    """Roll the policy from the env's current state until terminal or `horizon` steps."""
    traj = Trajectory(origin=origin, rollout_state_id=rollout_state_id,
                      config_index=config_index, gamma=gamma,
                      start_items=frozenset(env.start_signature()))
    while not env.terminal and (horizon is None or len(traj.steps) < horizon):
        obs = env.observation()
        traj.snapshots.append(env.snapshot())
        action, logp = policy.sample_action(obs, rng)
        value = critic.value(obs) if critic is not None else 0.0
        outcome = env.step(action)
        traj.steps.append(Step(len(traj.snapshots) - 1, obs, action, outcome.reward, logp, value))
        traj.items.append(env.signature_item(outcome))
    traj.terminal = env.terminal
    traj.success = env.success
    if not env.terminal and critic is not None:
        traj.bootstrap_value = critic.value(env.observation())
    traj.signature = traj.recompute_signature()
    return traj


def _seed_job(args):
    env, policy, critic, seed, horizon, gamma, config_index = args
    return run_episode(env, policy, np.random.default_rng(seed), horizon, critic, gamma,
                       config_index=config_index)


def _vine_job(args):
    env, state, policy, critic, seed, horizon, gamma, state_id, config_index = args
    env.restore(state)
    return run_episode(env, policy, np.random.default_rng(seed), horizon, critic, gamma,
                       origin="vine", rollout_state_id=state_id, config_index=config_index)


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def collect_seed_rollouts(env_factory, policy, N: int, horizon: int | None,
                          rng: np.random.Generator, critic=None, gamma: float = 1.0,
                          workers: int = 1) -> list[Trajectory]:
    """N independent episodes; env_factory(j) returns (env at its start state, config index)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    seeds = rng.integers(0, 2**63 - 1, size=N)
    jobs = []
    for j in range(N):
        env, config_index = env_factory(j)
        jobs.append((env, policy, critic, int(seeds[j]), horizon, gamma, config_index))
    return _run_jobs(_seed_job, jobs, workers)


def select_rollout_states(traj: Trajectory, p: int, criterion: str = "equal_spacing",
                          policy=None, critic=None, notes: list | None = None,
                          verbose: bool = False) -> list[tuple[int, int]]:
    """Pick p rollout states as (timestep, snapshot-id), strictly increasing in time."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if criterion not in CRITERIA:
        raise ValueError(f"Unknown rollout-state criterion '{criterion}'")
    T = len(traj.steps)
    if T < p:
        message = f"Trajectory of length {T} is shorter than p={p}; using all {T} states"
        if notes is not None:
            notes.append(message)
        if verbose:
            print(f"⚠️  {message}")
        timesteps = list(range(T))
    elif criterion == "equal_spacing":
        timesteps = [k * T // (p + 1) for k in range(1, p + 1)]
    elif criterion == "top_entropy":
        scores = [policy.entropy(s.observation) for s in traj.steps]
        timesteps = sorted(np.argsort(-np.asarray(scores), kind="stable")[:p].tolist())
    else:
        rewards = traj.rewards
        to_go = np.cumsum(rewards[::-1])[::-1]
        scores = [(to_go[t] - critic.value(s.observation)) ** 2 for t, s in enumerate(traj.steps)]
        timesteps = sorted(np.argsort(-np.asarray(scores), kind="stable")[:p].tolist())
    return [(t, traj.steps[t].snapshot_id) for t in timesteps]


def grow_vines(env, policy, rollout_state: RolloutState, N: int, horizon: int | None,
               rng: np.random.Generator, critic=None, gamma: float = 1.0,
               workers: int = 1) -> VineBatch:
    """N trajectories, each from a fresh restore of the rollout state's snapshot."""
    try:
        env.restore(rollout_state.state)
    except SnapshotMismatchError as e:
        raise RestoreError(f"Cannot restore rollout state {rollout_state.state_id}: {e}") from e
    seeds = rng.integers(0, 2**63 - 1, size=N)
    jobs = [
        (env.clone() if workers > 1 else env, rollout_state.state, policy, critic, int(seeds[i]),
         horizon, gamma, rollout_state.state_id, rollout_state.config_index)
        for i in range(N)
    ]
    return VineBatch(rollout_state, _run_jobs(_vine_job, jobs, workers))


def dump_trajectories(path: str | Path, trajectories) -> None:
    with open(path, "w") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_record(), sort_keys=True) + "\n")
