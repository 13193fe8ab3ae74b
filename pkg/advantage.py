"""
Advantage assembly.

Seed trajectories and vine steps outside the polychrome window get GAE
advantages; the first W+1 steps of every vine that belongs to a set get the
set score minus the Monte Carlo mean over the M sets grown from the same
rollout state. An optional UCB bonus is added before one joint
normalization over the whole batch.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from env import observation_key

GAE, POLYCHROMIC = "gae", "polychromic"


class WindowError(ValueError):
    """Negative polychrome window."""


@dataclass(frozen=True)
class AdvantageRecord:
    traj_id: int
    step_index: int
    advantage: float
    source: str
    target: float
    behavior_logprob: float
    observation: np.ndarray = field(repr=False, compare=False, default=None)
    action: int = -1


def gae(traj, critic=None, gamma: float = 1.0, lam: float = 0.95) -> list[tuple[float, float]]:
    """(A_t, R_hat_t) per step; values are the ones recorded at collection unless a critic is given."""
    if critic is not None:
        values = [critic.value(s.observation) for s in traj.steps]
    else:
        values = [s.critic_value for s in traj.steps]
    next_value = 0.0 if traj.terminal else traj.bootstrap_value
    out = [None] * len(traj.steps)
    running = 0.0
    for t in reversed(range(len(traj.steps))):
        delta = traj.steps[t].reward + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        out[t] = (running, running + values[t])
        next_value = values[t]
    return out


def gae_records(traj, gamma: float = 1.0, lam: float = 0.95, critic=None) -> list[AdvantageRecord]:
    return [
        AdvantageRecord(traj.traj_id, t, adv, GAE, target, step.behavior_logprob, step.observation, step.action)
        for t, ((adv, target), step) in enumerate(zip(gae(traj, critic, gamma, lam), traj.steps))
    ]


def polychromic_advantages(batch, sets, scores, W: int, gamma: float = 1.0,
                           lam: float = 0.95) -> list[AdvantageRecord]:
    """One record per step of every vine in the batch.

    A vine in several sets gets the average of its sets' advantages.
    Critic targets stay GAE-derived for every step.
    """
    if W < 0:
        raise WindowError(f"Polychrome window must be >= 0, got {W}")
    if len(sets) != len(scores) or len(sets) < 2:
        raise ValueError("Need one score per set and at least two sets")
    baseline = float(np.mean(scores))
    shares: dict[int, list[float]] = {}
    for set_sample, score in zip(sets, scores):
        for member in set_sample.members:
            shares.setdefault(member, []).append(score - baseline)

    records = []
    for index, vine in enumerate(batch.vines):
        base = gae_records(vine, gamma, lam)
        if index in shares:
            poly = float(np.mean(shares[index]))
            for t in range(min(W + 1, len(base))):
                base[t] = replace(base[t], advantage=poly, source=POLYCHROMIC)
        records.extend(base)
    return records


def normalize_advantages(records, notes: list | None = None, verbose: bool = False) -> list[AdvantageRecord]:
    """Joint population standardization over all sources."""
    if len(records) < 2:
        raise ValueError("Normalization needs at least two records")
    values = np.array([r.advantage for r in records])
    std = values.std()
    if std < 1e-12:
        message = f"Zero-variance advantage batch ({len(records)} records) left unnormalized"
        if notes is not None:
            notes.append(message)
        if verbose:
            print(f"⚠️  {message}")
        return list(records)
    mean = values.mean()
    return [replace(r, advantage=float((r.advantage - mean) / std)) for r in records]


def advantage_stats(records) -> dict:
    """Mean/std overall and per source, for auditing the joint normalization."""
    stats = {}
    groups = {"all": records}
    for source in (GAE, POLYCHROMIC):
        groups[source] = [r for r in records if r.source == source]
    for name, group in groups.items():
        values = np.array([r.advantage for r in group])
        stats[f"adv_{name}_count"] = len(group)
        stats[f"adv_{name}_mean"] = float(values.mean()) if len(group) else 0.0
        stats[f"adv_{name}_std"] = float(values.std()) if len(group) else 0.0
    return stats


class VisitCounts:
    """N(s, a) keyed by the exact observation key."""

    def __init__(self):
        self.counts: dict[tuple[bytes, int], int] = {}

    def __len__(self):
        return len(self.counts)

    def get(self, obs, action: int) -> int:
        return self.counts.get((observation_key(obs), int(action)), 0)

    def add(self, obs, action: int, amount: int = 1) -> None:
        key = (observation_key(obs), int(action))
        self.counts[key] = self.counts.get(key, 0) + amount

    def update(self, trajectories) -> None:
        for traj in trajectories:
            for step in traj.steps:
                self.add(step.observation, step.action)

    def reset(self) -> None:
        self.counts.clear()

    def to_dict(self) -> dict:
        return {f"{key.hex()}:{action}": count for (key, action), count in sorted(self.counts.items())}

    @classmethod
    def from_dict(cls, data: dict) -> "VisitCounts":
        visits = cls()
        for name, count in data.items():
            key, action = name.rsplit(":", 1)
            visits.counts[(bytes.fromhex(key), int(action))] = int(count)
        return visits


def ucb_bonus(counts: VisitCounts, s, a: int, lambda_ucb: float) -> float:
    if lambda_ucb < 0:
        raise ValueError("lambda_ucb must be >= 0")
    if lambda_ucb == 0:
        return 0.0
    n = counts.get(s, a)
    return lambda_ucb * (1.0 if n == 0 else min(1.0, n ** -0.5))


def apply_ucb(records, counts: VisitCounts, lambda_ucb: float) -> list[AdvantageRecord]:
    if lambda_ucb == 0:
        return list(records)
    return [
        replace(r, advantage=r.advantage + ucb_bonus(counts, r.observation, r.action, lambda_ucb))
        for r in records
    ]


def assemble_batch(seed_trajectories, vine_batches=(), sets_per_batch=(), scores_per_batch=(),
                   W: int = 0, gamma: float = 1.0, lam: float = 0.95, counts: VisitCounts | None = None,
                   lambda_ucb: float = 0.0, normalize: bool = True,
                   notes: list | None = None) -> list[AdvantageRecord]:
    """GAE for seeds, windowed polychromic advantages for vines, UCB, then joint normalization."""
    records = []
    for traj in seed_trajectories:
        records.extend(gae_records(traj, gamma, lam))
    for batch, sets, scores in zip(vine_batches, sets_per_batch, scores_per_batch):
        records.extend(polychromic_advantages(batch, sets, scores, W, gamma, lam))
    if counts is not None and lambda_ucb > 0:
        records = apply_ucb(records, counts, lambda_ucb)
    if normalize:
        records = normalize_advantages(records, notes)
    return records
