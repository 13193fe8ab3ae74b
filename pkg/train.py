"""
Fine-tuning loops: Polychromic PPO, PPO with vines, plain PPO and REINFORCE.

One Polychromic PPO iteration:
  seed rollouts -> rollout states -> vines -> sets + f_poly scores ->
  windowed polychromic advantages (GAE elsewhere) -> optional UCB bonus ->
  joint normalization -> K epochs of clipped-surrogate + value + KL updates.
The behaviour policy is the copy taken when the iteration starts.

Usage:
    python cli.py finetune --checkpoint runs/pretrained/policy.ckpt \\
        --suite configs/two_rooms.json --method poly_ppo --out runs/poly_seed0
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from advantage import VisitCounts, advantage_stats, assemble_batch
from config import KL_SWEEP, PRETRAIN_SUCCESS_BAND, TrainConfig, save_train_config
from env import (
    RoomsConfig,
    enumerate_observation_keys,
    generate_pretraining_data,
    make_env,
)
from policy import (
    behavior_cloning,
    load_checkpoint,
    make_critic,
    make_mlp_policy,
    make_optimizer,
    make_tabular_policy,
    save_checkpoint,
)
from rollout import (
    RngStreams,
    RolloutState,
    collect_seed_rollouts,
    dump_trajectories,
    grow_vines,
    plan_budget,
    run_episode,
    select_rollout_states,
)
from setobj import SetObjective, diversity_for_env, form_sets

SCHEMA_VERSION = 1


class NonFiniteError(RuntimeError):
    """A loss, ratio or gradient became NaN or infinite."""


class BudgetViolationError(RuntimeError):
    """An iteration collected more trajectories than the budget allows."""


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def ppo_loss(policy, records, epsilon: float) -> tuple[float, np.ndarray]:
    """Negative mean clipped surrogate and its gradient w.r.t. policy params."""
    grad = np.zeros_like(policy.params)
    total = 0.0
    B = len(records)
    for r in records:
        logp = policy.log_probs(r.observation)[r.action]
        ratio = math.exp(logp - r.behavior_logprob) if np.isfinite(logp) else float("nan")
        if not np.isfinite(ratio):
            raise NonFiniteError(f"Non-finite ratio for trajectory {r.traj_id}, step {r.step_index}")
        unclipped = ratio * r.advantage
        clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon) * r.advantage
        total += min(unclipped, clipped)
        if unclipped <= clipped:
            policy.logprob_grad(r.observation, r.action, grad, scale=-r.advantage * ratio / B)
    return -total / B, grad


def kl_penalty(behavior_policy, policy, observations) -> tuple[float, np.ndarray]:
    """Mean KL(pi_beta || pi_theta) over states and its gradient w.r.t. theta."""
    grad = np.zeros_like(policy.params)
    total = 0.0
    B = len(observations)
    for obs in observations:
        log_beta = behavior_policy.log_probs(obs)
        log_theta = policy.log_probs(obs)
        beta = np.exp(log_beta)
        total += float(np.sum(beta * (log_beta - log_theta)))
        policy.grad_from_logit_grad(obs, (np.exp(log_theta) - beta) / B, grad)
    return total / B, grad


def value_loss(critic, records) -> tuple[float, np.ndarray]:
    grad = np.zeros_like(critic.params)
    total = 0.0
    B = len(records)
    for r in records:
        err = critic.value(r.observation) - r.target
        total += err * err
        critic.value_grad(r.observation, grad, scale=2.0 * err / B)
    return total / B, grad


def reinforce_gradient(policy, trajectories) -> np.ndarray:
    """Ascent direction mean_tau sum_t grad log pi(a_t|s_t) (R(tau) - mean R)."""
    if len(trajectories) < 2:
        raise ValueError("REINFORCE with a batch-mean baseline needs at least two trajectories")
    returns = np.array([t.ret for t in trajectories])
    baseline = returns.mean()
    grad = np.zeros_like(policy.params)
    for traj, ret in zip(trajectories, returns):
        weight = (ret - baseline) / len(trajectories)
        if weight == 0:
            continue
        for step in traj.steps:
            policy.logprob_grad(step.observation, step.action, grad, scale=weight)
    return grad


def reinforce_update(policy, trajectories, lr: float, optimizer=None):
    optimizer = optimizer or make_optimizer("sgd", lr)
    optimizer.step(policy.params, -reinforce_gradient(policy, trajectories))
    return policy


# ----------------------------------------------------------------------------
# Iteration
# ----------------------------------------------------------------------------

@dataclass
class IterationReport:
    iteration: int
    method: str
    mean_return: float
    success_rate: float
    policy_loss: float
    value_loss: float
    kl: float
    entropy: float
    trajectory_count: int
    mean_set_diversity: float | None = None
    grad_norm: float = 0.0
    advantage: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    trajectories: list = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "iteration": self.iteration,
            "method": self.method,
            "mean_return": self.mean_return,
            "success_rate": self.success_rate,
            "policy_loss": self.policy_loss,
            "value_loss": self.value_loss,
            "kl": self.kl,
            "entropy": self.entropy,
            "trajectory_count": self.trajectory_count,
            "mean_set_diversity": self.mean_set_diversity,
            "grad_norm": self.grad_norm,
            **self.advantage,
            "notes": self.notes,
        }


@dataclass
class TrainState:
    """Everything besides the parameters needed to continue a run bit-identically."""

    iteration: int
    actor_opt: object
    critic_opt: object | None
    counts: VisitCounts

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict() if self.critic_opt is not None else None,
            "counts": self.counts.to_dict(),
        }

    def load_dict(self, data: dict) -> "TrainState":
        self.iteration = int(data["iteration"])
        self.actor_opt.load_state_dict(data["actor_opt"])
        if self.critic_opt is not None and data.get("critic_opt") is not None:
            self.critic_opt.load_state_dict(data["critic_opt"])
        self.counts = VisitCounts.from_dict(data["counts"])
        return self


def new_train_state(config: TrainConfig, uses_critic: bool = True) -> TrainState:
    return TrainState(
        iteration=0,
        actor_opt=make_optimizer(config.optimizer, config.actor_lr, config.max_grad_norm),
        critic_opt=make_optimizer(config.optimizer, config.critic_lr, config.max_grad_norm) if uses_critic else None,
        counts=VisitCounts(),
    )


@dataclass
class IterationData:
    seeds: list
    batches: list = field(default_factory=list)
    sets: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def trajectories(self) -> list:
        return list(self.seeds) + [v for b in self.batches for v in b.vines]


def set_objective_for(config: TrainConfig, diversity_fn=None) -> SetObjective:
    if config.method == "vine_ppo":
        return SetObjective("mean_return")
    return SetObjective("poly", diversity_fn or diversity_for_env(config.env_kind))


def collect_iteration_data(envs, behavior, critic, config: TrainConfig, rng: np.random.Generator,
                           iteration: int, objective: SetObjective | None = None) -> IterationData:
    """Seed rollouts, plus rollout states, vines, sets and set scores for vine methods."""
    n_seeds = config.num_vines if config.use_vines else config.budget

    def factory(j):
        index = (iteration * n_seeds + j) % len(envs)
        env = envs[index].clone()
        env.reset()
        return env, index

    seeds = collect_seed_rollouts(factory, behavior, n_seeds, None, rng, critic, config.gamma, config.workers)
    data = IterationData(seeds)
    if not config.use_vines:
        return data

    objective = objective or set_objective_for(config)
    state_id = 0
    for seed_index, seed in enumerate(seeds):
        chosen = select_rollout_states(seed, config.rollout_states, config.rollout_criterion,
                                       behavior, critic, data.notes)
        for timestep, snapshot_id in chosen:
            state = RolloutState(seed.snapshots[snapshot_id], snapshot_id, timestep, seed_index,
                                 seed.config_index, state_id)
            env = envs[seed.config_index].clone()
            batch = grow_vines(env, behavior, state, config.num_vines, None, rng, critic,
                               config.gamma, config.workers)
            sets = form_sets(batch, config.set_size, config.num_sets, rng, notes=data.notes)
            data.batches.append(batch)
            data.sets.append(sets)
            data.scores.append([objective(s) for s in sets])
            state_id += 1
    for traj_id, traj in enumerate(data.trajectories):
        traj.traj_id = traj_id
    return data


def build_records(data: IterationData, config: TrainConfig, counts: VisitCounts | None = None):
    if counts is not None and config.lambda_ucb > 0:
        if config.ucb_schedule == "per_iteration":
            counts.reset()
        counts.update(data.trajectories)
    return assemble_batch(
        data.seeds, data.batches, data.sets, data.scores,
        W=config.polychrome_window, gamma=config.gamma, lam=config.gae_lambda,
        counts=counts, lambda_ucb=config.lambda_ucb, notes=data.notes,
    )


def update_direction(policy, behavior, records, config: TrainConfig) -> np.ndarray:
    """Full-batch policy-loss gradient (clipped surrogate + KL) without stepping."""
    _, grad = ppo_loss(policy, records, config.clip_epsilon)
    if config.kl_coef > 0:
        _, kl_grad = kl_penalty(behavior, policy, [r.observation for r in records])
        grad = grad + config.kl_coef * kl_grad
    return grad


def ppo_update(policy, critic, behavior, records, config: TrainConfig, state: TrainState,
               rng: np.random.Generator) -> dict:
    losses = {"policy_loss": [], "value_loss": [], "grad_norm": []}
    for epoch in range(config.ppo_epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.minibatch_size):
            mb = [records[i] for i in order[start:start + config.minibatch_size]]
            p_loss, p_grad = ppo_loss(policy, mb, config.clip_epsilon)
            if config.kl_coef > 0:
                kl, kl_grad = kl_penalty(behavior, policy, [r.observation for r in mb])
                p_loss += config.kl_coef * kl
                p_grad = p_grad + config.kl_coef * kl_grad
            v_loss, v_grad = value_loss(critic, mb)
            v_grad = config.value_coef * v_grad
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)
                    and np.all(np.isfinite(p_grad)) and np.all(np.isfinite(v_grad))):
                raise NonFiniteError(f"Non-finite loss in epoch {epoch + 1}, minibatch starting at {start}")
            losses["grad_norm"].append(state.actor_opt.step(policy.params, p_grad))
            state.critic_opt.step(critic.params, v_grad)
            losses["policy_loss"].append(p_loss)
            losses["value_loss"].append(v_loss)
    return {k: float(np.mean(v)) if v else 0.0 for k, v in losses.items()}


def poly_ppo_iteration(envs, policy, critic, config: TrainConfig, state: TrainState,
                       streams: RngStreams, diversity_fn=None) -> IterationReport:
    """One iteration of the configured method; updates policy/critic in place."""
    iteration = state.iteration
    rng = streams.generator("iteration", iteration)
    behavior = policy.copy()
    if config.use_vines:
        plan_budget(config.num_vines, config.rollout_states, config.budget, config.set_size)

    data = collect_iteration_data(envs, behavior, critic, config, rng, iteration,
                                  set_objective_for(config, diversity_fn) if config.use_vines else None)
    count = len(data.trajectories)
    if count > config.budget:
        raise BudgetViolationError(f"Iteration {iteration} collected {count} trajectories (budget {config.budget})")

    observations = [s.observation for t in data.seeds for s in t.steps]
    entropy = float(np.mean([behavior.entropy(o) for o in observations])) if observations else 0.0
    seed_returns = [t.ret for t in data.seeds]

    diversity_fn = diversity_fn or diversity_for_env(config.env_kind)
    set_div = None
    if data.sets:
        set_div = float(np.mean([diversity_fn(s.trajectories) for sets in data.sets for s in sets]))

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "grad_norm": 0.0}
    adv_stats = {}
    if config.method == "reinforce":
        stats["grad_norm"] = state.actor_opt.step(policy.params, -reinforce_gradient(policy, data.seeds))
    else:
        records = build_records(data, config, state.counts)
        adv_stats = advantage_stats(records)
        stats = ppo_update(policy, critic, behavior, records, config, state, rng)

    kl = 0.0
    if observations:
        kl, _ = kl_penalty(behavior, policy, observations)
    state.iteration += 1
    return IterationReport(
        iteration=iteration,
        method=config.method,
        mean_return=float(np.mean(seed_returns)),
        success_rate=float(np.mean([t.success for t in data.seeds])),
        policy_loss=stats["policy_loss"],
        value_loss=stats["value_loss"],
        kl=float(kl),
        entropy=entropy,
        trajectory_count=count,
        mean_set_diversity=set_div,
        grad_norm=stats["grad_norm"],
        advantage=adv_stats,
        notes=data.notes,
        trajectories=data.trajectories,
    )


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------

def vocab_size_for(configs) -> int | None:
    if configs and not isinstance(configs[0], RoomsConfig):
        return max(c.n_nodes for c in configs)
    return None


def build_envs(configs, seed: int = 0) -> list:
    vocab = vocab_size_for(configs)
    return [make_env(c, seed, vocab) for c in configs]


@dataclass
class RunResult:
    policy: object
    critic: object
    reports: list[IterationReport]
    out_dir: Path


def _read_reports(path: Path, limit: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()][:limit]


def train_run(config: TrainConfig, configs, policy, out_dir: str | Path, resume: bool = False,
              diversity_fn=None, dump_final: bool = False, verbose: bool = True) -> RunResult:
    """Iterate the configured method, writing checkpoints and metrics.jsonl under out_dir.

    dump_final also writes the last iteration's trajectories to trajectories.jsonl.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    envs = build_envs(configs, config.seed)
    uses_critic = config.method != "reinforce"
    critic = make_critic(policy, seed=config.seed) if uses_critic else None
    state = new_train_state(config, uses_critic)
    streams = RngStreams(config.seed)
    previous = []

    run_state_path = out_dir / "run_state.json"
    if resume and run_state_path.exists():
        policy = load_checkpoint(out_dir / "policy.ckpt")
        if uses_critic:
            critic = load_checkpoint(out_dir / "critic.ckpt")
        with open(run_state_path) as f:
            state.load_dict(json.load(f))
        previous = _read_reports(out_dir / "metrics.jsonl", state.iteration)
        if verbose:
            print(f"✓ Resumed from iteration {state.iteration}")
    if config.temperature is not None:
        policy.temperature = config.temperature

    save_train_config(config, out_dir / "train_config.json")
    if verbose:
        print("=" * 60)
        print(f"FINE-TUNING: {config.method} on {len(configs)} {config.env_kind} configurations")
        if config.use_vines:
            plan = plan_budget(config.num_vines, config.rollout_states, config.budget, config.set_size)
            print(f"Budget: {plan.total} trajectories per iteration "
                  f"(N + p*N^2; N + N^2(p-1) would give {plan.printed_total}), B={plan.B}")
        print("=" * 60)

    reports = []

    def checkpoint():
        save_checkpoint(policy, out_dir / "policy.ckpt")
        if critic is not None:
            save_checkpoint(critic, out_dir / "critic.ckpt")
        with open(run_state_path, "w") as f:
            json.dump(state.to_dict(), f, sort_keys=True)
        with open(out_dir / "metrics.jsonl", "w") as f:
            for record in previous:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            for report in reports:
                f.write(json.dumps(report.to_record(), sort_keys=True) + "\n")

    while state.iteration < config.iterations:
        report = poly_ppo_iteration(envs, policy, critic, config, state, streams, diversity_fn)
        trajectories, report.trajectories = report.trajectories, []
        if dump_final and state.iteration == config.iterations:
            dump_trajectories(out_dir / "trajectories.jsonl", trajectories)
        reports.append(report)
        if verbose and (report.iteration % 10 == 0 or state.iteration == config.iterations):
            print(f"  Iter {report.iteration:4d}: return {report.mean_return:.3f}  "
                  f"success {report.success_rate:.2%}  entropy {report.entropy:.3f}  "
                  f"trajectories {report.trajectory_count}")
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    if verbose:
        print(f"✓ Run complete: {out_dir}")
    return RunResult(policy, critic, reports, out_dir)


def select_kl_coef(config: TrainConfig, configs, policy, out_dir: str | Path,
                   sweep=KL_SWEEP, verbose: bool = True) -> tuple[float, dict]:
    """Best beta_KL from the sweep by final-iteration success on seed 0 (ties -> smaller)."""
    results = {}
    for beta in sweep:
        trial = config.with_overrides(kl_coef=beta, seed=0)
        run = train_run(trial, configs, policy.copy(), Path(out_dir) / f"kl_{beta}", verbose=False)
        results[beta] = run.reports[-1].success_rate if run.reports else 0.0
        if verbose:
            print(f"  beta_KL={beta}: final success {results[beta]:.2%}")
    best = max(sweep, key=lambda b: (results[b], -b))
    if verbose:
        print(f"✓ Selected beta_KL={best}")
    return best, results


# ----------------------------------------------------------------------------
# Pretraining pipeline
# ----------------------------------------------------------------------------

def build_policy(envs, parameterization: str = "tabular", hidden: int = 32, seed: int = 0,
                 temperature: float = 1.0, key_limit: int = 200_000):
    n_actions = envs[0].n_actions
    if parameterization == "tabular":
        keys = {}
        for env in envs:
            env.reset()
            for key in enumerate_observation_keys(env, key_limit):
                keys.setdefault(key, None)
        return make_tabular_policy(list(keys), n_actions, temperature)
    if parameterization == "mlp":
        return make_mlp_policy(envs[0].observation_cardinalities, n_actions, hidden, seed, temperature)
    raise ValueError(f"Unknown parameterization '{parameterization}'")


def rollout_success_rate(policy, envs, rollouts: int, seed: int = 0) -> float:
    """Mean per-configuration success over `rollouts` start-state episodes each."""
    streams = RngStreams(seed)
    rates = []
    for index, env in enumerate(envs):
        rng = streams.generator("calibrate", index)
        wins = 0
        for _ in range(rollouts):
            env.reset()
            wins += int(run_episode(env, policy, rng).success)
        rates.append(wins / rollouts)
    return float(np.mean(rates))


def calibrate_temperature(policy, envs, band=PRETRAIN_SUCCESS_BAND, rollouts: int = 32, seed: int = 0,
                          max_temperature: float = 64.0, steps: int = 16,
                          verbose: bool = False) -> tuple[float, float]:
    """Raise the policy temperature until seeded success falls inside `band`.

    Bisects log-temperature between the current value and `max_temperature`.
    Every trial reuses the same random streams, so the search is deterministic.
    Returns (temperature, success); the policy is left at that temperature.
    """
    low, high = band
    target = (low + high) / 2

    def success_at(temperature: float) -> float:
        trial = policy.copy()
        trial.temperature = temperature
        return rollout_success_rate(trial, envs, rollouts, seed)

    cold, hot = policy.temperature, max_temperature
    best = (cold, success_at(cold))
    if verbose:
        print(f"  Temperature {cold:.3f}: success {best[1]:.2%}")
    if best[1] <= high:
        return best
    for _ in range(steps):
        mid = math.sqrt(cold * hot)
        rate = success_at(mid)
        if verbose:
            print(f"  Temperature {mid:.3f}: success {rate:.2%}")
        if abs(rate - target) < abs(best[1] - target):
            best = (mid, rate)
        if low <= rate <= high:
            break
        if rate > high:
            cold = mid
        else:
            hot = mid
    policy.temperature = best[0]
    return best


def run_pretraining(env_kind: str, configs, out_dir: str | Path, parameterization: str = "tabular",
                    count: int = 20, noise: float = 0.25, epochs: int = 20, lr: float = 0.05,
                    entropy_coef: float = 0.01, seed: int = 0, success_band=PRETRAIN_SUCCESS_BAND,
                    calibration_rollouts: int = 32, verbose: bool = True):
    """Generate demonstrations, behaviour-clone a policy and save it as policy.ckpt.

    A rooms policy that solves the suite too reliably is flattened (higher
    temperature) until its training-config success lands in `success_band`;
    pass success_band=None to keep the cloned policy as is.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if verbose:
        print("=" * 60)
        print(f"PRETRAINING: {env_kind}, {len(configs)} configurations, noise {noise}")
        print("=" * 60)
    envs = build_envs(configs, seed)
    data = generate_pretraining_data(env_kind, configs, count, noise, seed, verbose=verbose)
    policy = build_policy(envs, parameterization, seed=seed)
    report = behavior_cloning(policy, data, epochs, lr, entropy_coef, seed=seed, verbose=verbose)
    success = None
    if env_kind == "rooms" and success_band is not None:
        _, success = calibrate_temperature(report.policy, envs, success_band, calibration_rollouts, seed,
                                           verbose=verbose)
        if not success_band[0] <= success <= success_band[1]:
            print(f"⚠️  Pretrained success {success:.2%} is outside {success_band}")
    save_checkpoint(report.policy, out_dir / "policy.ckpt")
    summary = {
        "env_kind": env_kind,
        "pairs": len(data),
        "sample_counts": data.sample_counts,
        "holdout_before": report.holdout_before,
        "holdout_after": report.holdout_after,
        "parameters": int(report.policy.params.size),
        "temperature": report.policy.temperature,
        "pretrained_success": success,
    }
    with open(out_dir / "pretrain.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if verbose:
        if success is not None:
            print(f"✓ Training-config success {success:.2%} at temperature {report.policy.temperature:.3f}")
        print(f"✓ Saved pretrained policy to {out_dir / 'policy.ckpt'}")
    return report.policy, summary
