"""
Evaluation: success / pass@k over a configuration suite, triangle validity,
diversity, creativity and diff@k, mean set diversity, and the
initial-state perturbation harness.

Aggregation across seeds averages per configuration first, then across
configurations, then across seeds.

Usage:
    python cli.py eval --checkpoint runs/poly_seed0/policy.ckpt \\
        --suite configs/two_rooms.json -R 64 --k 1 2 4 8 16 --out runs/poly_seed0/eval.jsonl
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import comb

from config import TrainConfig
from env import ExpertPolicy, RoomsConfig, RoomsEnv, make_env, shortest_path_actions, triangle_identity
from metrics_store import curve_table
from rollout import RngStreams, run_episode
from setobj import diversity
from train import train_run, vocab_size_for

SCHEMA_VERSION = 1
DEFAULT_K_GRID = (1, 2, 4, 8, 16)
TOLERANCE = 1e-12


class PassAtKError(ValueError):
    """pass@k requested with k larger than the number of rollouts."""


class InconsistentReportError(ValueError):
    """An evaluation report breaks a metric invariant."""


def pass_at_k(successes: int, rollouts: int, k: int) -> float:
    """Unbiased 1 - C(R - s, k) / C(R, k)."""
    if not 0 <= successes <= rollouts:
        raise PassAtKError(f"Need 0 <= s <= R (s={successes}, R={rollouts})")
    if not 1 <= k <= rollouts:
        raise PassAtKError(f"Need 1 <= k <= R (k={k}, R={rollouts})")
    if rollouts - successes < k:
        return 1.0
    return 1.0 - comb(rollouts - successes, k, exact=True) / comb(rollouts, k, exact=True)


@dataclass
class ConfigResult:
    config_index: int
    successes: int
    rollouts: int
    mean_return: float


@dataclass
class EvalReport:
    per_config: list[ConfigResult] = field(default_factory=list)
    k_grid: tuple[int, ...] = DEFAULT_K_GRID
    pass_at_k: dict[int, float] = field(default_factory=dict)
    validity: float | None = None
    diversity: int | None = None
    attempts: int | None = None
    creativity: float | None = None
    diff_at_k: dict[int, float] = field(default_factory=dict)
    validity_pass_at_k: dict[int, float] = field(default_factory=dict)
    creativity_pass_at_k: dict[int, float] = field(default_factory=dict)
    perturbation_pass_at_1: float | None = None
    label: str = ""

    def __post_init__(self):
        self.check()

    def check(self) -> "EvalReport":
        """pass@k curves in [0, 1] and nondecreasing; creativity <= validity; diversity <= attempts."""
        for name in ("pass_at_k", "validity_pass_at_k", "creativity_pass_at_k"):
            curve = getattr(self, name)
            values = [curve[k] for k in sorted(curve)]
            if any(not -TOLERANCE <= v <= 1 + TOLERANCE for v in values):
                raise InconsistentReportError(f"{name} leaves [0, 1]: {curve}")
            if any(b < a - TOLERANCE for a, b in zip(values, values[1:])):
                raise InconsistentReportError(f"{name} decreases in k: {curve}")
        for k, value in self.creativity_pass_at_k.items():
            if value > self.validity_pass_at_k.get(k, 1.0) + TOLERANCE:
                raise InconsistentReportError(f"creativity pass@{k} exceeds validity pass@{k}")
        if self.creativity is not None and self.validity is not None:
            if self.creativity > self.validity + TOLERANCE:
                raise InconsistentReportError(
                    f"creativity {self.creativity} exceeds validity {self.validity}")
        if self.diversity is not None and self.attempts is not None:
            if not 0 <= self.diversity <= self.attempts:
                raise InconsistentReportError(
                    f"diversity {self.diversity} outside [0, {self.attempts}] attempts")
        return self

    @property
    def success_rate(self) -> float:
        if not self.per_config:
            return 0.0
        return float(np.mean([c.successes / c.rollouts for c in self.per_config]))

    @property
    def mean_return(self) -> float:
        if not self.per_config:
            return 0.0
        return float(np.mean([c.mean_return for c in self.per_config]))

    def to_records(self) -> list[dict]:
        records = [{"schema_version": SCHEMA_VERSION, "record": "config", "label": self.label, **asdict(c)}
                   for c in self.per_config]
        records.append({
            "schema_version": SCHEMA_VERSION,
            "record": "aggregate",
            "label": self.label,
            "success_rate": self.success_rate,
            "mean_return": self.mean_return,
            "k_grid": list(self.k_grid),
            "pass_at_k": {str(k): v for k, v in self.pass_at_k.items()},
            "validity": self.validity,
            "diversity": self.diversity,
            "attempts": self.attempts,
            "creativity": self.creativity,
            "diff_at_k": {str(k): v for k, v in self.diff_at_k.items()},
            "validity_pass_at_k": {str(k): v for k, v in self.validity_pass_at_k.items()},
            "creativity_pass_at_k": {str(k): v for k, v in self.creativity_pass_at_k.items()},
            "perturbation_pass_at_1": self.perturbation_pass_at_1,
        })
        return records

    @classmethod
    def from_records(cls, records: list[dict]) -> "EvalReport":
        report = cls()
        for record in records:
            if record.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"Unsupported metrics schema {record.get('schema_version')}")
            if record["record"] == "config":
                report.per_config.append(ConfigResult(
                    record["config_index"], record["successes"], record["rollouts"], record["mean_return"]))
                continue
            as_curve = lambda d: {int(k): v for k, v in (d or {}).items()}
            report.label = record["label"]
            report.k_grid = tuple(record["k_grid"])
            report.pass_at_k = as_curve(record["pass_at_k"])
            report.validity = record["validity"]
            report.diversity = record["diversity"]
            report.attempts = record.get("attempts")
            report.creativity = record["creativity"]
            report.diff_at_k = as_curve(record["diff_at_k"])
            report.validity_pass_at_k = as_curve(record["validity_pass_at_k"])
            report.creativity_pass_at_k = as_curve(record["creativity_pass_at_k"])
            report.perturbation_pass_at_1 = record["perturbation_pass_at_1"]
        return report.check()


def _episode(env, policy, rng):
    if isinstance(policy, ExpertPolicy):
        ret = 0.0
        while not env.terminal:
            action = policy.act(env)
            ret += env.step(action if action is not None else int(rng.integers(env.n_actions))).reward
        return env.success, ret
    traj = run_episode(env, policy, rng)
    return traj.success, traj.ret


def evaluate_suite(policy, configs, rollouts: int = 64, k_grid=DEFAULT_K_GRID, seed: int = 0,
                   label: str = "", verbose: bool = False) -> EvalReport:
    """R rollouts per configuration from its start state; pass@k averaged over configs."""
    k_grid = tuple(sorted(k_grid))
    if rollouts < max(k_grid):
        raise PassAtKError(f"R={rollouts} is smaller than the largest k={max(k_grid)}")
    streams = RngStreams(seed)
    vocab = vocab_size_for(configs)
    report = EvalReport(k_grid=k_grid, label=label)
    for index, config in enumerate(configs):
        env = make_env(config, seed, vocab)
        rng = streams.generator("eval", index)
        wins, returns = 0, []
        for _ in range(rollouts):
            env.reset()
            success, ret = _episode(env, policy, rng)
            wins += int(success)
            returns.append(ret)
        report.per_config.append(ConfigResult(index, wins, rollouts, float(np.mean(returns))))
        if verbose:
            print(f"  Config {index}: {wins}/{rollouts} successful")
    for k in k_grid:
        report.pass_at_k[k] = float(np.mean([pass_at_k(c.successes, c.rollouts, k) for c in report.per_config]))
    return report.check()


def _unique_valid_in_subsamples(identities, valid, k: int, resamples: int, rng) -> float:
    total = 0
    n = len(identities)
    for _ in range(resamples):
        picks = rng.choice(n, size=k, replace=False)
        total += len({identities[i] for i in picks if valid[i]})
    return total / resamples


def creativity_metrics(policy, triangle_configs, attempts: int = 64, k_grid=(1, 2, 4, 8, 16, 32),
                       resamples: int = 1000, seed: int = 0, report: EvalReport | None = None) -> EvalReport:
    """Validity, unique valid triangles, creativity and diff@k for the triangle task."""
    k_grid = tuple(k for k in sorted(k_grid) if k <= attempts)
    streams = RngStreams(seed)
    vocab = vocab_size_for(triangle_configs)
    report = report or EvalReport(k_grid=k_grid)
    n_valid = n_unique = n_creative = 0
    diff_curves, valid_curves, creative_curves = [], [], []
    for index, config in enumerate(triangle_configs):
        env = make_env(config, seed, vocab)
        rng = streams.generator("creativity", index)
        identities, valid = [], []
        for _ in range(attempts):
            env.reset()
            traj = run_episode(env, policy, rng)
            identities.append(triangle_identity([s.action for s in traj.steps]))
            valid.append(traj.success)
        unique = {t for t, ok in zip(identities, valid) if ok}
        unseen = unique - config.pretrain_seen
        n_valid += sum(valid)
        n_unique += len(unique)
        n_creative += len(unseen)
        novel_attempts = sum(ok and t not in config.pretrain_seen for t, ok in zip(identities, valid))
        sub_rng = streams.generator("diff", index)
        diff_curves.append([_unique_valid_in_subsamples(identities, valid, k, resamples, sub_rng) for k in k_grid])
        valid_curves.append([pass_at_k(sum(valid), attempts, k) for k in k_grid])
        creative_curves.append([pass_at_k(novel_attempts, attempts, k) for k in k_grid])

    total = attempts * len(triangle_configs)
    report.validity = n_valid / total
    report.diversity = n_unique
    report.attempts = total
    report.creativity = n_creative / total
    report.diff_at_k = dict(zip(k_grid, np.mean(diff_curves, axis=0).tolist()))
    report.validity_pass_at_k = dict(zip(k_grid, np.mean(valid_curves, axis=0).tolist()))
    report.creativity_pass_at_k = dict(zip(k_grid, np.mean(creative_curves, axis=0).tolist()))
    return report.check()


def mean_set_diversity(policy, configs, n: int = 4, sets: int = 16, seed: int = 0) -> float:
    """Average diversity of n-trajectory sets sampled from each configuration's start state."""
    streams = RngStreams(seed)
    vocab = vocab_size_for(configs)
    values = []
    for index, config in enumerate(configs):
        env = make_env(config, seed, vocab)
        rng = streams.generator("set_diversity", index)
        for _ in range(sets):
            signatures = []
            for _ in range(n):
                env.reset()
                signatures.append(run_episode(env, policy, rng).signature)
            values.append(diversity(signatures))
    return float(np.mean(values))


# ----------------------------------------------------------------------------
# Perturbation harness
# ----------------------------------------------------------------------------

@dataclass
class PerturbationSuite:
    config_index: int
    config: object
    rooms: list[int]
    starts: list = field(default_factory=list)
    start_rooms: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def build_perturbation_suite(pretrained_policy, config, temperature: float = 2.0, rollouts: int = 100,
                             per_room: int = 10, seed: int = 0, config_index: int = 0,
                             verbose: bool = False) -> PerturbationSuite:
    """Rooms reached by high-temperature rollouts, then up to per_room solvable random starts in each."""
    env = make_env(config, seed)
    if not isinstance(env, RoomsEnv):
        raise ValueError("Perturbation suites are defined for rooms environments")
    explorer = pretrained_policy.copy()
    explorer.temperature = temperature
    rng = RngStreams(seed).generator("perturb", config_index)
    rooms = set()
    for _ in range(rollouts):
        env.reset()
        rooms |= run_episode(env, explorer, rng).signature
    suite = PerturbationSuite(config_index, config, sorted(rooms))
    for room in suite.rooms:
        cells = env.free_cells(room)
        if not cells:
            suite.notes.append(f"room {room} has no free cell; skipped")
            continue
        chosen = 0
        for i in env.rng.permutation(len(cells)):
            if chosen == per_room:
                break
            start = env.set_start(cells[i], int(env.rng.integers(4)))
            if shortest_path_actions(env) is None:
                suite.notes.append(f"start {cells[i]} in room {room} is unsolvable; resampled")
                continue
            suite.starts.append(start)
            suite.start_rooms.append(room)
            chosen += 1
    if verbose:
        print(f"  Config {config_index}: {len(suite.rooms)} rooms, {len(suite.starts)} perturbed starts")
        for note in suite.notes:
            print(f"  ⚠️  {note}")
    return suite


def perturbation_eval(policy, suite: PerturbationSuite, seed: int = 0) -> float:
    """pass@1 from every perturbed start (one rollout each)."""
    if not suite.starts:
        return 0.0
    env = make_env(suite.config, seed)
    rng = RngStreams(seed).generator("perturb_eval", suite.config_index)
    wins = 0
    for start in suite.starts:
        env.restore(start)
        success, _ = _episode(env, policy, rng)
        wins += int(success)
    return wins / len(suite.starts)


# ----------------------------------------------------------------------------
# Persistence and aggregation
# ----------------------------------------------------------------------------

def emit_metrics(report: EvalReport, path: str | Path) -> Path:
    """JSONL records at `path` plus a flat curve table next to it (<stem>_curves.csv)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for record in report.to_records():
            f.write(json.dumps(record, sort_keys=True) + "\n")
    table_path = path.with_name(path.stem + "_curves.csv")
    curve_table(report).to_csv(table_path, index=False)
    return table_path


def read_metrics(path: str | Path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_records([json.loads(line) for line in f if line.strip()])


def aggregate_seeds(reports: list[EvalReport]) -> dict:
    """Per-config -> across-config (inside each report) -> across-seed means, plus per-seed values."""
    if not reports:
        raise ValueError("No reports to aggregate")
    out = {
        "seeds": len(reports),
        "success_rate": float(np.mean([r.success_rate for r in reports])),
        "mean_return": float(np.mean([r.mean_return for r in reports])),
        "per_seed_success_rate": [r.success_rate for r in reports],
    }
    for name in ("pass_at_k", "diff_at_k"):
        curves = [getattr(r, name) for r in reports if getattr(r, name)]
        if curves:
            ks = sorted(set.intersection(*(set(c) for c in curves)))
            out[name] = {k: float(np.mean([c[k] for c in curves])) for k in ks}
    for name in ("validity", "creativity"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            out[name] = float(np.mean(values))
    return out


# ----------------------------------------------------------------------------
# Method comparison
# ----------------------------------------------------------------------------

@dataclass
class Comparison:
    challenger: str
    baseline: str
    seeds: list[int]
    k: int
    pretrained: dict = field(default_factory=dict)
    per_seed: list[dict] = field(default_factory=list)
    wins: dict[str, int] = field(default_factory=dict)
    verdict: dict[str, bool] = field(default_factory=dict)
    over_pretrained: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


def method_metrics(policy, configs, rollouts: int = 64, k: int = 16, diff_k: int = 32, seed: int = 0) -> dict:
    """Success, pass@k and either set diversity (rooms) or diff@k / creativity / validity (triangle)."""
    report = evaluate_suite(policy, configs, rollouts, (k,), seed)
    metrics = {"success_rate": report.success_rate, "pass_at_k": report.pass_at_k[k]}
    if isinstance(configs[0], RoomsConfig):
        metrics["set_diversity"] = mean_set_diversity(policy, configs, seed=seed)
    else:
        creative = creativity_metrics(policy, configs, attempts=rollouts, k_grid=(diff_k,), seed=seed)
        metrics["diff_at_k"] = creative.diff_at_k.get(diff_k, 0.0)
        metrics["creativity"] = creative.creativity
        metrics["validity"] = creative.validity
    return {name: float(value) for name, value in metrics.items()}


def majority_verdict(per_seed: list[dict], challenger: str, baseline: str) -> tuple[dict, dict]:
    """Per metric: seeds where challenger >= baseline, and whether that is a strict majority."""
    metrics = list(per_seed[0][challenger])
    wins = {m: int(sum(bool(row[challenger][m] >= row[baseline][m]) for row in per_seed)) for m in metrics}
    verdict = {m: bool(wins[m] > len(per_seed) / 2) for m in metrics}
    return wins, verdict


def compare_methods(pretrained_policy, configs, base_config: TrainConfig, seeds, out_dir: str | Path,
                    rollouts: int = 64, k: int = 16, diff_k: int = 32, challenger: str = "poly_ppo",
                    baseline: str = "ppo", verbose: bool = True) -> Comparison:
    """Fine-tune both methods from the same pretrained policy per seed and compare them."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("At least one seed is needed for a comparison")
    out_dir = Path(out_dir)
    comparison = Comparison(challenger, baseline, seeds, k)
    comparison.pretrained = method_metrics(pretrained_policy, configs, rollouts, k, diff_k, seeds[0])
    if verbose:
        print("=" * 60)
        print(f"COMPARISON: {challenger} vs {baseline}, seeds {seeds}")
        print("=" * 60)
    for seed in seeds:
        row = {"seed": seed}
        for method in (challenger, baseline):
            config = base_config.with_overrides(method=method, seed=seed)
            run = train_run(config, configs, pretrained_policy.copy(), out_dir / f"{method}_seed{seed}",
                            verbose=False)
            row[method] = method_metrics(run.policy, configs, rollouts, k, diff_k, seed)
        comparison.per_seed.append(row)
        if verbose:
            print(f"  Seed {seed}: {challenger} success {row[challenger]['success_rate']:.2%}, "
                  f"{baseline} success {row[baseline]['success_rate']:.2%}")
    comparison.wins, comparison.verdict = majority_verdict(comparison.per_seed, challenger, baseline)
    anchor = "success_rate" if isinstance(configs[0], RoomsConfig) else "validity"
    comparison.over_pretrained = {
        anchor: int(sum(bool(row[challenger][anchor] >= comparison.pretrained[anchor]) for row in comparison.per_seed))
    }

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "comparison.json", "w") as f:
        json.dump(comparison.to_dict(), f, indent=2, sort_keys=True)
    if verbose:
        for metric, ahead in comparison.verdict.items():
            mark = "✓" if ahead else "⚠️ "
            print(f"{mark} {metric}: {challenger} >= {baseline} on {comparison.wins[metric]}/{len(seeds)} seeds")
        for metric, count in comparison.over_pretrained.items():
            print(f"  {metric}: {challenger} >= pretrained on {count}/{len(seeds)} seeds")
    return comparison
