"""
Tests for pass@k, suite evaluation, triangle creativity metrics and the perturbation harness.
"""

import tempfile
from itertools import combinations
from pathlib import Path

import pandas as pd

from env import FORWARD, ExpertPolicy, load_graph_suite, load_rooms_suite
from evaluate import (
    ConfigResult,
    EvalReport,
    InconsistentReportError,
    PassAtKError,
    aggregate_seeds,
    build_perturbation_suite,
    creativity_metrics,
    emit_metrics,
    majority_verdict,
    evaluate_suite,
    mean_set_diversity,
    pass_at_k,
    perturbation_eval,
    read_metrics,
)
from metrics_store import CURVE_COLUMNS
from policy import make_tabular_policy

CONFIGS = Path(__file__).parent / "configs"


class FixedTokens:
    """Emits a fixed token sequence per graph id."""

    def __init__(self, per_graph):
        self.per_graph = per_graph

    def sample_action(self, obs, rng):
        return self.per_graph[int(obs[0])][int(obs[1])], 0.0


class CyclingTokens:
    """Cycles through a list of token sequences per graph id, one sequence per episode."""

    def __init__(self, per_graph):
        self.per_graph = per_graph
        self.episodes = {graph: 0 for graph in per_graph}
        self.current = {}

    def sample_action(self, obs, rng):
        graph, position = int(obs[0]), int(obs[1])
        if position == 0:
            sequences = self.per_graph[graph]
            self.current[graph] = sequences[self.episodes[graph] % len(sequences)]
            self.episodes[graph] += 1
        return self.current[graph][position], 0.0


class ForwardPolicy:
    def sample_action(self, obs, rng):
        return FORWARD, 0.0


def brute_pass_at_k(successes: int, rollouts: int, k: int) -> float:
    outcomes = [1] * successes + [0] * (rollouts - successes)
    subsets = list(combinations(range(rollouts), k))
    return sum(any(outcomes[i] for i in s) for s in subsets) / len(subsets)


def test_pass_at_k_values():
    assert abs(pass_at_k(5, 10, 2) - 7 / 9) < 1e-12
    assert pass_at_k(0, 10, 3) == 0.0
    assert pass_at_k(10, 10, 1) == 1.0
    assert pass_at_k(8, 10, 3) == 1.0
    assert abs(pass_at_k(3, 10, 1) - 0.3) < 1e-12


def test_pass_at_k_matches_brute_force():
    for R in range(1, 8):
        for s in range(R + 1):
            previous = 0.0
            for k in range(1, R + 1):
                value = pass_at_k(s, R, k)
                assert abs(value - brute_pass_at_k(s, R, k)) < 1e-12
                assert value >= previous - 1e-12
                previous = value


def test_pass_at_k_errors():
    for args in ((2, 4, 5), (5, 4, 1), (1, 4, 0)):
        try:
            pass_at_k(*args)
        except PassAtKError:
            continue
        raise AssertionError(f"pass_at_k{args} accepted")
    try:
        evaluate_suite(ExpertPolicy(), load_rooms_suite(CONFIGS / "tiny_rooms.json"), rollouts=4, k_grid=(1, 8))
    except PassAtKError:
        pass
    else:
        raise AssertionError("k above R accepted")


def test_expert_solves_every_configuration():
    configs = load_rooms_suite(CONFIGS / "two_rooms.json")
    report = evaluate_suite(ExpertPolicy(), configs, rollouts=4, k_grid=(1, 2, 4))
    assert len(report.per_config) == len(configs)
    assert report.success_rate == 1.0
    assert report.pass_at_k == {1: 1.0, 2: 1.0, 4: 1.0}
    tiny = evaluate_suite(ExpertPolicy(), load_rooms_suite(CONFIGS / "tiny_rooms.json"), rollouts=2, k_grid=(1,))
    assert abs(tiny.mean_return - (1 - 0.5 * 3 / 20)) < 1e-12


def test_seeded_evaluation_repeats():
    configs = load_rooms_suite(CONFIGS / "tiny_rooms.json")
    policy = make_tabular_policy([], 7)
    a = evaluate_suite(policy, configs, rollouts=8, k_grid=(1, 4), seed=3)
    b = evaluate_suite(policy, configs, rollouts=8, k_grid=(1, 4), seed=3)
    assert a.per_config == b.per_config
    assert a.pass_at_k == b.pass_at_k


def test_creativity_for_seen_triangles():
    graphs = load_graph_suite(CONFIGS / "graphs.json")
    policy = FixedTokens({0: [0, 1, 2], 1: [0, 2, 3]})
    report = creativity_metrics(policy, graphs, attempts=8, k_grid=(1, 2, 4), resamples=50)
    assert report.validity == 1.0
    assert report.diversity == 2
    assert report.creativity == 0.0
    assert report.diff_at_k == {1: 1.0, 2: 1.0, 4: 1.0}
    assert report.validity_pass_at_k == {1: 1.0, 2: 1.0, 4: 1.0}
    assert report.creativity_pass_at_k == {1: 0.0, 2: 0.0, 4: 0.0}


def test_creativity_for_unseen_triangles():
    graphs = load_graph_suite(CONFIGS / "graphs.json")
    policy = FixedTokens({0: [4, 3, 2], 1: [5, 3, 4]})
    report = creativity_metrics(policy, graphs, attempts=4, k_grid=(1, 2), resamples=20)
    assert report.validity == 1.0
    # one unique unseen triangle per graph over 8 generations
    assert report.diversity == 2 and report.attempts == 8
    assert report.creativity == 2 / 8
    assert report.creativity_pass_at_k == {1: 1.0, 2: 1.0}


def test_creativity_mixed_generations():
    graphs = load_graph_suite(CONFIGS / "graphs.json")
    policy = CyclingTokens({
        0: [[0, 1, 2], [2, 3, 4], [4, 3, 2], [0, 0, 0]],  # seen, unseen, unseen repeat, invalid
        1: [[0, 2, 3], [3, 4, 5], [0, 1, 2], [1, 4, 5]],  # seen, unseen, unseen, invalid
    })
    report = creativity_metrics(policy, graphs, attempts=4, k_grid=(1, 4), resamples=20)
    assert report.validity == 6 / 8
    assert report.diversity == 5
    assert report.creativity == 3 / 8
    assert report.creativity <= report.validity
    assert report.validity_pass_at_k == {1: 0.75, 4: 1.0}
    assert report.creativity_pass_at_k == {1: 0.5, 4: 1.0}
    # every 4-subset is the whole set of attempts: 2 and 3 unique valid triangles
    assert report.diff_at_k[4] == 2.5


def test_invalid_sequences_score_zero():
    graphs = load_graph_suite(CONFIGS / "graphs.json")
    policy = FixedTokens({0: [0, 0, 0], 1: [1, 4, 5]})
    report = creativity_metrics(policy, graphs, attempts=4, k_grid=(1, 2, 64), resamples=20)
    assert report.validity == 0.0 and report.diversity == 0 and report.creativity == 0.0
    # k above the attempt count is dropped from the grid
    assert report.diff_at_k == {1: 0.0, 2: 0.0}


def test_mean_set_diversity_of_deterministic_policy():
    configs = load_rooms_suite(CONFIGS / "tiny_rooms.json")
    assert mean_set_diversity(ForwardPolicy(), configs, n=4, sets=3) == 0.0


def test_perturbation_suite():
    config = load_rooms_suite(CONFIGS / "tiny_rooms.json")[0]
    uniform = make_tabular_policy([], 7)
    suite = build_perturbation_suite(uniform, config, rollouts=20, per_room=3, seed=1)
    again = build_perturbation_suite(uniform, config, rollouts=20, per_room=3, seed=1)
    assert 0 in suite.rooms
    assert suite.rooms == again.rooms
    assert [s.to_bytes() for s in suite.starts] == [s.to_bytes() for s in again.starts]
    assert suite.start_rooms.count(0) == 3
    assert perturbation_eval(ExpertPolicy(), suite, seed=1) == 1.0


def test_inconsistent_reports_rejected():
    bad = (
        {"pass_at_k": {1: 0.6, 2: 0.4}},
        {"pass_at_k": {1: 1.2}},
        {"validity": 0.2, "creativity": 0.5},
        {"diversity": 9, "attempts": 8},
        {"validity_pass_at_k": {1: 0.2}, "creativity_pass_at_k": {1: 0.4}},
    )
    for fields in bad:
        try:
            EvalReport(**fields)
        except InconsistentReportError:
            continue
        raise AssertionError(f"report {fields} accepted")
    report = EvalReport(validity=0.5, creativity=0.25, diversity=3, attempts=8)
    report.creativity = 0.75
    try:
        report.check()
    except InconsistentReportError:
        pass
    else:
        raise AssertionError("creativity above validity accepted")


def test_majority_verdict():
    per_seed = [
        {"seed": 0, "poly_ppo": {"success_rate": 0.5, "pass_at_k": 0.9}, "ppo": {"success_rate": 0.6, "pass_at_k": 0.8}},
        {"seed": 1, "poly_ppo": {"success_rate": 0.7, "pass_at_k": 0.9}, "ppo": {"success_rate": 0.7, "pass_at_k": 0.7}},
        {"seed": 2, "poly_ppo": {"success_rate": 0.4, "pass_at_k": 0.6}, "ppo": {"success_rate": 0.5, "pass_at_k": 0.8}},
    ]
    wins, verdict = majority_verdict(per_seed, "poly_ppo", "ppo")
    assert wins == {"success_rate": 1, "pass_at_k": 2}
    assert verdict == {"success_rate": False, "pass_at_k": True}
    # one seed out of two is not a majority
    wins, verdict = majority_verdict(per_seed[:2], "poly_ppo", "ppo")
    assert wins == {"success_rate": 1, "pass_at_k": 2}
    assert verdict == {"success_rate": False, "pass_at_k": True}


def test_metrics_round_trip():
    report = EvalReport(
        per_config=[ConfigResult(0, 3, 4, 0.5), ConfigResult(1, 1, 4, 0.2)],
        k_grid=(1, 2),
        pass_at_k={1: 0.5, 2: 0.75},
        label="poly_seed0",
    )
    with tempfile.TemporaryDirectory() as tmp:
        table_path = emit_metrics(report, Path(tmp) / "eval.jsonl")
        loaded = read_metrics(Path(tmp) / "eval.jsonl")
        assert loaded.per_config == report.per_config
        assert loaded.pass_at_k == report.pass_at_k
        assert loaded.label == "poly_seed0"
        table = pd.read_csv(table_path)
        assert list(table.columns) == CURVE_COLUMNS
        assert table["metric"].tolist() == ["pass_at_k", "pass_at_k"]


def test_aggregate_seeds():
    first = EvalReport(per_config=[ConfigResult(0, 4, 4, 1.0), ConfigResult(1, 0, 4, 0.0)], pass_at_k={1: 0.5})
    second = EvalReport(per_config=[ConfigResult(0, 2, 4, 0.5), ConfigResult(1, 2, 4, 0.5)], pass_at_k={1: 0.5})
    out = aggregate_seeds([first, second])
    assert out["seeds"] == 2
    assert out["per_seed_success_rate"] == [0.5, 0.5]
    assert out["success_rate"] == 0.5
    assert out["pass_at_k"] == {1: 0.5}
    assert "validity" not in out
    try:
        aggregate_seeds([])
    except ValueError:
        pass
    else:
        raise AssertionError("empty aggregation accepted")


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Evaluation tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)
