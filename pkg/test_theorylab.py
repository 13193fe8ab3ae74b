"""
Tests for the exact-enumeration theory checks on tree MDPs and bandits.
"""

import numpy as np
from scipy.special import softmax

from theorylab import (
    Bandit,
    TermCountError,
    TreeMDP,
    classical_perf_diff,
    entropy_delta_approx,
    entropy_delta_exact,
    heterogeneous_bandit,
    heterogeneous_bound,
    poly_set_objective,
    q_decomposition_gap,
    random_policy,
    run_theory_suite,
    set_logit_gradient,
    set_q_value,
    set_value,
    set_visitation,
    verify_perf_diff,
    verify_homogeneous_scaffold,
    verify_heterogeneous_scaffold,
    verify_heterogeneous_scaffold_grid,
    verify_validator,
)


def random_tree(seed: int) -> tuple[TreeMDP, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    tree = TreeMDP.random(rng, n_states=10, n_actions=3, layers=4)
    return tree, random_policy(rng, 10, 3), random_policy(rng, 10, 3)


def test_tree_construction():
    tree, _, _ = random_tree(0)
    assert tree.terminal[-1] and tree.terminal.sum() == 1
    assert np.all(tree.transitions[-1] == 9)
    assert np.all(tree.rewards[-1] == 0.0)
    try:
        TreeMDP(tree.transitions, tree.terminal, tree.rewards, n=4, gamma=0.3)
    except ValueError:
        pass
    else:
        raise AssertionError("gamma * n >= 1 accepted")


def test_set_performance_difference_is_exact():
    for seed in range(5):
        tree, theta, beta = random_tree(seed)
        f = poly_set_objective(tree.rewards)
        result = verify_perf_diff(tree, theta, beta, f)
        assert result.abs_diff < 1e-9, result
        assert result.passed
        same = verify_perf_diff(tree, beta, beta, f)
        assert abs(same.lhs) < 1e-12 and abs(same.rhs) < 1e-12


def test_classical_performance_difference():
    tree, theta, beta = random_tree(3)
    lhs, rhs = classical_perf_diff(tree, theta, beta)
    assert abs(lhs - rhs) < 1e-9


def test_q_decomposition():
    for seed in range(3):
        tree, _, beta = random_tree(seed)
        assert q_decomposition_gap(tree, beta, poly_set_objective(tree.rewards)) < 1e-12


def test_set_value_averages_q_values():
    tree, theta, _ = random_tree(1)
    f = poly_set_objective(tree.rewards)
    tuples = [(a, b) for a in range(3) for b in range(3)]
    weighted = sum(theta[0, a] * theta[0, b] * set_q_value(tree, theta, f, (a, b), depth=3)
                   for a, b in tuples)
    assert abs(weighted - set_value(tree, theta, f, depth=3)) < 1e-12


def test_set_visitation_mass():
    tree, theta, _ = random_tree(2)
    visitation = set_visitation(tree, theta, depth=40)
    # full mass up to the truncated geometric tail
    assert abs(visitation.sum() - 1.0) < 1e-6
    assert np.all(visitation >= 0)


def test_set_logit_gradient():
    bandit = Bandit.from_probs([0.6, 0.3, 0.1], [1.0, 0.0, 0.0], 2)
    f = bandit.poly_objective()
    grad = set_logit_gradient(bandit, f)
    assert abs(grad.sum()) < 1e-12

    def expected_f(logits):
        probs = softmax(logits)
        return sum(probs[a] * probs[b] * f((a, b)) for a in range(3) for b in range(3))

    h = 1e-6
    for a in range(3):
        bump = np.zeros(3)
        bump[a] = h
        numeric = (expected_f(bandit.logits + bump) - expected_f(bandit.logits - bump)) / (2 * h)
        assert abs(numeric - grad[a]) < 1e-7


def test_entropy_delta_is_first_order_accurate():
    bandit = Bandit.from_probs([0.6, 0.3, 0.1], [1.0, 0.0, 0.0], 2)
    f = bandit.poly_objective()
    errors = [abs(entropy_delta_exact(bandit, f, a) - entropy_delta_approx(bandit, f, a)) for a in (1e-2, 5e-3)]
    assert 3.0 <= errors[0] / errors[1] <= 5.0
    small = 1e-4
    assert np.sign(entropy_delta_exact(bandit, f, small)) == np.sign(entropy_delta_approx(bandit, f, small))


def test_homogeneous_scaffold():
    report = verify_homogeneous_scaffold()
    assert report.passed
    negatives = [row for row in report.rows if row["negative_required"]]
    assert negatives and all(row["scaffold"] < 0 for row in negatives)


def test_heterogeneous_scaffold():
    row = verify_heterogeneous_scaffold(1, 0.2, 3)
    assert row["passed"] is True
    assert row["scaffold"] > row["bound"]
    assert verify_heterogeneous_scaffold(0, 0.2, 3)["passed"] is None
    try:
        heterogeneous_bandit(1, 0.4, 3)
    except ValueError:
        pass
    else:
        raise AssertionError("p >= 1/n accepted")


def test_heterogeneous_bound_grows_with_successes():
    for p in (0.1, 0.2):
        for n in (2, 3):
            bounds = [heterogeneous_bound(q, p, n) for q in range(n + 1)]
            assert bounds[0] == 0.0
            assert all(b > a for a, b in zip(bounds, bounds[1:]))
    report = verify_heterogeneous_scaffold_grid()
    for p in (0.1, 0.2):
        for n in (2, 3):
            rows = sorted((r for r in report.rows if r["p"] == p and r["n"] == n), key=lambda r: r["q"])
            assert [r["q"] for r in rows] == [1, 2]
            assert rows[0]["bound"] < rows[1]["bound"]


def test_validator_check():
    report = verify_validator()
    assert report.passed
    assert report.rows and report.notes


def test_enumeration_limit():
    bandit = Bandit(np.zeros(10), np.zeros(10), 4)
    try:
        set_logit_gradient(bandit, bandit.poly_objective())
    except TermCountError as e:
        assert "too many" in str(e)
    else:
        raise AssertionError("10^4 action sets enumerated")


def test_theory_suite_report():
    report = run_theory_suite(seed=0, verbose=False)
    names = [c["name"] for c in report["checks"]]
    assert names == [
        "set_performance_difference",
        "set_q_decomposition",
        "entropy_dynamics",
        "homogeneous_scaffold",
        "heterogeneous_scaffold",
        "polychromic_validator",
    ]
    checks = {c["name"]: c for c in report["checks"]}
    assert checks["set_performance_difference"]["passed"]
    assert checks["set_q_decomposition"]["passed"]
    assert len(checks["set_performance_difference"]["rows"]) == 20
    assert all(0 < row["visitation_mass"] <= 1 + 1e-12 for row in checks["set_performance_difference"]["rows"])


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Theory tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)
