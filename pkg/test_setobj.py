"""
Tests for diversity, f_poly, set formation and the factored-objective validator.
"""

import numpy as np

from rollout import Step, Trajectory, VineBatch
from setobj import (
    ConstantDiversity,
    DiversityFunction,
    SetObjective,
    SetSample,
    UnnormalizedReturnError,
    ValidationError,
    diversity,
    distinct_action_diversity,
    f_poly,
    form_sets,
    mean_return_factor,
    mean_return_objective,
    validate_polychromic,
)
from theorylab import Bandit


def vine(ret: float, rooms) -> Trajectory:
    traj = Trajectory(steps=[Step(0, np.array([0]), 0, ret, 0.0, 0.0)], origin="vine")
    traj.signature = frozenset(rooms)
    return traj


def batch_of(*vines) -> VineBatch:
    return VineBatch(rollout_state=None, vines=list(vines))


def test_diversity():
    assert diversity([{0}, {0}, {0}]) == 0.0
    assert diversity([{0}, {1}, {0, 1}, {0}]) == 0.75
    assert diversity([{0, 1}, {1, 0}]) == 0.0
    assert diversity([{0}]) == 0.0
    assert diversity([{0}, {1}]) == 1.0


def test_f_poly():
    batch = batch_of(vine(1.0, {0}), vine(0.5, {0, 1}), vine(0.0, {0}), vine(0.5, {1}))
    sample = SetSample(batch, (0, 1, 2, 3))
    assert abs(f_poly(sample, DiversityFunction()) - 0.5 * 0.75) < 1e-12
    same = SetSample(batch, (0, 2))
    assert f_poly(same, DiversityFunction()) == 0.0


def test_f_poly_rejects_unnormalized_returns():
    batch = batch_of(vine(1.5, {0}), vine(0.5, {1}))
    try:
        f_poly(SetSample(batch, (0, 1)), DiversityFunction())
    except UnnormalizedReturnError:
        pass
    else:
        raise AssertionError("return above 1 accepted")


def test_constant_diversity_reduces_to_mean_return():
    batch = batch_of(vine(1.0, {0}), vine(0.25, {0}), vine(0.5, {1}))
    sample = SetSample(batch, (0, 1, 2))
    poly = SetObjective("poly", ConstantDiversity(1.0))
    assert poly(sample) == mean_return_objective(sample)
    assert SetObjective("mean_return")(sample) == mean_return_objective(sample)


def test_form_sets():
    batch = batch_of(*[vine(0.5, {i}) for i in range(8)])
    sets = form_sets(batch, 4, 4, np.random.default_rng(0))
    again = form_sets(batch, 4, 4, np.random.default_rng(0))
    assert [s.members for s in sets] == [s.members for s in again]
    for s in sets:
        assert len(set(s.members)) == 4
        assert list(s.members) == sorted(s.members)


def test_form_sets_distinct_overflow():
    batch = batch_of(*[vine(0.5, {i}) for i in range(3)])
    notes = []
    sets = form_sets(batch, 2, 5, np.random.default_rng(0), distinct=True, notes=notes)
    assert len(sets) == 5
    assert notes and "exceeds" in notes[0]


def test_validator_on_small_bandit():
    bandit = Bandit.from_probs([0.5, 0.3, 0.2], [1.0, 0.0, 0.0], 3)
    report = validate_polychromic(mean_return_factor, distinct_action_diversity, bandit, 3)
    assert report.return_condition
    assert report.diversity_condition
    assert report.range_condition
    assert report.passed
    assert abs(sum(report.per_outcome_covariance.values())) < 1e-12
    assert not report.literal_outcome_condition
    assert report.notes


def test_validator_limits():
    bandit = Bandit.from_probs([0.1] * 10, [1.0] + [0.0] * 9, 2)
    try:
        validate_polychromic(mean_return_factor, distinct_action_diversity, bandit, 2)
    except ValidationError:
        pass
    else:
        raise AssertionError("enumeration over 10 actions accepted")
    small = Bandit.from_probs([0.5, 0.5], [1.0, 0.0], 2)
    try:
        validate_polychromic(mean_return_factor, distinct_action_diversity, small, 2, mode="sample", samples=10)
    except ValidationError:
        pass
    else:
        raise AssertionError("10 samples accepted")


def test_sampled_validator_agrees_with_enumeration():
    bandit = Bandit.from_probs([0.5, 0.3, 0.2], [1.0, 0.0, 0.0], 3)
    report = validate_polychromic(mean_return_factor, distinct_action_diversity, bandit, 3,
                                  mode="sample", samples=20000, rng=np.random.default_rng(0))
    assert report.passed


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Set objective tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)
