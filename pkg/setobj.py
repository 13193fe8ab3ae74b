"""
Set-level objectives.

f_poly(s, tau_1..n) = mean return x diversity, where diversity is the fraction
of distinct trajectory signatures and 0 when every signature is the same.
Also: the mean-return objective, seeded set formation and a validator for
the factored ("polychromic") objective conditions on finite bandits.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

RETURN_TOLERANCE = 1e-12


class UnnormalizedReturnError(ValueError):
    """A set member's return falls outside [0, 1]."""


class ValidationError(ValueError):
    """The objective validator was asked for an uncertifiable run."""


def diversity(signatures) -> float:
    """0 if all signatures are identical, otherwise (#distinct) / n."""
    signatures = [frozenset(s) if isinstance(s, (set, frozenset, list, tuple)) else s for s in signatures]
    n = len(signatures)
    if n == 0:
        raise ValueError("diversity of an empty set is undefined")
    distinct = len(set(signatures))
    if distinct == 1:
        return 0.0
    return distinct / n


class DiversityFunction:
    """Diversity of a set of trajectories via a signature extractor."""

    def __init__(self, kind: str = "room_set", extractor=None):
        if kind not in ("room_set", "node_set", "custom"):
            raise ValueError(f"Unknown diversity kind '{kind}'")
        self.kind = kind
        self.extractor = extractor or (lambda traj: traj.signature)

    def __call__(self, trajectories) -> float:
        return diversity([self.extractor(t) for t in trajectories])


class ConstantDiversity(DiversityFunction):
    def __init__(self, value: float = 1.0):
        super().__init__("custom")
        self.value = value

    def __call__(self, trajectories) -> float:
        return self.value


def diversity_for_env(env_kind: str) -> DiversityFunction:
    return DiversityFunction("room_set" if env_kind == "rooms" else "node_set")


@dataclass(frozen=True)
class SetSample:
    batch: object
    members: tuple[int, ...]

    @property
    def trajectories(self):
        return [self.batch.vines[i] for i in self.members]

    @property
    def returns(self) -> list[float]:
        return [t.ret for t in self.trajectories]


def _checked_returns(returns) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    bad = (returns < -RETURN_TOLERANCE) | (returns > 1 + RETURN_TOLERANCE)
    if np.any(bad):
        raise UnnormalizedReturnError(f"Set returns must lie in [0, 1], got {returns[bad].tolist()}")
    return returns


def f_poly(set_sample: SetSample, diversity_fn: DiversityFunction) -> float:
    returns = _checked_returns(set_sample.returns)
    return float(np.mean(returns)) * diversity_fn(set_sample.trajectories)


def mean_return_objective(set_sample: SetSample, diversity_fn=None) -> float:
    return float(np.mean(set_sample.returns))


@dataclass
class SetObjective:
    """Named set objective: `poly` (f_poly) or `mean_return`."""

    name: str
    diversity_fn: DiversityFunction | None = None

    def __call__(self, set_sample: SetSample) -> float:
        if self.name == "poly":
            return f_poly(set_sample, self.diversity_fn)
        if self.name == "mean_return":
            return mean_return_objective(set_sample)
        raise ValueError(f"Unknown set objective '{self.name}'")


def form_sets(batch, n: int, M: int, rng: np.random.Generator, distinct: bool = False,
              notes: list | None = None) -> list[SetSample]:
    """M sets of n distinct vine indices each; sets may overlap one another."""
    N = len(batch.vines)
    if N < n:
        raise ValueError(f"Cannot form sets of {n} from {N} vines")
    if M < 2:
        raise ValueError("At least two sets are needed for the Monte Carlo baseline")
    if N == n:
        return [SetSample(batch, tuple(range(N))) for _ in range(M)]

    if distinct and M > comb(N, n, exact=True):
        if notes is not None:
            notes.append(f"M={M} exceeds C({N},{n}); sets may repeat")
        distinct = False

    sets, seen = [], set()
    while len(sets) < M:
        members = tuple(sorted(int(i) for i in rng.choice(N, size=n, replace=False)))
        if distinct and members in seen:
            continue
        seen.add(members)
        sets.append(SetSample(batch, members))
    return sets


# ----------------------------------------------------------------------------
# Factored objective validator (bandit instances)
# ----------------------------------------------------------------------------

def mean_return_factor(actions, returns) -> float:
    return float(np.mean(returns))


def distinct_action_diversity(actions, returns) -> float:
    return diversity(list(actions))


@dataclass
class PolychromicReport:
    mode: str
    n: int
    return_covariance: float
    per_outcome_covariance: dict = field(default_factory=dict)
    homogeneity_covariance: float = 0.0
    range_R: tuple[float, float] = (0.0, 0.0)
    range_d: tuple[float, float] = (0.0, 0.0)
    tolerance: float = 1e-9
    notes: list[str] = field(default_factory=list)

    @property
    def return_condition(self) -> bool:
        return self.return_covariance > 0

    @property
    def literal_outcome_condition(self) -> bool:
        """Every per-outcome covariance negative (reported for information)."""
        return all(c < 0 for c in self.per_outcome_covariance.values())

    @property
    def min_negated_outcome_covariance(self) -> float:
        return min(-c for c in self.per_outcome_covariance.values())

    @property
    def diversity_condition(self) -> bool:
        return self.homogeneity_covariance < 0

    @property
    def range_condition(self) -> bool:
        return (abs(self.range_R[0] - self.range_d[0]) <= self.tolerance
                and abs(self.range_R[1] - self.range_d[1]) <= self.tolerance)

    @property
    def passed(self) -> bool:
        return self.return_condition and self.diversity_condition and self.range_condition

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n,
            "return_covariance": self.return_covariance,
            "return_condition": self.return_condition,
            "per_outcome_covariance": {str(k): v for k, v in self.per_outcome_covariance.items()},
            "min_negated_outcome_covariance": self.min_negated_outcome_covariance,
            "literal_outcome_condition": self.literal_outcome_condition,
            "homogeneity_covariance": self.homogeneity_covariance,
            "diversity_condition": self.diversity_condition,
            "range_R": list(self.range_R),
            "range_d": list(self.range_d),
            "range_condition": self.range_condition,
            "passed": self.passed,
            "notes": self.notes,
        }


def _weighted_cov(x, y, w) -> float:
    mx, my = np.dot(w, x), np.dot(w, y)
    return float(np.dot(w, (x - mx) * (y - my)))


def validate_polychromic(phi_R, phi_d, bandit, n: int, mode: str = "enumerate",
                         samples: int = 0, rng: np.random.Generator | None = None) -> PolychromicReport:
    """Check the factored-objective conditions for phi = phi_R * phi_d on a bandit.

    `bandit` needs `probs` and `rewards` arrays; phi_* take (actions, returns).
    Condition 2 is certified through the covariance of phi_d with the largest
    multiplicity in the sampled set; the per-outcome covariances with
    sum_i 1{a_i = a} are reported alongside (they always sum to zero).
    """
    probs = np.asarray(bandit.probs, dtype=np.float64)
    rewards = np.asarray(bandit.rewards, dtype=np.float64)
    n_actions = len(probs)
    all_tuples = list(itertools.product(range(n_actions), repeat=n))

    if mode == "enumerate":
        if n_actions > 8 or n > 4:
            raise ValidationError(f"Exact enumeration needs |A| <= 8 and n <= 4 (got {n_actions}, {n})")
        tuples = all_tuples
        weights = np.array([np.prod(probs[list(t)]) for t in tuples])
    elif mode == "sample":
        if samples < 1000:
            raise ValidationError(f"Sample mode needs at least 1000 samples to certify signs (got {samples})")
        rng = rng or np.random.default_rng(0)
        tuples = [tuple(row) for row in rng.choice(n_actions, size=(samples, n), p=probs)]
        weights = np.full(samples, 1.0 / samples)
    else:
        raise ValueError(f"Unknown validation mode '{mode}'")

    R_vals = np.array([phi_R(t, rewards[list(t)]) for t in tuples])
    d_vals = np.array([phi_d(t, rewards[list(t)]) for t in tuples])
    total_return = np.array([rewards[list(t)].sum() for t in tuples])
    max_mult = np.array([np.bincount(t, minlength=n_actions).max() for t in tuples])

    report = PolychromicReport(mode, n, _weighted_cov(R_vals, total_return, weights))
    for a in range(n_actions):
        counts = np.array([t.count(a) for t in tuples])
        report.per_outcome_covariance[a] = _weighted_cov(d_vals, counts, weights)
    report.homogeneity_covariance = _weighted_cov(d_vals, max_mult, weights)

    # ranges are taken over every set, not only the ones the policy reaches
    R_all = np.array([phi_R(t, rewards[list(t)]) for t in all_tuples])
    d_all = np.array([phi_d(t, rewards[list(t)]) for t in all_tuples])
    report.range_R = (float(R_all.min()), float(R_all.max()))
    report.range_d = (float(d_all.min()), float(d_all.max()))
    if not report.literal_outcome_condition:
        report.notes.append("per-outcome covariances sum to zero, so not all can be negative")
    return report
