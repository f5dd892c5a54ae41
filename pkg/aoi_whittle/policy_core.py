"""Closed-form Whittle index mathematics and threshold-policy chain primitives.

A user of class k with success probability p follows, under a threshold policy
with threshold n, a birth-with-reset chain on ages 1, 2, ...: ages below n stay
idle and grow by one, ages at or above n transmit and reset to 1 with
probability p. Everything else in the package is built on the stationary
quantities of that chain and on the index W(i) = (i-1) p i / 2 + i.
"""

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from aoi_whittle.errors import ConvergenceError, InvalidParameterError

# Normalization tolerance for population shares
SHARE_TOL = 1e-12

# Default truncation keeps the analytic tail below this mass
TAIL_TOL = 1e-14


class ClassSpec(BaseModel):
    """One user class: channel success probability and population share."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    p: float = Field(gt=0.0, le=1.0, description="Decoding success probability")
    gamma: float = Field(gt=0.0, le=1.0, description="Share of the population in this class")


class SystemConfig(BaseModel):
    """User classes plus the per-slot scheduling budget alpha = M / N."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    classes: tuple[ClassSpec, ...] = Field(min_length=1)
    alpha: float = Field(gt=0.0, lt=1.0, description="Fraction of users scheduled per slot")

    @field_validator("classes")
    @classmethod
    def shares_sum_to_one(cls, v):
        total = math.fsum(c.gamma for c in v)
        if abs(total - 1.0) > SHARE_TOL:
            raise ValueError(f"class shares sum to {total!r}, expected 1")
        return v

    @model_validator(mode="after")
    def two_class_order(self):
        if len(self.classes) == 2 and not self.classes[0].p > self.classes[1].p:
            raise ValueError("two-class configs need p_1 > p_2 (class 1 is the better channel)")
        return self

    @property
    def k(self) -> int:
        return len(self.classes)

    @property
    def ps(self) -> tuple[float, ...]:
        return tuple(c.p for c in self.classes)

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(c.gamma for c in self.classes)


def _check_age(i) -> int:
    if isinstance(i, bool) or int(i) != i or i < 1:
        raise InvalidParameterError(f"age must be an integer >= 1, got {i!r}")
    return int(i)


def _check_probability(p: float, allow_zero: bool = False) -> float:
    if not (0.0 <= p <= 1.0) or (p == 0.0 and not allow_zero):
        bound = "[0, 1]" if allow_zero else "(0, 1]"
        raise InvalidParameterError(f"success probability must lie in {bound}, got {p!r}")
    return float(p)


def whittle_index(p: float, i: int) -> float:
    """Whittle index of age i for a class with success probability p."""
    p = _check_probability(p, allow_zero=True)
    i = _check_age(i)
    return (i - 1) * p * i / 2 + i


def whittle_indices(p: float | np.ndarray, ages: np.ndarray) -> np.ndarray:
    """Vectorized whittle_index; p may be a scalar or an array matching ages."""
    ages = np.asarray(ages, dtype=np.float64)
    return (ages - 1) * p * ages / 2 + ages


def index_key(w):
    """Index value rounded so that analytically equal indices compare equal."""
    return np.round(w, 12)


def priority_order(index, p, age, class_idx, user_id=None) -> np.ndarray:
    """Positions sorted from highest to lowest scheduling priority.

    Higher index first; at equal index the larger p, then the lower age, then
    the lower class position (then the lower user id) goes first.
    """
    keys = [np.asarray(class_idx), np.asarray(age), -np.asarray(p, dtype=np.float64),
            -index_key(np.asarray(index, dtype=np.float64))]
    if user_id is not None:
        keys.insert(0, np.asarray(user_id))
    return np.lexsort(keys)


def active_fraction(p: float, n: int) -> float:
    """Long-run fraction of slots a threshold-n user transmits: 1 / (np + 1 - p)."""
    p = _check_probability(p)
    n = _check_age(n)
    return 1.0 / (n * p + 1 - p)


def threshold_average_cost(p: float, n: int, lam: float) -> float:
    """Average age plus lam times the transmission rate under threshold n."""
    p = _check_probability(p)
    n = _check_age(n)
    if lam < 0:
        raise InvalidParameterError(f"lambda must be non-negative, got {lam!r}")
    m = n - 1
    age_term = ((m * m + m) * p * p + 2 * p * m + 2) / (2 * p * (m * p + 1))
    return age_term + lam / (n * p + 1 - p)


def default_max_state(p: float, n: int) -> int:
    """Smallest truncation point whose geometric remainder weight is below TAIL_TOL."""
    if p >= 1.0:
        return n
    steps = math.ceil(math.log(TAIL_TOL) / math.log1p(-p))
    return n + max(steps, 1)


@dataclass(frozen=True)
class ThresholdDistribution:
    """Stationary age distribution under threshold n, stored up to max_state.

    probs[i - 1] holds u(i) for 1 <= i <= max_state. The mass and first moment
    beyond max_state are kept in closed form.
    """
    p: float
    n: int
    probs: np.ndarray
    tail_mass: float
    tail_moment: float

    @property
    def max_state(self) -> int:
        return len(self.probs)

    def total_mass(self) -> float:
        return math.fsum(self.probs) + self.tail_mass

    def active_mass(self) -> float:
        return math.fsum(self.probs[self.n - 1:]) + self.tail_mass

    def mean_age(self) -> float:
        ages = np.arange(1, self.max_state + 1)
        return math.fsum(ages * self.probs) + self.tail_moment

    def as_vector(self, fold_tail: bool = True) -> np.ndarray:
        """Truncated vector; with fold_tail the remainder is added to the last state."""
        vec = self.probs.copy()
        if fold_tail:
            vec[-1] += self.tail_mass
        return vec


def stationary_distribution(p: float, n: int, max_state: int | None = None) -> ThresholdDistribution:
    """Closed-form stationary distribution of the threshold-n chain."""
    p = _check_probability(p)
    n = _check_age(n)
    if max_state is None:
        max_state = default_max_state(p, n)
    if max_state < n:
        raise InvalidParameterError(f"max_state {max_state} is below threshold {n}")

    head = p / (n * p + 1 - p)
    r = 1.0 - p
    probs = np.full(max_state, head)
    if max_state > n:
        probs[n:] = head * r ** np.arange(1, max_state - n + 1)

    if p >= 1.0:
        return ThresholdDistribution(p, n, probs, 0.0, 0.0)

    # sum_{i > M} r^(i-n) and sum_{i > M} i r^(i-n), M = max_state
    lead = r ** (max_state - n + 1)
    tail_mass = head * lead / p
    tail_moment = head * lead * ((max_state + 1) / p + r / (p * p))
    return ThresholdDistribution(p, n, probs, tail_mass, tail_moment)


def dtmc_stationary_oracle(
    p: float,
    n: int,
    max_state: int,
    tol: float = 1e-14,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Power iteration on the truncated threshold chain.

    Ages at or above max_state are lumped into the last state, which is exact
    because they all transmit. The lazy chain (I + P) / 2 is iterated so that
    the deterministic cycle at p = 1 still converges.
    """
    p = _check_probability(p)
    n = _check_age(n)
    if max_state < n:
        raise InvalidParameterError(f"max_state {max_state} is below threshold {n}")

    pi = np.full(max_state, 1.0 / max_state)
    for _ in range(max_iter):
        step = np.zeros(max_state)
        # idle ages 1..n-1 move up deterministically
        step[1:n] += pi[: n - 1]
        active = pi[n - 1:]
        step[0] += p * active.sum()
        grown = (1 - p) * active
        step[n:] += grown[:-1]
        step[-1] += grown[-1]
        nxt = 0.5 * (pi + step)
        if np.abs(nxt - pi).sum() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps (p={p}, n={n})")
