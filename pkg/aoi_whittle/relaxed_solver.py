"""Optimal solution of the time-averaged (relaxed) scheduling problem.

The optimum is a mixture of two adjacent threshold vectors. It is found by
walking the merged Whittle index sequence of all classes from the bottom,
idling one (class, age) state at a time until the aggregate transmission rate
drops to the budget.
"""

import heapq
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from aoi_whittle.errors import InvalidParameterError
from aoi_whittle.policy_core import (
    SystemConfig,
    active_fraction,
    default_max_state,
    index_key,
    stationary_distribution,
    whittle_index,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelaxedSolution:
    """Mixed-threshold optimum of the relaxed problem.

    Users of class k run threshold l1[k] with probability theta and l2[k]
    otherwise. The two vectors differ only at critical_class, where
    l1 = l2 + 1. z_star[k][i - 1] is the stationary share of the whole
    population sitting in class k at age i; z_tail[k] is the share beyond the
    stored vector.
    """
    config: SystemConfig
    w_star: float
    critical_class: int
    critical_state: int
    l1: tuple[int, ...]
    l2: tuple[int, ...]
    f1: float
    f2: float
    theta: float
    c_rp: float
    z_star: tuple[np.ndarray, ...]
    z_tail: tuple[float, ...]

    @property
    def alpha(self) -> float:
        return self.config.alpha

    def constraint_residual(self) -> float:
        return abs(self.theta * self.f1 + (1 - self.theta) * self.f2 - self.alpha)

    def summary_rows(self) -> list[tuple[str, str]]:
        return [
            ("W*", f"{self.w_star:.6g}"),
            ("critical class / state", f"{self.critical_class + 1} / {self.critical_state}"),
            ("l1", ", ".join(str(v) for v in self.l1)),
            ("l2", ", ".join(str(v) for v in self.l2)),
            ("theta", f"{self.theta:.12f}"),
            ("f1 / f2", f"{self.f1:.12f} / {self.f2:.12f}"),
            ("C_RP", f"{self.c_rp:.12f}"),
            ("constraint residual", f"{self.constraint_residual():.3e}"),
        ]


def _aggregate_rate(config: SystemConfig, thresholds: list[int]) -> float:
    return math.fsum(c.gamma * active_fraction(c.p, n) for c, n in zip(config.classes, thresholds))


def solve_relaxed(config: SystemConfig) -> RelaxedSolution:
    """Construct the mixed-threshold optimum for the given classes and budget."""
    alpha = config.alpha
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"budget alpha must lie in (0, 1), got {alpha!r}")

    # Lowest priority pops first: smaller index, then smaller p, then later class
    heap = []
    for k, c in enumerate(config.classes):
        heapq.heappush(heap, (index_key(whittle_index(c.p, 1)), c.p, -k, 1))

    thresholds = [1] * config.k
    rate = 1.0
    while True:
        _, p, neg_k, q = heapq.heappop(heap)
        k = -neg_k
        before = rate
        thresholds[k] = q + 1
        rate = _aggregate_rate(config, thresholds)
        if rate <= alpha:
            break
        heapq.heappush(heap, (index_key(whittle_index(p, q + 1)), p, neg_k, q + 1))

    l1 = tuple(thresholds)
    if rate == alpha:
        # budget met exactly by l1, no mixing
        l2, f1, f2, theta = l1, rate, rate, 1.0
    else:
        l2 = tuple(n if j != k else q for j, n in enumerate(thresholds))
        f1, f2 = rate, before
        theta = (alpha - f2) / (f1 - f2)
    w_star = whittle_index(config.classes[k].p, q)
    logger.info("bracket found at W*=%.6g (class %d, age %d): f1=%.6f <= alpha=%.6f < f2=%.6f",
                w_star, k + 1, q, f1, alpha, f2)

    z_star, z_tail = _mixture(config, l1, l2, theta)
    solution = RelaxedSolution(
        config=config,
        w_star=w_star,
        critical_class=k,
        critical_state=q,
        l1=l1,
        l2=l2,
        f1=f1,
        f2=f2,
        theta=theta,
        c_rp=0.0,
        z_star=z_star,
        z_tail=z_tail,
    )
    return _with_cost(solution)


def _mixture(config: SystemConfig, l1, l2, theta: float):
    vectors, tails = [], []
    for c, n1, n2 in zip(config.classes, l1, l2):
        max_state = max(default_max_state(c.p, n1), default_max_state(c.p, n2))
        u1 = stationary_distribution(c.p, n1, max_state)
        u2 = stationary_distribution(c.p, n2, max_state)
        vectors.append(c.gamma * (theta * u1.probs + (1 - theta) * u2.probs))
        tails.append(c.gamma * (theta * u1.tail_mass + (1 - theta) * u2.tail_mass))
    return tuple(vectors), tuple(tails)


def _with_cost(solution: RelaxedSolution) -> RelaxedSolution:
    return replace(solution, c_rp=relaxed_cost(solution))


def relaxed_cost(solution: RelaxedSolution) -> float:
    """Per-user average age of the mixed-threshold optimum."""
    theta = solution.theta
    terms = []
    for c, n1, n2 in zip(solution.config.classes, solution.l1, solution.l2):
        mean1 = stationary_distribution(c.p, n1).mean_age()
        mean2 = stationary_distribution(c.p, n2).mean_age() if theta < 1 else 0.0
        terms.append(c.gamma * (theta * mean1 + (1 - theta) * mean2))
    return math.fsum(terms)


def fixed_point(config: SystemConfig) -> tuple[np.ndarray, ...]:
    """Stationary proportions z* of the relaxed optimum, one vector per class."""
    return solve_relaxed(config).z_star
