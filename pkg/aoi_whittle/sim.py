"""Seeded N-user simulation of the slotted downlink.

Each slot the policy picks users to transmit; a scheduled user of class k is
decoded with probability p_k and its age drops to 1, every other age grows by
one. Randomness comes from a counter-based Philox stream so that draw number
slot * N + user is fixed by the seed alone.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from multiprocessing import Pool

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from aoi_whittle import settings
from aoi_whittle.errors import InvalidParameterError
from aoi_whittle.fluid import FluidState, class_boundary, distance, fluid_step, zstar_state
from aoi_whittle.policy_core import SystemConfig, priority_order, whittle_indices
from aoi_whittle.relaxed_solver import RelaxedSolution, solve_relaxed

logger = logging.getLogger(__name__)

RNG_ALGORITHM = f"numpy-{np.__version__}/Philox4x64-10"

# Tolerance for class counts and the budget M = alpha * N to be integers
COUNT_TOL = 1e-9


class SchedulingPolicy(str, Enum):
    WHITTLE = "whittle"
    MIXED_THRESHOLD = "mixed_threshold"
    MAX_AGE = "max_age_greedy"


class SimConfig(BaseModel):
    """One simulation task."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    system: SystemConfig
    n_users: int = Field(ge=1)
    horizon: int = Field(ge=1)
    seed: int = Field(ge=0, lt=2**64)
    policy: SchedulingPolicy = SchedulingPolicy.WHITTLE
    record_proportions: bool = False
    proportion_sample_stride: int = Field(default=1, ge=1)
    burn_in: float = Field(default=settings.BURN_IN, ge=0.0, lt=1.0)
    strict_budget: bool = False
    initial_ages: tuple[int, ...] | None = None

    @model_validator(mode="after")
    def realizable(self):
        class_counts(self.system, self.n_users)
        m = self.m
        if self.strict_budget and abs(self.system.alpha * self.n_users - m) > COUNT_TOL:
            raise ValueError(f"alpha*N = {self.system.alpha * self.n_users!r} is not an integer")
        if not 1 <= m <= self.n_users:
            raise ValueError(f"budget M = {m} must lie in 1..N={self.n_users}")
        if self.initial_ages is not None:
            if len(self.initial_ages) != self.n_users:
                raise ValueError(f"{len(self.initial_ages)} initial ages for {self.n_users} users")
            if min(self.initial_ages) < 1:
                raise ValueError("initial ages must be >= 1")
        return self

    @property
    def m(self) -> int:
        return round(self.system.alpha * self.n_users)


def class_counts(system: SystemConfig, n_users: int) -> list[int]:
    """Users per class; gamma_k * N must be an integer."""
    counts = []
    for k, c in enumerate(system.classes):
        exact = c.gamma * n_users
        if abs(exact - round(exact)) > COUNT_TOL:
            raise InvalidParameterError(f"class {k + 1} share {c.gamma} gives {exact!r} users at N={n_users}")
        counts.append(round(exact))
    if sum(counts) != n_users:
        raise InvalidParameterError(f"class counts {counts} do not add up to N={n_users}")
    return counts


@dataclass(frozen=True)
class UserLayout:
    """Users laid out by class: the first counts[0] users are class 1, and so on."""
    counts: tuple[int, ...]
    class_of: np.ndarray
    p: np.ndarray

    @classmethod
    def from_config(cls, system: SystemConfig, n_users: int) -> "UserLayout":
        counts = class_counts(system, n_users)
        class_of = np.repeat(np.arange(system.k), counts)
        return cls(tuple(counts), class_of, np.asarray(system.ps)[class_of])

    @property
    def n_users(self) -> int:
        return len(self.class_of)


def age_step(s: int, a: int, c: int) -> int:
    """Age after one slot: reset on a decoded transmission, otherwise one older."""
    if s < 1:
        raise InvalidParameterError(f"age must be >= 1, got {s!r}")
    return 1 if a == 1 and c == 1 else s + 1


def whittle_schedule(ages: np.ndarray, layout: UserLayout, m: int) -> np.ndarray:
    """Ids of the m users with the highest Whittle index, in priority order."""
    ages = np.asarray(ages)
    order = priority_order(
        whittle_indices(layout.p, ages), layout.p, ages, layout.class_of, np.arange(len(ages))
    )
    return order[: min(m, len(ages))]


def max_age_schedule(ages: np.ndarray, m: int) -> np.ndarray:
    """Ids of the m oldest users, lower id first on ties."""
    ages = np.asarray(ages)
    order = np.lexsort((np.arange(len(ages)), -ages))
    return order[: min(m, len(ages))]


def empirical_proportions(ages: np.ndarray, layout: UserLayout) -> tuple[np.ndarray, ...]:
    """Z^N: per class, the share of all N users at each age."""
    ages = np.asarray(ages)
    out = []
    for k in range(len(layout.counts)):
        counts = np.bincount(ages[layout.class_of == k], minlength=2)[1:]
        out.append(counts / layout.n_users)
    return tuple(out)


def schedule_boundaries(
    ages: np.ndarray, scheduled: np.ndarray, layout: UserLayout
) -> tuple[tuple[float, ...], tuple[int, ...], tuple[float, ...]]:
    """Per class: scheduled share of all N users, boundary age and idle share at that age.

    Empty age bins count as idle below the youngest scheduled user of their
    class and as active from there on.
    """
    ages = np.asarray(ages)
    active = np.zeros(layout.n_users, dtype=bool)
    active[scheduled] = True
    alpha_k, l_k, shares = [], [], []
    for k in range(len(layout.counts)):
        members = layout.class_of == k
        a, s = ages[members], active[members]
        size = int(a.max())
        total = np.bincount(a - 1, minlength=size)
        sent = np.bincount(a[s] - 1, minlength=size)
        youngest = int(a[s].min()) if s.any() else size + 1
        idle = np.where(np.arange(1, size + 1) < youngest, 1.0, 0.0)
        filled = total > 0
        idle[filled] = (total[filled] - sent[filled]) / total[filled]
        n, share = class_boundary(idle)
        alpha_k.append(int(s.sum()) / layout.n_users)
        l_k.append(n)
        shares.append(share)
    return tuple(alpha_k), tuple(l_k), tuple(shares)


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Z^N(t) at one sampled slot and how the policy split it."""
    t: int
    z: tuple[np.ndarray, ...]
    alpha_k: tuple[float, ...]
    l_k: tuple[int, ...]
    idle_share: tuple[float, ...]
    fluid_distance: float
    zstar_distance: float

    def to_rows(self):
        """Rows in the fluid trajectory layout, norm_to_zstar last."""
        two = len(self.l_k) > 1
        a2 = self.alpha_k[1] if two else ""
        l2 = self.l_k[1] if two else ""
        g = self.idle_share[1] if two else ""
        for k, v in enumerate(self.z):
            for i in np.flatnonzero(v):
                yield (self.t, k + 1, int(i) + 1, float(v[i]), self.alpha_k[0], a2, self.l_k[0], l2,
                       self.idle_share[0], g, self.zstar_distance)


@dataclass(frozen=True)
class SimMetrics:
    """Summary of one simulation run."""
    seed: int
    n_users: int
    m: int
    policy: str
    horizon: int
    burn_in_slots: int
    avg_age_per_user: float
    avg_age_unburned: float
    class_avg_age: tuple[float, ...]
    utilization: float
    scheduled_min: int
    scheduled_max: int
    rng_algorithm: str = RNG_ALGORITHM
    snapshots: tuple[Snapshot, ...] = ()
    mean_proportions: tuple[np.ndarray, ...] | None = None

    @property
    def max_fluid_deviation(self) -> float | None:
        """sup over the sampled slots of ||Z^N(t) - z(t)||."""
        if not self.snapshots:
            return None
        return max(s.fluid_distance for s in self.snapshots)


class SimRun:
    """Mutable state of one simulation: ages, accumulators and the random stream."""

    def __init__(self, config: SimConfig, solution: RelaxedSolution | None = None):
        self.config = config
        self.layout = UserLayout.from_config(config.system, config.n_users)
        self.m = config.m
        self.t = 0
        n = config.n_users
        if config.initial_ages is None:
            self.ages = np.ones(n, dtype=np.int64)
        else:
            self.ages = np.array(config.initial_ages, dtype=np.int64)

        self.rng = np.random.Generator(np.random.Philox(key=config.seed))
        self.thresholds = None
        if config.policy is SchedulingPolicy.MIXED_THRESHOLD or config.record_proportions:
            solution = solution or solve_relaxed(config.system)
        self.solution = solution
        if config.policy is SchedulingPolicy.MIXED_THRESHOLD:
            assign = np.random.Generator(np.random.Philox(key=config.seed, counter=[0, 0, 0, 1]))
            first = assign.random(n) < solution.theta
            l1 = np.asarray(solution.l1)[self.layout.class_of]
            l2 = np.asarray(solution.l2)[self.layout.class_of]
            self.thresholds = np.where(first, l1, l2)

        self.burn_in_slots = int(config.burn_in * config.horizon)
        self.user_age_sum = np.zeros(n, dtype=np.int64)
        self.burn_snapshot = np.zeros(n, dtype=np.int64)
        self.scheduled_total = 0
        self.scheduled_min = None
        self.scheduled_max = None

        self.snapshots: list[Snapshot] = []
        self.hist = None
        self.fluid = None
        self.target = None
        if config.record_proportions:
            self.fluid = FluidState(z=empirical_proportions(self.ages, self.layout))
            self.target = zstar_state(solution)
            self.hist = [np.zeros(0) for _ in self.layout.counts]

    def select(self) -> np.ndarray:
        policy = self.config.policy
        if policy is SchedulingPolicy.WHITTLE:
            return whittle_schedule(self.ages, self.layout, self.m)
        if policy is SchedulingPolicy.MAX_AGE:
            return max_age_schedule(self.ages, self.m)
        return np.flatnonzero(self.ages >= self.thresholds)

    def _record(self, scheduled: np.ndarray):
        z = FluidState(z=empirical_proportions(self.ages, self.layout))
        if self.t >= self.burn_in_slots:
            for k, v in enumerate(z.z):
                if len(v) > len(self.hist[k]):
                    self.hist[k] = np.pad(self.hist[k], (0, len(v) - len(self.hist[k])))
                self.hist[k][: len(v)] += v
        if self.t % self.config.proportion_sample_stride == 0:
            alpha_k, l_k, shares = schedule_boundaries(self.ages, scheduled, self.layout)
            self.snapshots.append(Snapshot(self.t, z.z, alpha_k, l_k, shares,
                                           distance(z, self.fluid), distance(z, self.target)))

    def step(self) -> np.ndarray:
        """Run one slot and return the ids of the users that transmitted."""
        if self.t == self.burn_in_slots:
            self.burn_snapshot = self.user_age_sum.copy()
        self.user_age_sum += self.ages
        scheduled = self.select()
        if self.fluid is not None:
            self._record(scheduled)

        draws = self.rng.random(self.layout.n_users)
        decoded = np.zeros(self.layout.n_users, dtype=bool)
        decoded[scheduled] = draws[scheduled] < self.layout.p[scheduled]
        self.ages = np.where(decoded, 1, self.ages + 1)

        count = len(scheduled)
        self.scheduled_total += count
        self.scheduled_min = count if self.scheduled_min is None else min(self.scheduled_min, count)
        self.scheduled_max = count if self.scheduled_max is None else max(self.scheduled_max, count)
        if self.fluid is not None:
            self.fluid, _ = fluid_step(self.fluid, self.config.system)
        self.t += 1
        return scheduled

    def metrics(self) -> SimMetrics:
        n = self.layout.n_users
        slots = self.t
        burned_slots = slots - self.burn_in_slots
        burned = self.user_age_sum - self.burn_snapshot
        total_all = int(self.user_age_sum.sum())
        total_burned = int(burned.sum())

        class_avg = []
        for k, count in enumerate(self.layout.counts):
            class_sum = int(burned[self.layout.class_of == k].sum())
            class_avg.append(class_sum / (count * burned_slots))

        mean_props = None
        if self.hist is not None:
            mean_props = tuple(h / burned_slots for h in self.hist)

        return SimMetrics(
            seed=self.config.seed,
            n_users=n,
            m=self.m,
            policy=self.config.policy.value,
            horizon=slots,
            burn_in_slots=self.burn_in_slots,
            avg_age_per_user=total_burned / (n * burned_slots),
            avg_age_unburned=total_all / (n * slots),
            class_avg_age=tuple(class_avg),
            utilization=self.scheduled_total / (self.m * slots),
            scheduled_min=self.scheduled_min,
            scheduled_max=self.scheduled_max,
            snapshots=tuple(self.snapshots),
            mean_proportions=mean_props,
        )


def simulate(config: SimConfig, solution: RelaxedSolution | None = None) -> SimMetrics:
    """Run the configured policy for the whole horizon and summarize it."""
    run = SimRun(config, solution)
    for _ in range(config.horizon):
        run.step()
    metrics = run.metrics()
    logger.debug("sim N=%d seed=%d policy=%s: avg age %.6f",
                 config.n_users, config.seed, config.policy.value, metrics.avg_age_per_user)
    return metrics


def run_many(configs: list[SimConfig], workers: int = 1) -> list[SimMetrics]:
    """Run independent simulations, in a process pool when workers > 1.

    Results come back sorted by (N, seed) whatever the completion order.
    """
    if workers > 1 and len(configs) > 1:
        with Pool(workers) as pool:
            results = pool.map(simulate, configs)
    else:
        results = [simulate(c) for c in configs]
    return sorted(results, key=lambda r: (r.n_users, r.seed))


@dataclass(frozen=True)
class KurtzRow:
    n_users: int
    runs: int
    exceed_prob: float
    n_times_prob: float
    median_deviation: float
    deviations: tuple[float, ...] = field(repr=False, default=())
    # lowest-seed run at this N, snapshots included
    sample: SimMetrics | None = field(repr=False, compare=False, default=None)


def realize_ages(x: tuple[np.ndarray, ...], system: SystemConfig, n_users: int) -> tuple[int, ...]:
    """Per-user initial ages whose empirical proportions equal x exactly."""
    counts = class_counts(system, n_users)
    ages = []
    for k, vec in enumerate(x):
        users = np.asarray(vec, dtype=np.float64) * n_users
        rounded = np.round(users)
        if np.any(np.abs(users - rounded) > COUNT_TOL):
            raise InvalidParameterError(f"initial state of class {k + 1} is not realizable with N={n_users}")
        if int(rounded.sum()) != counts[k]:
            raise InvalidParameterError(
                f"initial state of class {k + 1} holds {int(rounded.sum())} users, class has {counts[k]}")
        for age, c in enumerate(rounded.astype(int), start=1):
            ages.extend([age] * c)
    return tuple(ages)


def kurtz_experiment(
    system: SystemConfig,
    n_list: list[int],
    horizon: int,
    seeds: list[int],
    mu: float | None = None,
    x: tuple[np.ndarray, ...] | None = None,
    workers: int = 1,
) -> tuple[float, list[KurtzRow]]:
    """Estimate P(sup_t ||Z^N(t) - z(t)|| >= mu) for each N from a common start x.

    With mu omitted it is set to twice the median deviation at the largest N.
    Returns the mu used and one row per N.
    """
    if x is None:
        x = tuple(np.array([c.gamma]) for c in system.classes)
    configs = [
        SimConfig(system=system, n_users=n, horizon=horizon, seed=s,
                  record_proportions=True, burn_in=0.0, initial_ages=realize_ages(x, system, n))
        for n in sorted(n_list) for s in seeds
    ]
    results = run_many(configs, workers)

    by_n: dict[int, list[float]] = {}
    samples: dict[int, SimMetrics] = {}
    for r in results:
        by_n.setdefault(r.n_users, []).append(r.max_fluid_deviation)
        samples.setdefault(r.n_users, r)
    if mu is None:
        mu = 2 * float(np.median(by_n[max(by_n)]))
        logger.info("kurtz: mu set to %.6g (twice the median deviation at N=%d)", mu, max(by_n))

    rows = []
    for n, devs in sorted(by_n.items()):
        prob = sum(d >= mu for d in devs) / len(devs)
        rows.append(KurtzRow(n, len(devs), prob, n * prob, float(np.median(devs)), tuple(devs), samples[n]))
    return mu, rows


def mean_and_se(values) -> tuple[float, float]:
    """Sample mean and its standard error (0 for a single value)."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.0
    return mean, float(values.std(ddof=1) / math.sqrt(len(values)))

