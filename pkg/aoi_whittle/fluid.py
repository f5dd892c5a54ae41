"""Fluid-limit dynamics of the Whittle index policy and its convergence diagnostics.

The fluid state holds, for every class k and age i, the expected share of the
population z_i^k(t). One step schedules the alpha highest-index mass, resets a
fraction p_k of it to age 1 and ages everything else by one slot.
"""

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aoi_whittle import settings
from aoi_whittle.errors import FluidStateError, InvalidParameterError, SpecFileError
from aoi_whittle.policy_core import SystemConfig, priority_order, whittle_index, whittle_indices
from aoi_whittle.relaxed_solver import RelaxedSolution, solve_relaxed

logger = logging.getLogger(__name__)

# Budget remainders below this are treated as exhausted
SNAP = 1e-15

# Tolerance of the audit comparisons
AUDIT_TOL = 1e-10


@dataclass
class FluidState:
    """Per-class proportion vectors; z[k][i - 1] is the share at age i."""
    z: tuple[np.ndarray, ...]
    t: int = 0
    truncation_eps: float = settings.TRUNCATION_EPS
    lost_mass: np.ndarray | None = None

    def __post_init__(self):
        self.z = tuple(np.asarray(v, dtype=np.float64) for v in self.z)
        if self.lost_mass is None:
            self.lost_mass = np.zeros(len(self.z))

    @property
    def k(self) -> int:
        return len(self.z)

    def class_mass(self) -> np.ndarray:
        return np.array([math.fsum(v) for v in self.z])

    def mass_drift(self, config: SystemConfig) -> np.ndarray:
        """|sum_i z_i^k + lost_k - gamma_k| per class."""
        return np.abs(self.class_mass() + self.lost_mass - np.asarray(config.gammas))


@dataclass(frozen=True)
class ScheduleDecision:
    """What the policy did in one slot.

    l_k[k] and idle_share[k] describe class k's boundary: ages below l_k[k]
    are idle, and the bin at l_k[k] keeps idle_share[k] of its mass idle.
    l is the common threshold max(l_k). beta and gamma_split are idle_share
    of the first two classes, each paired with its own l_k.
    """
    t: int
    alpha_k: tuple[float, ...]
    l_k: tuple[int, ...]
    idle_share: tuple[float, ...]
    l: int
    beta: float
    gamma_split: float

    def idle_mass(self, state: FluidState) -> float:
        """Idle mass implied by the thresholds, to compare against 1 - alpha."""
        total = []
        for v, n, share in zip(state.z, self.l_k, self.idle_share):
            total.append(math.fsum(v[: n - 1]))
            if n <= len(v):
                total.append(share * v[n - 1])
        return math.fsum(total)


@dataclass(frozen=True)
class AlternationCheck:
    ok: bool
    first_failure: int | None
    age_one_tie: bool


@dataclass(frozen=True)
class ConvergenceCertificate:
    """Sufficient-condition bundle for two-class fluid convergence."""
    d_value: float
    b_alpha: float
    assumption_ok: bool
    t_max: int
    t_max_bounds: tuple[float, float]
    alternation_ok: bool
    alternation_first_failure: int | None


class AlphaHistory:
    """Ring buffer of the per-class scheduled fractions of recent slots."""

    def __init__(self, l_max: int):
        self.l_max = l_max
        self._buf = deque(maxlen=l_max + 2)

    def __len__(self):
        return len(self._buf)

    def push(self, alpha_k) -> None:
        self._buf.append(tuple(alpha_k))

    def vector(self, k: int, l: int) -> np.ndarray:
        """A_k(T) = (alpha_k(T), alpha_k(T-1), ..., alpha_k(T-l)), clipped to what is stored."""
        recent = list(self._buf)[::-1][: l + 1]
        return np.array([a[k] for a in recent])


@dataclass
class AuditReport:
    """Outcome of the slot-by-slot monotonicity audit."""
    observation_only: bool
    t_f: int | None = None
    t0: int | None = None
    slots_audited: int = 0
    violations: list[tuple[int, str, str]] = field(default_factory=list)
    case_counts: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0, 4: 0})
    final_spread: float | None = None
    max_threshold: int | None = None
    max_cover_time: int | None = None

    @property
    def clean(self) -> bool:
        return self.observation_only or not self.violations


@dataclass
class FluidRun:
    """Trajectory of a fluid run and its diagnostics."""
    config: SystemConfig
    solution: RelaxedSolution
    states: list[FluidState]
    decisions: list[ScheduleDecision]
    distances: list[float]
    tol: float
    converged_at: int | None
    certificate: ConvergenceCertificate | None
    audit: AuditReport | None

    @property
    def final_distance(self) -> float:
        return self.distances[-1]

    def lost_mass(self) -> np.ndarray:
        return self.states[-1].lost_mass

    def to_rows(self):
        """Trajectory rows: t, class, age, mass, alpha_1, alpha_2, l_1, l_2, beta, gamma, norm_to_zstar."""
        for t, (state, d) in enumerate(zip(self.states, self.decisions)):
            a2 = d.alpha_k[1] if len(d.alpha_k) > 1 else ""
            l2 = d.l_k[1] if len(d.l_k) > 1 else ""
            g = d.gamma_split if len(d.l_k) > 1 else ""
            for k, v in enumerate(state.z):
                for i in np.flatnonzero(v):
                    yield (t, k + 1, int(i) + 1, float(v[i]), d.alpha_k[0], a2, d.l_k[0], l2,
                           d.beta, g, self.distances[t])


def weighted_norm(v) -> float:
    """Age-weighted L1 norm: sum over classes and ages of |v_i^k| * i."""
    total = []
    for vec in v:
        vec = np.asarray(vec, dtype=np.float64)
        total.append(float(np.abs(vec) @ np.arange(1, len(vec) + 1)))
    return math.fsum(total)


def state_difference(a: FluidState, b: FluidState) -> tuple[np.ndarray, ...]:
    """Per-class a - b, zero-padded to a common support."""
    out = []
    for x, y in zip(a.z, b.z):
        n = max(len(x), len(y))
        out.append(np.pad(x, (0, n - len(x))) - np.pad(y, (0, n - len(y))))
    return tuple(out)


def distance(a: FluidState, b: FluidState) -> float:
    return weighted_norm(state_difference(a, b))


def zstar_state(solution: RelaxedSolution) -> FluidState:
    """The relaxed optimum's proportions as a fluid state; its tail goes to lost_mass."""
    return FluidState(
        z=tuple(v.copy() for v in solution.z_star),
        lost_mass=np.array(solution.z_tail, dtype=np.float64),
    )


def uniform_age_one_state(config: SystemConfig) -> FluidState:
    return FluidState(z=tuple(np.array([c.gamma]) for c in config.classes))


def random_state(config: SystemConfig, seed: int, max_age: int = 20) -> FluidState:
    """Random proportions over ages 1..max_age with the class shares kept."""
    rng = np.random.default_rng(seed)
    z = []
    for c in config.classes:
        w = rng.random(max_age)
        z.append(c.gamma * w / w.sum())
    return FluidState(z=tuple(z))


def load_state(path: str | Path, config: SystemConfig) -> FluidState:
    """Read an initial state from a CSV with header class,age,mass (class is 1-based)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecFileError(f"cannot read initial state: {e}", str(path)) from e

    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["class", "age", "mass"]:
        raise SpecFileError("expected header 'class,age,mass'", str(path), 1)

    cells: dict[tuple[int, int], float] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise SpecFileError(f"expected 3 fields, got {len(row)}", str(path), lineno)
        try:
            k, age, mass = int(row[0]), int(row[1]), float(row[2])
        except ValueError as e:
            raise SpecFileError(f"malformed row {row!r}", str(path), lineno) from e
        if not 1 <= k <= config.k:
            raise SpecFileError(f"class {k} outside 1..{config.k}", str(path), lineno)
        if age < 1:
            raise SpecFileError(f"age must be >= 1, got {age}", str(path), lineno)
        if not (math.isfinite(mass) and mass >= 0):
            raise SpecFileError(f"mass must be a finite non-negative number, got {mass}", str(path), lineno)
        if (k, age) in cells:
            raise SpecFileError(f"duplicate entry for class {k} age {age}", str(path), lineno)
        cells[(k, age)] = mass

    z = []
    for k, c in enumerate(config.classes, start=1):
        ages = [a for (kk, a) in cells if kk == k]
        vec = np.zeros(max(ages, default=1))
        for a in ages:
            vec[a - 1] = cells[(k, a)]
        if abs(vec.sum() - c.gamma) > 1e-9:
            raise SpecFileError(f"class {k} mass {vec.sum():.12g} does not match share {c.gamma}", str(path))
        z.append(vec)
    return FluidState(z=tuple(z))


def class_boundary(idle: np.ndarray) -> tuple[int, float]:
    """Boundary age of one class and the idle share of that bin, from per-age idle fractions."""
    full = idle >= 1.0
    lead = len(idle) if full.all() else int(np.argmin(full))
    if lead < len(idle) and 0.0 < idle[lead] < 1.0:
        return lead + 1, float(idle[lead])
    if lead >= 1:
        return lead, 1.0
    return 1, 0.0


def fluid_step(state: FluidState, config: SystemConfig) -> tuple[FluidState, ScheduleDecision]:
    """Advance the fluid state one slot under Whittle index scheduling."""
    if state.k != config.k:
        raise InvalidParameterError(f"state has {state.k} classes, config has {config.k}")
    ps = np.asarray(config.ps)
    alpha = config.alpha

    sizes = [len(v) for v in state.z]
    class_idx = np.repeat(np.arange(config.k), sizes)
    ages = np.concatenate([np.arange(1, n + 1) for n in sizes])
    p = ps[class_idx]
    mass = np.concatenate(state.z)

    order = priority_order(whittle_indices(p, ages), p, ages, class_idx)
    m_sorted = mass[order]
    before = np.concatenate(([0.0], np.cumsum(m_sorted)[:-1]))
    remaining = alpha - before
    sched_sorted = np.clip(remaining, 0.0, m_sorted)
    sched_sorted = np.where(remaining >= m_sorted - SNAP, m_sorted, sched_sorted)
    sched_sorted = np.where(remaining <= SNAP, 0.0, sched_sorted)

    sched = np.empty_like(mass)
    sched[order] = sched_sorted
    exhausted = np.empty(len(mass), dtype=bool)
    exhausted[order] = remaining <= SNAP

    with np.errstate(invalid="ignore", divide="ignore"):
        idle = np.where(mass > 0, (mass - sched) / mass, np.where(exhausted, 1.0, 0.0))

    alpha_k = np.bincount(class_idx, weights=sched, minlength=config.k)

    offsets = np.concatenate(([0], np.cumsum(sizes)))
    new_z, l_k, shares = [], [], []
    for k in range(config.k):
        lo, hi = offsets[k], offsets[k + 1]
        n, share = class_boundary(idle[lo:hi])
        l_k.append(n)
        shares.append(share)
        vec = np.empty(sizes[k] + 1)
        vec[0] = ps[k] * alpha_k[k]
        vec[1:] = state.z[k] - ps[k] * sched[lo:hi]
        if not np.all(np.isfinite(vec)) or vec.min() < -SNAP:
            raise FluidStateError(f"class {k + 1} at t={state.t} has invalid mass (min {vec.min()!r})")
        new_z.append(np.maximum(vec, 0.0))

    l = max(l_k)
    beta = shares[0]
    gamma_split = shares[1] if config.k > 1 else 1.0
    decision = ScheduleDecision(
        t=state.t,
        alpha_k=tuple(float(a) for a in alpha_k),
        l_k=tuple(l_k),
        idle_share=tuple(shares),
        l=l,
        beta=beta,
        gamma_split=gamma_split,
    )

    lost = state.lost_mass.copy()
    cutoff = l + t_max(alpha, float(ps.min()))
    for k, vec in enumerate(new_z):
        end = len(vec)
        while end > cutoff and vec[end - 1] < state.truncation_eps:
            end -= 1
        if end < len(vec):
            lost[k] += math.fsum(vec[end:])
            new_z[k] = vec[:end]

    nxt = FluidState(z=tuple(new_z), t=state.t + 1, truncation_eps=state.truncation_eps, lost_mass=lost)
    return nxt, decision


def compute_D(p1: float, p2: float) -> float:
    """The alternation horizon constant of a two-class system with p1 > p2."""
    if not (0.0 < p2 < p1 <= 1.0):
        raise InvalidParameterError(f"need 1 >= p1 > p2 > 0, got p1={p1!r}, p2={p2!r}")
    s = p1 + p2
    return (s / 2 + math.sqrt(2 * (p1 - p2) + s * s / 4)) / (p1 - p2)


def assumption_bound(p1: float, p2: float) -> float:
    """Smallest budget B_alpha above which two-class convergence is guaranteed."""
    return 1.0 / (1.0 + (compute_D(p1, p2) - 2) * p2)


def t_max_bounds(alpha: float, p2: float) -> tuple[float, float]:
    x = (1 - alpha) / (p2 * alpha)
    return x, x + 1


def t_max(alpha: float, p2: float) -> int:
    """The unique integer in [(1-a)/(p2 a), (1-a)/(p2 a) + 1)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"budget alpha must lie in (0, 1), got {alpha!r}")
    if not 0.0 < p2 <= 1.0:
        raise InvalidParameterError(f"success probability must lie in (0, 1], got {p2!r}")
    x, _ = t_max_bounds(alpha, p2)
    nearest = round(x)
    value = nearest if abs(x - nearest) <= 1e-12 else math.ceil(x)
    return max(int(value), 1)


def check_alternation(p1: float, p2: float, n_max: int) -> AlternationCheck:
    """Check w2(n) < w1(n) < w2(n+1) for 1 <= n <= n_max.

    At n = 1 both indices equal 1 whatever p is; that tie is reported through
    age_one_tie and does not count as a failure.
    """
    if not p1 > p2:
        raise InvalidParameterError(f"need p1 > p2, got p1={p1!r}, p2={p2!r}")
    tie = whittle_index(p1, 1) == whittle_index(p2, 1)
    for n in range(1, n_max + 1):
        w1 = whittle_index(p1, n)
        lower_ok = n == 1 or whittle_index(p2, n) < w1
        if not (lower_ok and w1 < whittle_index(p2, n + 1)):
            return AlternationCheck(False, n, tie)
    return AlternationCheck(True, None, tie)


def certify(config: SystemConfig) -> ConvergenceCertificate:
    """Evaluate the two-class sufficient conditions for fluid convergence."""
    if config.k != 2:
        raise InvalidParameterError(f"certificates exist for two classes only, got {config.k}")
    p1, p2 = config.ps
    b_alpha = assumption_bound(p1, p2)
    tm = t_max(config.alpha, p2)
    alternation = check_alternation(p1, p2, tm + 1)
    return ConvergenceCertificate(
        d_value=compute_D(p1, p2),
        b_alpha=b_alpha,
        assumption_ok=config.alpha > b_alpha,
        t_max=tm,
        t_max_bounds=t_max_bounds(config.alpha, p2),
        alternation_ok=alternation.ok,
        alternation_first_failure=alternation.first_failure,
    )


def cover_time(
    alpha1, alpha2, start: int, p1: float, p2: float, alpha: float, max_steps: int | None = None
) -> int | None:
    """Slots needed from start until the freshly reset mass alone covers 1 - alpha.

    For t0 = 1, 2, ... the fresh mass is the class-2 resets of the last t0
    slots plus the class-1 resets of the last l slots, l being the largest
    class-1 age whose index does not exceed w2(t0). Returns None when the
    recorded history ends first or max_steps is reached.
    """
    t0 = 0
    while start + t0 < len(alpha1) and (max_steps is None or t0 < max_steps):
        t0 += 1
        end = start + t0
        w_cap = whittle_index(p2, t0)
        l = 0
        while l < t0 and whittle_index(p1, l + 1) <= w_cap:
            l += 1
        fresh = math.fsum(p1 * alpha1[end - j] for j in range(1, l + 1))
        fresh += math.fsum(p2 * alpha2[end - j] for j in range(1, t0 + 1))
        if fresh >= 1 - alpha - AUDIT_TOL:
            return t0
    return None


def _bracket_case(x: float, a: float, b: float, c: float, p1: float) -> int | None:
    """Which of the four contraction brackets alpha_1(T+1) = x satisfies.

    a = alpha_1(T), b = alpha_1(T - l(T)), c = alpha_1(T - l(T) + 1).
    """
    tol = AUDIT_TOL
    if a - tol <= x <= b + tol and x - a <= p1 * (b - a) + tol:
        return 1
    if b - tol <= x <= a + tol and a - x <= p1 * (a - b) + tol:
        return 2
    if c - tol <= x <= a + tol and a - x <= p1 * (a - c) + tol:
        return 3
    if a - tol <= x <= c + tol and x - a <= p1 * (c - a) + tol:
        return 4
    return None


def _expressible(t: int, state: FluidState, d: ScheduleDecision, alphas, ps) -> bool:
    """True if every idle bin equals p_k * alpha_k(t - i) for its age i."""
    for k, vec in enumerate(state.z):
        top = d.l_k[k] if d.idle_share[k] > 0 else d.l_k[k] - 1
        for i in range(1, min(top, len(vec)) + 1):
            if t - i < 0:
                return False
            if abs(vec[i - 1] - ps[k] * alphas[t - i][k]) > AUDIT_TOL:
                return False
    return True


def monotonicity_audit(
    states: list[FluidState],
    decisions: list[ScheduleDecision],
    config: SystemConfig,
    certificate: ConvergenceCertificate,
) -> AuditReport:
    """Replay a two-class trajectory and check the contraction of the alpha_1 history.

    Once the idle mass is fully expressed through past scheduled fractions
    (slot T0, searched from the first slot t_f with alpha_1 > 0), every slot
    is checked for: max/min of A_1 monotone, alpha_1(T+1) inside one of the
    four contraction brackets, l(T) <= t_max and alpha_1 > 0. Without the
    budget assumption the findings are recorded but not held against the run.
    """
    report = AuditReport(observation_only=not certificate.assumption_ok)
    l_max = certificate.t_max
    p1 = config.ps[0]
    history = AlphaHistory(l_max)
    alphas: list[tuple[float, ...]] = []
    prev_extremes = None
    prev_l = None

    for t, (state, d) in enumerate(zip(states, decisions)):
        alphas.append(d.alpha_k)
        history.push(d.alpha_k)
        a1 = d.alpha_k[0]

        if report.t_f is None:
            if a1 > 0:
                report.t_f = t
            else:
                continue
        if report.t0 is None:
            if not _expressible(t, state, d, alphas, config.ps):
                continue
            report.t0 = t

        report.slots_audited += 1
        report.max_threshold = max(report.max_threshold or 0, d.l)
        if d.l > l_max:
            report.violations.append((t, "threshold", f"l={d.l} exceeds t_max={l_max}"))
        if a1 <= 0:
            report.violations.append((t, "activity", f"alpha_1={a1!r}"))

        vec = history.vector(0, d.l)
        extremes = (float(vec.max()), float(vec.min()))
        if prev_extremes is not None:
            if extremes[0] > prev_extremes[0] + AUDIT_TOL:
                report.violations.append((t, "max", f"{extremes[0]!r} > {prev_extremes[0]!r}"))
            if extremes[1] < prev_extremes[1] - AUDIT_TOL:
                report.violations.append((t, "min", f"{extremes[1]!r} < {prev_extremes[1]!r}"))

            a = alphas[t - 1][0]
            lag = t - 1 - prev_l
            if lag >= 0:
                case = _bracket_case(a1, a, alphas[lag][0], alphas[lag + 1][0], p1)
                if case is None:
                    report.violations.append((t, "bracket", f"alpha_1={a1!r} outside all brackets"))
                else:
                    report.case_counts[case] += 1
        prev_extremes = extremes
        prev_l = d.l
        report.final_spread = extremes[0] - extremes[1]

    if report.t_f is not None:
        a1s = [a[0] for a in alphas]
        a2s = [a[1] for a in alphas]
        times = (cover_time(a1s, a2s, s, config.ps[0], config.ps[1], config.alpha, 4 * (l_max + 1))
                 for s in range(report.t_f, len(alphas)))
        report.max_cover_time = max((c for c in times if c is not None), default=None)

    level = logging.INFO if report.clean else logging.WARNING
    logger.log(level, "audit: t_f=%s T0=%s audited=%d violations=%d cases=%s",
               report.t_f, report.t0, report.slots_audited, len(report.violations), report.case_counts)
    return report


def run_fluid(
    z0: FluidState,
    config: SystemConfig,
    horizon: int,
    tol: float = 1e-6,
    solution: RelaxedSolution | None = None,
) -> FluidRun:
    """Iterate the fluid map and report the distance to z* slot by slot."""
    if horizon < 1:
        raise InvalidParameterError(f"horizon must be >= 1, got {horizon}")
    solution = solution or solve_relaxed(config)
    target = zstar_state(solution)

    states = [z0]
    decisions = []
    distances = [distance(z0, target)]
    state = z0
    for _ in range(horizon):
        state, decision = fluid_step(state, config)
        states.append(state)
        decisions.append(decision)
        distances.append(distance(state, target))

    converged_at = next((t for t, d in enumerate(distances) if d < tol), None)
    if converged_at is None:
        logger.warning("fluid run did not reach distance %.1e within %d slots (final %.3e)",
                       tol, horizon, distances[-1])
    else:
        logger.info("fluid run within %.1e of z* from slot %d", tol, converged_at)
    logger.debug("truncated mass per class: %s", state.lost_mass)

    certificate = audit = None
    if config.k == 2:
        certificate = certify(config)
        audit = monotonicity_audit(states[:-1], decisions, config, certificate)

    return FluidRun(
        config=config,
        solution=solution,
        states=states,
        decisions=decisions,
        distances=distances,
        tol=tol,
        converged_at=converged_at,
        certificate=certificate,
        audit=audit,
    )
