"""Tests for the N-user simulation."""

import numpy as np
import pytest
from pydantic import ValidationError

from aoi_whittle.errors import InvalidParameterError
from aoi_whittle.policy_core import ClassSpec, SystemConfig, stationary_distribution
from aoi_whittle.sim import (
    SchedulingPolicy,
    SimConfig,
    SimRun,
    UserLayout,
    age_step,
    class_counts,
    empirical_proportions,
    kurtz_experiment,
    max_age_schedule,
    mean_and_se,
    realize_ages,
    run_many,
    schedule_boundaries,
    simulate,
    whittle_schedule,
)


@pytest.fixture
def single_class_config():
    return SystemConfig(classes=(ClassSpec(p=0.8, gamma=1.0),), alpha=0.5)


def head(v, size):
    """First size entries of v, zero-padded."""
    v = np.asarray(v, dtype=np.float64)
    return np.pad(v, (0, max(0, size - len(v))))[:size]


class TestAgeStep:
    """Tests for the per-user age recursion."""

    def test_decoded_transmission_resets(self):
        """Test that a scheduled and decoded user returns to age 1."""
        assert age_step(5, 1, 1) == 1

    def test_failed_transmission_ages(self):
        """Test that a scheduled but undecoded user ages."""
        assert age_step(5, 1, 0) == 6

    def test_idle_user_ages(self):
        """Test that an idle user ages whatever the channel does."""
        assert age_step(5, 0, 1) == 6
        assert age_step(5, 0, 0) == 6

    def test_rejects_bad_age(self):
        """Test that ages below 1 are rejected."""
        with pytest.raises(InvalidParameterError):
            age_step(0, 1, 1)


class TestScheduling:
    """Tests for per-slot user selection."""

    def test_oldest_user_first(self, single_class_config):
        """Test that the higher index goes to the older user."""
        layout = UserLayout.from_config(single_class_config, 2)
        assert list(whittle_schedule(np.array([3, 7]), layout, 1)) == [1]

    def test_age_one_tie_goes_to_better_channel(self, two_class_config):
        """Test that equal indices at age 1 favour the larger p."""
        layout = UserLayout.from_config(two_class_config, 2)
        assert list(whittle_schedule(np.array([1, 1]), layout, 1)) == [0]

    def test_full_budget_schedules_everyone(self, two_class_config):
        """Test that M = N schedules every user."""
        layout = UserLayout.from_config(two_class_config, 4)
        assert sorted(whittle_schedule(np.array([1, 4, 2, 3]), layout, 4)) == [0, 1, 2, 3]

    def test_cross_class_priority(self, two_class_config):
        """Test that a class-2 user at age 3 beats a class-1 user at age 2."""
        layout = UserLayout.from_config(two_class_config, 2)
        assert list(whittle_schedule(np.array([2, 3]), layout, 1)) == [1]

    def test_max_age_ties_by_id(self):
        """Test that greedy selection breaks age ties by user id."""
        assert list(max_age_schedule(np.array([2, 5, 5, 1]), 2)) == [1, 2]


class TestLayout:
    """Tests for class counts and the user layout."""

    def test_counts(self, two_class_config):
        """Test that users are laid out by class."""
        layout = UserLayout.from_config(two_class_config, 4)
        assert layout.counts == (2, 2)
        assert list(layout.class_of) == [0, 0, 1, 1]
        np.testing.assert_allclose(layout.p, [0.8, 0.8, 0.5, 0.5])

    def test_non_integer_count_rejected(self, two_class_config):
        """Test that gamma * N must be an integer."""
        with pytest.raises(InvalidParameterError):
            class_counts(two_class_config, 5)

    def test_sim_config_rejects_unrealizable_n(self, two_class_config):
        """Test that SimConfig validation catches fractional class counts."""
        with pytest.raises(ValidationError):
            SimConfig(system=two_class_config, n_users=5, horizon=10, seed=0)

    def test_strict_budget(self):
        """Test that strict mode rejects a fractional alpha * N."""
        system = SystemConfig(classes=(ClassSpec(p=0.5, gamma=1.0),), alpha=0.3)
        with pytest.raises(ValidationError):
            SimConfig(system=system, n_users=4, horizon=10, seed=0, strict_budget=True)
        assert SimConfig(system=system, n_users=4, horizon=10, seed=0).m == 1


class TestEmpiricalProportions:
    """Tests for the empirical proportion vector."""

    def test_all_age_one(self, single_class_config):
        """Test that a single class at age 1 is all mass at age 1."""
        layout = UserLayout.from_config(single_class_config, 6)
        (z,) = empirical_proportions(np.ones(6, dtype=int), layout)
        np.testing.assert_allclose(z, [1.0])

    def test_two_classes(self, two_class_config):
        """Test counting across two classes of two users."""
        layout = UserLayout.from_config(two_class_config, 4)
        z1, z2 = empirical_proportions(np.array([1, 2, 1, 3]), layout)
        np.testing.assert_allclose(z1, [0.25, 0.25])
        np.testing.assert_allclose(z2, [0.25, 0.0, 0.25])

    def test_realize_ages(self, two_class_config):
        """Test that realized ages reproduce the requested proportions."""
        x = (np.array([0.25, 0.25]), np.array([0.5]))
        ages = realize_ages(x, two_class_config, 8)
        assert ages == (1, 1, 2, 2, 1, 1, 1, 1)
        z1, z2 = empirical_proportions(np.array(ages), UserLayout.from_config(two_class_config, 8))
        np.testing.assert_allclose(z1, x[0])
        np.testing.assert_allclose(z2, x[1])

    def test_realize_ages_rejects_fractions(self, two_class_config):
        """Test that proportions not realizable at N are rejected."""
        with pytest.raises(InvalidParameterError):
            realize_ages((np.array([0.3, 0.2]), np.array([0.5])), two_class_config, 4)


class TestSimulate:
    """Tests for whole simulation runs."""

    def test_single_user_every_slot(self):
        """Test that one always-decoded user stays at age 1."""
        system = SystemConfig(classes=(ClassSpec(p=1.0, gamma=1.0),), alpha=0.9)
        metrics = simulate(SimConfig(system=system, n_users=1, horizon=100, seed=0))
        assert metrics.m == 1
        assert metrics.avg_age_per_user == 1.0

    def test_two_users_alternate(self, perfect_channel_config):
        """Test that two perfect-channel users alternate for an average of 1.5."""
        metrics = simulate(SimConfig(system=perfect_channel_config, n_users=2, horizon=100, seed=0))
        assert metrics.avg_age_per_user == 1.5
        assert metrics.burn_in_slots == 10
        assert metrics.avg_age_unburned < 1.5

    def test_deterministic(self, two_class_config):
        """Test that identical configs give identical metrics."""
        config = SimConfig(system=two_class_config, n_users=8, horizon=500, seed=42)
        a, b = simulate(config), simulate(config)
        assert a == b

    def test_seed_changes_path(self, two_class_config):
        """Test that different seeds give different averages."""
        a = simulate(SimConfig(system=two_class_config, n_users=8, horizon=500, seed=1))
        b = simulate(SimConfig(system=two_class_config, n_users=8, horizon=500, seed=2))
        assert a.avg_age_per_user != b.avg_age_per_user

    def test_budget_each_slot(self, two_class_config):
        """Test that Whittle scheduling transmits exactly M users per slot."""
        metrics = simulate(SimConfig(system=two_class_config, n_users=16, horizon=300, seed=3))
        assert metrics.scheduled_min == metrics.scheduled_max == 8
        assert metrics.utilization == 1.0

    def test_age_coherence(self, two_class_config):
        """Test that every age trajectory follows the age recursion."""
        run = SimRun(SimConfig(system=two_class_config, n_users=8, horizon=200, seed=9))
        for _ in range(200):
            before = run.ages.copy()
            scheduled = set(run.step().tolist())
            for u, (s, a) in enumerate(zip(before, run.ages)):
                if u in scheduled:
                    assert a in (1, s + 1)
                else:
                    assert a == s + 1

    def test_identical_classes_match_greedy(self):
        """Test that Whittle and max-age selection coincide for one class."""
        system = SystemConfig(classes=(ClassSpec(p=0.6, gamma=1.0),), alpha=0.25)
        whittle = SimRun(SimConfig(system=system, n_users=8, horizon=300, seed=4))
        greedy = SimRun(SimConfig(system=system, n_users=8, horizon=300, seed=4,
                                  policy=SchedulingPolicy.MAX_AGE))
        for _ in range(300):
            assert sorted(whittle.step().tolist()) == sorted(greedy.step().tolist())

    def test_not_below_relaxed_bound(self, two_class_config, two_class_solution):
        """Test that the Whittle average is at least C_RP - 3 SE across seeds."""
        configs = [SimConfig(system=two_class_config, n_users=16, horizon=10_000, seed=s) for s in range(4)]
        mean, se = mean_and_se([r.avg_age_per_user for r in run_many(configs)])
        assert mean >= two_class_solution.c_rp - 3 * se

    def test_mixed_threshold_meets_relaxed_cost(self, two_class_config, two_class_solution):
        """Test that the mixed-threshold average agrees with C_RP within 3 SE across seeds."""
        configs = [SimConfig(system=two_class_config, n_users=64, horizon=10_000, seed=s,
                             policy=SchedulingPolicy.MIXED_THRESHOLD) for s in range(16)]
        mean, se = mean_and_se([simulate(c, two_class_solution).avg_age_per_user for c in configs])
        assert se > 0
        assert abs(mean - two_class_solution.c_rp) <= 3 * se

    def test_mixed_threshold_proportions_match_fixed_point(self, two_class_config, two_class_solution):
        """Test that time-averaged proportions under mixed thresholds match z* within Monte-Carlo error."""
        configs = [SimConfig(system=two_class_config, n_users=64, horizon=5000, seed=s,
                             policy=SchedulingPolicy.MIXED_THRESHOLD, record_proportions=True,
                             proportion_sample_stride=1000) for s in range(8)]
        runs = [simulate(c, two_class_solution) for c in configs]
        for k, target in enumerate(two_class_solution.z_star):
            samples = np.array([head(r.mean_proportions[k], 8) for r in runs])
            mean = samples.mean(axis=0)
            se = samples.std(axis=0, ddof=1) / np.sqrt(len(runs))
            assert np.all(np.abs(mean - head(target, 8)) <= 4 * se + 2e-3)

    def test_mixed_threshold_policy(self, two_class_config, two_class_solution):
        """Test that the mixed-threshold average matches its stationary mean."""
        config = SimConfig(system=two_class_config, n_users=64, horizon=20_000, seed=5,
                           policy=SchedulingPolicy.MIXED_THRESHOLD, record_proportions=True,
                           proportion_sample_stride=1000)
        run = SimRun(config, two_class_solution)
        for _ in range(config.horizon):
            run.step()
        metrics = run.metrics()
        expected = np.mean([stationary_distribution(float(p), int(n)).mean_age()
                            for p, n in zip(run.layout.p, run.thresholds)])
        assert metrics.avg_age_per_user == pytest.approx(expected, abs=0.05)
        assert len(metrics.mean_proportions) == 2
        assert sum(v.sum() for v in metrics.mean_proportions) == pytest.approx(1.0)

    def test_run_many_sorted(self, two_class_config):
        """Test that pooled results come back sorted by N and seed."""
        configs = [SimConfig(system=two_class_config, n_users=n, horizon=50, seed=s)
                   for n in (8, 4) for s in (1, 0)]
        serial = run_many(configs, workers=1)
        assert [(r.n_users, r.seed) for r in serial] == [(4, 0), (4, 1), (8, 0), (8, 1)]
        assert run_many(configs, workers=2) == serial


class TestSnapshots:
    """Tests for sampled proportion snapshots."""

    def test_boundaries_reproduce_idle_mass(self, two_class_config):
        """Test that scheduled shares and boundaries match the budget at every sampled slot."""
        config = SimConfig(system=two_class_config, n_users=16, horizon=200, seed=6, record_proportions=True)
        metrics = simulate(config)
        assert len(metrics.snapshots) == 200
        for snap in metrics.snapshots:
            assert sum(snap.alpha_k) == pytest.approx(config.m / 16)
            idle = []
            for v, n, share in zip(snap.z, snap.l_k, snap.idle_share):
                idle.append(v[: n - 1].sum())
                idle.append(share * v[n - 1])
            assert sum(idle) == pytest.approx(1 - config.m / 16, abs=1e-12)
            assert sum(0.0 < s < 1.0 for s in snap.idle_share) <= 1

    def test_first_snapshot_is_on_fluid_path(self, two_class_config):
        """Test that slot 0 has no deviation from the fluid path and all mass at age 1."""
        metrics = simulate(SimConfig(system=two_class_config, n_users=8, horizon=20, seed=0,
                                     record_proportions=True, proportion_sample_stride=5))
        assert [s.t for s in metrics.snapshots] == [0, 5, 10, 15]
        first = metrics.snapshots[0]
        assert first.fluid_distance == 0.0
        rows = list(first.to_rows())
        assert [(r[1], r[2], r[3]) for r in rows] == [(1, 1, 0.5), (2, 1, 0.5)]

    def test_rows_cover_all_mass(self, two_class_config):
        """Test that each snapshot's rows hold the full unit mass."""
        metrics = simulate(SimConfig(system=two_class_config, n_users=8, horizon=50, seed=2,
                                     record_proportions=True, proportion_sample_stride=10))
        for snap in metrics.snapshots:
            rows = list(snap.to_rows())
            assert sum(r[3] for r in rows) == pytest.approx(1.0)
            assert {r[0] for r in rows} == {snap.t}
            assert len(rows[0]) == 11

    def test_schedule_boundaries(self, two_class_config):
        """Test boundaries for hand-picked ages and a scheduled set."""
        layout = UserLayout.from_config(two_class_config, 4)
        alpha_k, l_k, shares = schedule_boundaries(np.array([1, 1, 1, 3]), np.array([1, 3]), layout)
        assert alpha_k == (0.25, 0.25)
        assert l_k == (1, 2)
        assert shares == (0.5, 1.0)


class TestKurtz:
    """Tests for the concentration experiment."""

    def test_large_mu_never_exceeded(self, two_class_config):
        """Test that a huge deviation level is never reached."""
        _, rows = kurtz_experiment(two_class_config, [4, 8], horizon=20, seeds=range(5), mu=100.0)
        assert [r.exceed_prob for r in rows] == [0.0, 0.0]
        assert [r.n_users for r in rows] == [4, 8]

    def test_tiny_mu_always_exceeded(self, two_class_config):
        """Test that a tiny deviation level is always reached at small N."""
        _, rows = kurtz_experiment(two_class_config, [4], horizon=10, seeds=range(10), mu=1e-9)
        assert rows[0].exceed_prob == 1.0
        assert rows[0].n_times_prob == 4.0

    def test_default_mu(self, two_class_config):
        """Test that mu defaults to twice the median at the largest N."""
        mu, rows = kurtz_experiment(two_class_config, [4, 16], horizon=10, seeds=range(6))
        assert mu == pytest.approx(2 * rows[-1].median_deviation)


class TestMeanAndSe:
    """Tests for the seed aggregation helper."""

    def test_single_value(self):
        """Test that one value has zero standard error."""
        assert mean_and_se([2.0]) == (2.0, 0.0)

    def test_two_values(self):
        """Test mean and standard error of two values."""
        mean, se = mean_and_se([1.0, 3.0])
        assert mean == 2.0
        assert se == pytest.approx(1.0)
