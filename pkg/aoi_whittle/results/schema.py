"""
Result File Layouts
Column headers of every CSV the harness writes.
"""

# =============================================================================
# 1. FLUID TRAJECTORY - one row per (slot, class, age) with nonzero mass
# =============================================================================
FLUID_TRAJECTORY = (
    "t", "class", "age", "mass",
    "alpha_1", "alpha_2", "l_1", "l_2", "beta", "gamma",
    "norm_to_zstar",
)

# =============================================================================
# 2. SIMULATION METRICS - one row per (N, seed) run
# =============================================================================
SIM_METRICS = (
    "N", "seed", "policy", "horizon",
    "avg_age_per_user", "c_rp", "gap", "exceed_prob",
)

# =============================================================================
# 3. COMPARE SUMMARY - one row per N, aggregated over seeds
# =============================================================================
COMPARE_SUMMARY = (
    "N", "seeds", "mean_avg_age", "se_avg_age", "c_rp", "gap", "rel_gap",
)

# =============================================================================
# 4. B_ALPHA TABLE - one row per probability pair
# =============================================================================
BALPHA_TABLE = (
    "p_lo", "p_hi", "D", "B_alpha", "printed", "match",
)

# =============================================================================
# 5. KURTZ - one row per N
# =============================================================================
KURTZ = (
    "N", "runs", "mu", "exceed_prob", "N_times_prob", "median_deviation",
)

# =============================================================================
# 6. RELAXED SOLUTION - z* per (class, age)
# =============================================================================
ZSTAR = (
    "class", "age", "mass",
)

# =============================================================================
# 7. SIMULATION SNAPSHOTS - Z^N(t) of one run per N, fluid trajectory layout
# =============================================================================
SIM_SNAPSHOTS = ("N", "seed", *FLUID_TRAJECTORY)
