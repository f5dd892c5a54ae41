"""Tests for the command-line entry point."""

import json

import pytest

from aoi_whittle.main import (
    EXIT_ACCEPTANCE,
    EXIT_OK,
    EXIT_VALIDATION,
    build_parser,
    main,
    spec_from_args,
)
from aoi_whittle.errors import InvalidParameterError
from aoi_whittle.experiment_spec import ExperimentKind


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path), "--no-timestamp", "--workers", "1"])


class TestParser:
    """Tests for argument parsing."""

    def test_defaults(self):
        """Test the default two-class system."""
        args = build_parser().parse_args(["relaxed"])
        spec = spec_from_args(args)
        assert spec.kind is ExperimentKind.RELAXED_SOLVE
        assert spec.system.ps == (0.8, 0.5)
        assert spec.system.gammas == (0.5, 0.5)
        assert spec.system.alpha == 0.5

    def test_seed_range(self):
        """Test that --seeds counts from --seed."""
        args = build_parser().parse_args(["compare", "--seed", "3", "--seeds", "2", "--n-list", "8"])
        assert spec_from_args(args).sweep.seeds == (3, 4)

    def test_bad_pair(self):
        """Test that a malformed probability pair is a validation error."""
        with pytest.raises(InvalidParameterError):
            build_parser().parse_args(["balpha", "--pairs", "0.5"])

    def test_preset_alias(self):
        """Test that --published sets the same option as --paper."""
        parser = build_parser()
        assert parser.parse_args(["balpha", "--paper"]).published
        assert parser.parse_args(["balpha", "--published"]).published
        assert not parser.parse_args(["balpha"]).published


class TestExitCodes:
    """Tests for subcommand exit codes."""

    def test_balpha_check_passes(self, tmp_path):
        """Test that the published table passes its check."""
        assert run(tmp_path, "balpha", "--paper", "--check") == EXIT_OK
        assert (tmp_path / "balpha.csv").exists()
        assert len((tmp_path / "balpha.csv").read_text().splitlines()) == 11

    def test_malformed_pair_exit_code(self, tmp_path):
        """Test that a malformed --pairs value exits with the validation code."""
        assert run(tmp_path, "balpha", "--pairs", "0.5") == EXIT_VALIDATION

    def test_unknown_flag_exit_code(self, tmp_path):
        """Test that an unknown flag exits with the validation code."""
        assert run(tmp_path, "relaxed", "--no-such-flag") == EXIT_VALIDATION

    def test_relaxed_single_class(self, tmp_path):
        """Test a single perfect-channel class."""
        assert run(tmp_path, "relaxed", "--p", "1.0", "--alpha", "0.5", "--check") == EXIT_OK
        meta = json.loads((tmp_path / "zstar.meta.json").read_text())
        assert meta["c_rp"] == pytest.approx(1.5)

    def test_misordered_probabilities(self, tmp_path):
        """Test that p_1 <= p_2 is a validation error."""
        assert run(tmp_path, "relaxed", "--p", "0.5", "0.8") == EXIT_VALIDATION

    def test_share_count_mismatch(self, tmp_path):
        """Test that mismatched --p and --gamma lengths are a validation error."""
        assert run(tmp_path, "relaxed", "--p", "0.8", "0.5", "--gamma", "1.0") == EXIT_VALIDATION

    def test_config_kind_mismatch(self, tmp_path):
        """Test that a config file for another command is rejected."""
        path = tmp_path / "exp.json"
        path.write_text('{"kind": "balpha_table", "balpha": {"published": true}}')
        assert run(tmp_path, "relaxed", "--config", str(path)) == EXIT_VALIDATION

    def test_config_file(self, tmp_path):
        """Test that a matching config file drives the run."""
        path = tmp_path / "exp.json"
        path.write_text('{"kind": "balpha_table", "balpha": {"pairs": [[0.2, 0.4]]}}')
        assert run(tmp_path, "balpha", "--config", str(path)) == EXIT_OK
        lines = (tmp_path / "balpha.csv").read_text().splitlines()
        assert len(lines) == 2

    def test_failed_check(self, tmp_path):
        """Test that a run too short to reach the bound exits with the acceptance code."""
        code = run(tmp_path, "compare", "--n-list", "4", "8", "--horizon", "1", "--seeds", "2", "--check")
        assert code == EXIT_ACCEPTANCE

    def test_round_robin_passes_check(self, tmp_path):
        """Test that a policy sitting exactly on the bound passes the compare check."""
        code = run(tmp_path, "compare", "--p", "1.0", "--alpha", "0.5",
                   "--n-list", "2", "4", "--horizon", "100", "--seeds", "1", "--check")
        assert code == EXIT_OK

    def test_fluid_from_zstar(self, tmp_path):
        """Test a fluid run from z* with its check."""
        assert run(tmp_path, "fluid", "--init", "zstar", "--horizon", "30", "--check") == EXIT_OK
        assert (tmp_path / "fluid_trajectory.csv").exists()

    def test_missing_init_file(self, tmp_path):
        """Test that --init file without a path is a validation error."""
        assert run(tmp_path, "fluid", "--init", "file") == EXIT_VALIDATION

    def test_reruns_are_byte_identical(self, tmp_path):
        """Test that two runs without timestamps write identical files."""
        argv = ("compare", "--n-list", "4", "--horizon", "200", "--seeds", "2")
        assert run(tmp_path / "a", *argv) == EXIT_OK
        assert run(tmp_path / "b", *argv) == EXIT_OK
        for name in ("sim_metrics.csv", "sim_metrics.meta.json", "compare_summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
