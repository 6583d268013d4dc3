"""
Tests for config resolution, result persistence and the command-line application
"""

import csv
import json
import os
from unittest.mock import patch

import pytest
from typer.testing import CliRunner

from flatdiv.core.config import Settings
from flatdiv.core.error_handler import ConfigValidationError
from flatdiv.main import app
from flatdiv.models.configs import TheoryCurveConfig, VerifyConfig
from flatdiv.services.harness import (
    ResultWriter,
    config_hash,
    deep_merge,
    format_cell,
    parse_override,
    resolve_config,
)

runner = CliRunner()


@pytest.fixture
def settings():
    with patch.dict(os.environ, {}, clear=True):
        yield Settings(_env_file=None)


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def read_manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestConfigLayers:
    """Test preset, file, override and flag layering"""

    def test_parse_override_types(self):
        assert parse_override("sweep.k_values=[2,4]") == (["sweep", "k_values"], [2, 4])
        assert parse_override("curve.eta=0.05") == (["curve", "eta"], 0.05)
        assert parse_override("save_checkpoints=false") == (["save_checkpoints"], False)
        assert parse_override("output_dir=runs/a") == (["output_dir"], "runs/a")

    def test_parse_override_needs_equals(self):
        with pytest.raises(ConfigValidationError):
            parse_override("curve.eta")

    def test_deep_merge(self):
        base = {"curve": {"eta": 0.1, "k": 2}, "master_seed": 0}
        deep_merge(base, {"curve": {"k": 4}, "master_seed": 5})
        assert base == {"curve": {"eta": 0.1, "k": 4}, "master_seed": 5}

    def test_layer_order(self, settings, tmp_path):
        config_file = tmp_path / "curve.toml"
        config_file.write_text("master_seed = 9\n[curve]\nk = 4\neta = 0.05\n")
        config = resolve_config(TheoryCurveConfig, "theory-curve", preset="sam-only", config_file=config_file,
                                overrides=["curve.eta=0.02"], seed=11, settings=settings)
        assert config.curve.S == 1  # preset
        assert config.curve.k == 4  # file over preset
        assert config.curve.eta == 0.02  # override over file
        assert config.master_seed == 11  # flag over everything

    def test_stability_policy_from_settings(self, tmp_path):
        with patch.dict(os.environ, {"STABILITY_POLICY": "error"}, clear=True):
            settings = Settings(_env_file=None)
        config = resolve_config(VerifyConfig, "verify", settings=settings)
        assert config.sweep.stability_policy == "error"

    def test_invalid_value_lists_dotted_path(self, settings):
        with pytest.raises(ConfigValidationError) as exc_info:
            resolve_config(VerifyConfig, "verify", overrides=["sweep.k_values=[0]"], settings=settings)
        assert "sweep.k_values" in exc_info.value.message

    def test_unknown_key_rejected(self, settings):
        with pytest.raises(ConfigValidationError):
            resolve_config(TheoryCurveConfig, "theory-curve", overrides=["curve.etta=0.1"], settings=settings)

    def test_missing_config_file(self, settings, tmp_path):
        with pytest.raises(ConfigValidationError):
            resolve_config(TheoryCurveConfig, "theory-curve", config_file=tmp_path / "absent.toml",
                           settings=settings)

    def test_config_hash_ignores_construction_order(self, settings):
        first = resolve_config(TheoryCurveConfig, "theory-curve", overrides=["curve.k=3", "curve.eta=0.2"],
                               settings=settings)
        second = resolve_config(TheoryCurveConfig, "theory-curve", overrides=["curve.eta=0.2", "curve.k=3"],
                                settings=settings)
        assert config_hash(first) == config_hash(second)
        assert len(config_hash(first)) == 64


class TestResultWriter:
    """Test CSV/JSON persistence"""

    def test_format_cell(self):
        assert format_cell(None) == ""
        assert format_cell(True) == "true"
        assert format_cell(0.1) == "0.1"
        assert format_cell(1 / 3) == repr(1 / 3)

    def test_csv_rows_and_manifest_entry(self, tmp_path):
        writer = ResultWriter(tmp_path)
        writer.write_csv("table.csv", ["a", "b"], [[1, None], [0.5, False]])
        assert (tmp_path / "table.csv").read_bytes() == b"a,b\n1,\n0.5,false\n"
        assert writer.files[0].rows == 2
        assert len(writer.files[0].sha256) == 64

    def test_rewrite_replaces_manifest_entry(self, tmp_path):
        writer = ResultWriter(tmp_path)
        writer.write_json("x.json", {"a": 1})
        writer.write_json("x.json", {"a": 2})
        assert [f.path for f in writer.files] == ["x.json"]


class TestTheoryCurveCommand:
    """Test the theory-curve command"""

    def test_partitioned_preset(self, tmp_path):
        out = tmp_path / "curve"
        result = runner.invoke(app, ["theory-curve", "--preset", "partitioned", "--out", str(out)])

        assert result.exit_code == 0, result.output
        rows = read_csv(out / "theory_curve.csv")
        assert rows[0] == ["variant", "rho", "k", "diversity", "sharp_lower", "sharp_upper", "error"]
        assert len(rows) == 43
        assert {row[0] for row in rows[1:]} == {"SAM", "SharpBalance"}
        dominance = json.loads((out / "dominance.json").read_text())
        assert dominance["dominates"] is True
        assert dominance["strict_points"] == len(dominance["comparisons"]) > 0

        manifest = read_manifest(out)
        assert manifest["status"] == "succeeded"
        assert manifest["summary"]["dominates"] is True
        assert {f["path"] for f in manifest["files"]} == {"resolved_config.json", "theory_curve.csv",
                                                          "dominance.json"}

    def test_single_variant_skips_dominance(self, tmp_path):
        out = tmp_path / "sam"
        result = runner.invoke(app, ["theory-curve", "--preset", "sam-only", "--out", str(out)])

        assert result.exit_code == 0, result.output
        assert not (out / "dominance.json").exists()
        assert all(row[4] != "" for row in read_csv(out / "theory_curve.csv")[1:])

    def test_empty_rho_grid_is_validation_error(self, tmp_path):
        result = runner.invoke(app, ["theory-curve", "--set", "curve.rho_grid=[]", "--out", str(tmp_path)])

        assert result.exit_code == 1
        assert "VALIDATION_ERROR" in result.output

    def test_unknown_preset(self, tmp_path):
        result = runner.invoke(app, ["theory-curve", "--preset", "nope", "--out", str(tmp_path)])
        assert result.exit_code == 1

    def test_deterministic_output(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        for out in (first, second):
            runner.invoke(app, ["theory-curve", "--preset", "partitioned", "--out", str(out)])
        assert (first / "theory_curve.csv").read_bytes() == (second / "theory_curve.csv").read_bytes()
        assert read_manifest(first)["config_hash"] != ""


class TestVerifyCommand:
    """Test the verify command"""

    def test_same_seed_same_csv(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(app, ["verify", "--preset", "smoke", "--seed", "3", "--out", str(out)])
            assert result.exit_code in (0, 3), result.output
            outputs.append((out / "verification.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_manifest_records_outcome(self, tmp_path):
        out = tmp_path / "verify"
        result = runner.invoke(app, ["verify", "--preset", "smoke", "--out", str(out)])

        manifest = read_manifest(out)
        assert manifest["summary"]["cells"] == 1
        if result.exit_code == 0:
            assert manifest["status"] == "succeeded"
        else:
            assert result.exit_code == 3
            assert manifest["error"]["error"] == "VERIFICATION_FAILED"

    def test_unstable_step_recorded_as_failed_cell(self, tmp_path):
        out = tmp_path / "unstable"
        result = runner.invoke(app, ["verify", "--preset", "smoke", "--set", "sweep.eta_values=[1.0]",
                                     "--set", "sweep.stability_policy=\"error\"",
                                     "--set", "sweep.skip_noncontracting=false", "--out", str(out)])

        assert result.exit_code == 3
        rows = read_csv(out / "verification.csv")
        assert rows[1][-1].startswith("UNSTABLE_STEP")
        assert rows[1][-2] == "false"

    def test_noncontracting_cell_skipped_without_failing(self, tmp_path):
        out = tmp_path / "skipped"
        result = runner.invoke(app, ["verify", "--preset", "smoke", "--set", "sweep.eta_values=[1.0]",
                                     "--out", str(out)])

        assert result.exit_code == 0, result.output
        header, row = read_csv(out / "verification.csv")
        assert row[header.index("skipped")] == "true"
        assert row[header.index("pass")] == "false"
        assert row[-1].startswith("SKIPPED")
        summary = read_manifest(out)["summary"]
        assert summary["skipped_cells"] == [0]
        assert summary["failed_cells"] == []


class TestTrainAndMeasureCommands:
    """Test training runs and re-measurement from checkpoints"""

    SMOKE_OVERRIDES = ["--set", "ensemble.epochs=2", "--set", "sharpness.n_batches=3"]

    @pytest.mark.slow
    def test_train_then_measure(self, tmp_path):
        out = tmp_path / "train"
        result = runner.invoke(app, ["train", "--preset", "smoke", *self.SMOKE_OVERRIDES, "--out", str(out)])

        assert result.exit_code == 0, result.output
        assert len(read_csv(out / "ensembles.csv")) == 2
        checkpoints = sorted((out / "checkpoints").glob("*.fdck"))
        assert len(checkpoints) == 2
        metrics_file = out / "metrics" / "sgd_rho0p0_e0.json"
        assert "id_accuracy" in json.loads(metrics_file.read_text())["metrics"]

        listed = ", ".join(f'"{path}"' for path in checkpoints)
        config_file = tmp_path / "measure.toml"
        config_file.write_text(
            f"checkpoints = [{listed}]\n"
            "[task]\nn_train = 500\nn_test = 300\nseparation = 6.0\n"
            "[sharpness]\nn_batches = 3\n"
        )
        measured = tmp_path / "measure"
        result = runner.invoke(app, ["measure", "--config", str(config_file), "--out", str(measured)])

        assert result.exit_code == 0, result.output
        report = json.loads((measured / "measurements.json").read_text())
        assert report["member_count"] == 2
        assert "sharpness_l2_adaptive_mean" in report["metrics"]

    def test_measure_missing_checkpoint(self, tmp_path):
        result = runner.invoke(app, ["measure", "--set", f'checkpoints=["{tmp_path / "absent.fdck"}"]',
                                     "--out", str(tmp_path / "measure")])

        assert result.exit_code == 2
        assert "CHECKPOINT_MISMATCH" in result.output

    def test_measure_requires_checkpoints(self, tmp_path):
        result = runner.invoke(app, ["measure", "--out", str(tmp_path)])
        assert result.exit_code == 1


class TestUtilityCommands:
    def test_presets(self):
        result = runner.invoke(app, ["presets"])
        assert result.exit_code == 0
        assert "partitioned" in result.output

    def test_version(self):
        from flatdiv import __version__

        result = runner.invoke(app, ["version"])
        assert __version__ in result.output
