import csv
import json

import pytest

from popcal.cli import main as cli_main
from popcal.pipeline import ConfigError, DependencyError, PipelineConfig, run_stage

SYNTH_TOML = """\
[run]
out_dir = "{out_dir}"

[synth]
n_samples = 300
seed = 0

[analysis]
n_bins = 5

[calibration]
seeds = [0, 42]
epochs = 4
"""


def write_synth_config(tmp_path, out_dir="run"):
    cfg = tmp_path / "config.toml"
    cfg.write_text(SYNTH_TOML.format(out_dir=out_dir))
    return cfg


def run_chain(config, stages):
    for stage in stages:
        run_stage(config, stage)


class TestStageGraph:
    def test_correlate_before_generate_names_generate(self, tmp_path):
        cfg_path = tmp_path / "config.toml"
        cfg_path.write_text('[run]\nout_dir = "run"\n\n[analysis]\nn_bins = 5\n')
        config = PipelineConfig.load(cfg_path)
        with pytest.raises(DependencyError) as err:
            run_stage(config, "correlate")
        assert err.value.stage_to_run == "generate"

    def test_correlate_before_synth_names_synth(self, tmp_path):
        config = PipelineConfig.load(write_synth_config(tmp_path))
        with pytest.raises(DependencyError) as err:
            run_stage(config, "correlate")
        assert err.value.stage_to_run == "synth"

    def test_report_before_calibrate(self, tmp_path):
        config = PipelineConfig.load(write_synth_config(tmp_path))
        run_stage(config, "synth")
        run_stage(config, "correlate")
        with pytest.raises(DependencyError) as err:
            run_stage(config, "report")
        assert err.value.stage_to_run == "calibrate"

    def test_unknown_stage_rejected(self, tmp_path):
        config = PipelineConfig.load(write_synth_config(tmp_path))
        with pytest.raises(ConfigError):
            run_stage(config, "nonsense")


class TestMemoization:
    def test_rerun_skips_and_notes_cache_hit(self, tmp_path):
        config = PipelineConfig.load(write_synth_config(tmp_path))
        run_stage(config, "synth")
        first = (config.run_dir / "qarecords.jsonl").read_bytes()
        run_stage(config, "synth")
        manifest = json.loads((config.run_dir / "manifest.json").read_text())
        assert manifest["stages"]["synth"]["cache_hits"] == 1
        assert (config.run_dir / "qarecords.jsonl").read_bytes() == first

    def test_config_change_invalidates(self, tmp_path):
        cfg_path = write_synth_config(tmp_path)
        config = PipelineConfig.load(cfg_path)
        run_stage(config, "synth")
        cfg_path.write_text(cfg_path.read_text().replace("n_samples = 300", "n_samples = 301"))
        config2 = PipelineConfig.load(cfg_path)
        run_stage(config2, "synth")
        manifest = json.loads((config2.run_dir / "manifest.json").read_text())
        assert manifest["stages"]["synth"]["cache_hits"] == 0

    def test_deleted_output_rebuilds(self, tmp_path):
        config = PipelineConfig.load(write_synth_config(tmp_path))
        run_stage(config, "synth")
        (config.run_dir / "popularity.jsonl").unlink()
        run_stage(config, "synth")
        assert (config.run_dir / "popularity.jsonl").exists()


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("chain")
    config = PipelineConfig.load(write_synth_config(tmp_path))
    run_chain(config, ["synth", "correlate", "calibrate", "report"])
    return config


class TestSyntheticChain:
    def test_all_stage_artifacts_present(self, finished_run):
        run_dir = finished_run.run_dir
        for name in (
            "qarecords.jsonl",
            "popularity.jsonl",
            "synth_params.json",
            "correlation.csv",
            "correlation.json",
            "table4.csv",
            "flip_details.json",
            "manifest.json",
        ):
            assert (run_dir / name).exists(), name

    def test_report_files_and_headers(self, finished_run):
        report_dir = finished_run.run_dir / "report"
        with open(report_dir / "table2.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["kind", "signal", "outcome", "value"]
        assert len(rows) > 15
        with open(report_dir / "table4.csv") as f:
            header = next(csv.reader(f))
        assert header[0] == "row"
        assert "corpus_seed_0" in header and "corpus_mean" in header
        svgs = list(report_dir.glob("curve_*.svg"))
        assert svgs, "expected at least one rendered curve"
        for svg in svgs:
            text = svg.read_text()
            assert text.startswith("<svg") and "polyline" in text
        assert (report_dir / "flips.csv").exists()

    def test_flip_groups_follow_definitions(self, finished_run):
        with open(finished_run.run_dir / "report" / "flips.csv") as f:
            rows = list(csv.DictReader(f))
        for row in rows:
            if row["group"] == "Overc.":
                assert row["label"] == "0" and row["base_prediction"] == "1"
                assert row["augmented_prediction"] == "0"
            else:
                assert row["group"] == "Conse."
                assert row["label"] == "1" and row["base_prediction"] == "0"
                assert row["augmented_prediction"] == "1"

    def test_binned_curve_counts_partition(self, finished_run):
        with open(finished_run.run_dir / "curve_RPop_Ge.csv") as f:
            rows = list(csv.DictReader(f))
        assert sum(int(r["count"]) for r in rows) == 300

    def test_correlation_json_structure(self, finished_run):
        payload = json.loads((finished_run.run_dir / "correlation.json").read_text())
        assert set(payload) == {"mean_accuracy", "mean_confidence", "mean_alignment", "rho"}
        assert "RPop_Ge" in payload["rho"]


class TestByteDeterminism:
    def test_two_runs_identical_artifacts(self, tmp_path):
        cfg_a = write_synth_config(tmp_path, out_dir="run_a")
        config_a = PipelineConfig.load(cfg_a)
        run_chain(config_a, ["synth", "correlate", "calibrate", "report"])
        cfg_b = write_synth_config(tmp_path, out_dir="run_b")
        config_b = PipelineConfig.load(cfg_b)
        run_chain(config_b, ["synth", "correlate", "calibrate", "report"])
        for rel in (
            "qarecords.jsonl",
            "popularity.jsonl",
            "correlation.csv",
            "table4.csv",
            "report/table2.csv",
            "report/table4.csv",
            "report/flips.csv",
        ):
            a = (config_a.run_dir / rel).read_bytes()
            b = (config_b.run_dir / rel).read_bytes()
            assert a == b, rel


class TestCli:
    def test_missing_config_is_config_error(self, tmp_path):
        assert cli_main(["synth", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_dependency_error_exit_code(self, tmp_path):
        cfg = write_synth_config(tmp_path)
        assert cli_main(["correlate", "--config", str(cfg)]) == 3

    def test_full_chain_via_cli(self, tmp_path, capsys):
        cfg = write_synth_config(tmp_path)
        for stage in ("synth", "correlate", "calibrate", "report"):
            assert cli_main([stage, "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "table4.csv" in out

    def test_report_from_run_dir(self, tmp_path):
        cfg = write_synth_config(tmp_path)
        for stage in ("synth", "correlate", "calibrate"):
            assert cli_main([stage, "--config", str(cfg)]) == 0
        run_dir = tmp_path / "run"
        assert cli_main(["report", "--run", str(run_dir)]) == 0
        assert (run_dir / "report" / "table4.csv").exists()

    def test_scan_direct_mode(self, tmp_path, capsys):
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text(
            json.dumps({"id": 0, "text": "Inception premiered"})
            + "\n"
            + json.dumps({"id": 1, "text": "nothing"})
            + "\n"
        )
        catalog = tmp_path / "catalog.jsonl"
        catalog.write_text(json.dumps({"id": "Q1", "label": "Inception"}) + "\n")
        out = tmp_path / "occ.idx"
        code = cli_main(
            [
                "scan",
                "--corpus", str(corpus),
                "--catalog", str(catalog),
                "--out", str(out),
                "--workers", "2",
            ]
        )
        assert code == 0
        assert out.exists() and (tmp_path / "occ.idx.manifest.json").exists()

    def test_scan_direct_missing_args(self):
        assert cli_main(["scan", "--corpus", "/nonexistent"]) == 2
