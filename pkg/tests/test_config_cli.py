from __future__ import annotations

import json
from pathlib import Path

import pytest

from triagebench.cli import main
from triagebench.config import ConfigError, load_config, require_valid
from triagebench.runner import Runner
from triagebench.util import file_sha256


def write_config(path: Path, out_dir: Path, extra: str = "", n: int = 400,
                 strategies: str = "  - kind: zero_shot_vanilla\n") -> Path:
    path.write_text(
        f"""
seed: 42
output_dir: {out_dir}
protocol: ESI
dataset:
  source: synthetic
  n: {n}
  missingness: 0.15
split:
  train_years: [2014, 2016]
  test_years: [2017, 2019]
  train_n: 120
  test_n: 40
serialization:
  style: natural
strategies:
{strategies}endpoint:
  base_url: "mock:rule-based"
  model_name: rule-based
embeddings:
  dim: 8
audit:
  bonferroni_m: 10
  max_records: 20
{extra}
""",
        "utf-8",
    )
    return path


class TestConfigValidation:
    def test_valid_config_no_findings(self, tmp_path):
        config_path = write_config(tmp_path / "c.yaml", tmp_path / "out")
        config, findings = load_config(config_path)
        assert findings == []
        assert config.seed == 42

    def test_missing_dataset_path_finding(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(
            """
seed: 1
output_dir: out
dataset:
  source: file
  path: /nonexistent/data.csv
strategies:
  - kind: zero_shot_vanilla
endpoint:
  base_url: "mock:rule-based"
""",
            "utf-8",
        )
        _, findings = load_config(path)
        assert any(f.key == "dataset.path" for f in findings)

    def test_unknown_strategy_lists_valid_names(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml", tmp_path / "out", strategies="  - kind: mystery_mode\n"
        )
        _, findings = load_config(config_path)
        finding = next(f for f in findings if "mystery_mode" in f.message)
        assert "kate" in finding.message
        assert "zero_shot_vanilla" in finding.message

    def test_sweep_must_strictly_increase(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml", tmp_path / "out", extra="sweep:\n  shots: [5, 5, 10]\n"
        )
        _, findings = load_config(config_path)
        assert any(f.key == "sweep.shots" for f in findings)

    def test_require_valid_raises(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml", tmp_path / "out", strategies="  - kind: nope\n"
        )
        config, findings = load_config(config_path)
        with pytest.raises(ConfigError):
            require_valid(config, findings)

    def test_strategy_endpoint_reference_checked(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml",
            tmp_path / "out",
            strategies="  - kind: zero_shot_vanilla\n    endpoint: missing_one\n",
        )
        _, findings = load_config(config_path)
        assert any("missing_one" in f.message for f in findings)

    def test_bad_demographic_template(self, tmp_path):
        extra = (
            "ignored: 0\n"
        )
        path = tmp_path / "c.yaml"
        path.write_text(
            f"""
seed: 1
output_dir: {tmp_path / 'out'}
dataset: {{source: synthetic, n: 50}}
serialization:
  include_demographics: true
  demographic_template: "A {{race}} patient."
strategies:
  - kind: zero_shot_vanilla
endpoint:
  base_url: "mock:rule-based"
{extra}
""",
            "utf-8",
        )
        _, findings = load_config(path)
        assert any("{sex}" in f.message for f in findings)


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        config_path = write_config(tmp_path / "c.yaml", tmp_path / "out")
        assert main(["validate", "-c", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "0 findings" in out
        assert "resolved config" in out

    def test_validate_reports_findings(self, tmp_path, capsys):
        config_path = write_config(
            tmp_path / "c.yaml", tmp_path / "out", strategies="  - kind: nope\n"
        )
        assert main(["validate", "-c", str(config_path)]) == 1
        assert "finding:" in capsys.readouterr().out

    def test_ingest_maps_and_reports(self, tmp_path, capsys):
        foreign = tmp_path / "foreign.csv"
        foreign.write_text(
            "subject,year,complaint,esi\n"
            "s1,2015,belly pain,4\n"
            "s2,2015,chest pain,9\n",
            "utf-8",
        )
        config_path = tmp_path / "c.yaml"
        config_path.write_text(
            f"""
seed: 1
output_dir: {tmp_path / 'out'}
dataset:
  source: file
  path: {foreign}
  schema_map:
    subject: id
    year: cohort_year
    complaint: chief_complaint
    esi: acuity
train_path: {foreign}
test_path: {foreign}
strategies:
  - kind: zero_shot_vanilla
endpoint:
  base_url: "mock:rule-based"
""",
            "utf-8",
        )
        out_csv = tmp_path / "canonical.csv"
        assert main(["ingest", "-c", str(config_path), "--output", str(out_csv)]) == 0
        printed = capsys.readouterr().out
        assert "InvalidAcuity" in printed
        assert "wrote 1 records" in printed
        assert out_csv.read_text("utf-8").splitlines()[1].startswith("s1,2015")

    def test_evaluate_cli(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        assert main(["evaluate", "-c", str(config_path)]) == 0
        printed = capsys.readouterr().out
        assert "QWK" in printed
        assert (out_dir / "manifest_evaluate.json").exists()


class TestManifest:
    def test_lists_every_emitted_file(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        config, findings = load_config(config_path)
        manifest_path = Runner(config, findings).evaluate()
        manifest = json.loads(manifest_path.read_text("utf-8"))
        for entry in manifest["files"]:
            target = out_dir / entry["path"]
            assert target.exists()
            assert file_sha256(target) == entry["sha256"]
        listed = {e["path"] for e in manifest["files"]}
        assert "reports/metrics.txt" in listed
        assert "reports/level_distribution.csv" in listed
        assert "figures/level_distribution.png" in listed

    def test_deleted_file_regenerated_identically(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        config, findings = load_config(config_path)
        manifest1 = json.loads(Runner(config, findings).evaluate().read_text("utf-8"))

        victim = out_dir / "reports" / "metrics.txt"
        original_hash = file_sha256(victim)
        victim.unlink()

        manifest2 = json.loads(Runner(config, findings).evaluate().read_text("utf-8"))
        assert victim.exists()
        assert file_sha256(victim) == original_hash
        assert manifest1["content_hash"] == manifest2["content_hash"]

    def test_audit_manifest(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        config, findings = load_config(config_path)
        manifest_path = Runner(config, findings).audit()
        manifest = json.loads(manifest_path.read_text("utf-8"))
        listed = {e["path"] for e in manifest["files"]}
        assert "reports/audit.txt" in listed
        assert "reports/audit_cells.csv" in listed
        assert any(p.startswith("figures/audit_heatmap") for p in listed)

    def test_report_rerenders(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        config, findings = load_config(config_path)
        runner = Runner(config, findings)
        runner.evaluate()
        table = out_dir / "reports" / "metrics.txt"
        before = table.read_text("utf-8")
        table.unlink()
        rendered = Runner(config, findings).report()
        assert table in rendered
        assert table.read_text("utf-8") == before


class TestEvaluateSemantics:
    def test_mock_and_synthetic_reach_perfect_accuracy(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(tmp_path / "c.yaml", out_dir)
        config, findings = load_config(config_path)
        Runner(config, findings).evaluate()
        report = json.loads(
            (out_dir / "reports" / "metrics_zero_shot_vanilla.json").read_text("utf-8")
        )
        # The generator labels records with the same rule the mock applies.
        assert report["accuracy"] == 1.0
        assert report["qwk"] == 1.0
        assert report["mse"] == 0.0
        assert report["excluded_count"] == 0

    def test_two_strategies_two_rows_one_manifest(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(
            tmp_path / "c.yaml",
            out_dir,
            strategies="  - kind: zero_shot_vanilla\n  - kind: zero_shot_cot\n",
        )
        config, findings = load_config(config_path)
        manifest_path = Runner(config, findings).evaluate()
        table = (out_dir / "reports" / "metrics.txt").read_text("utf-8").splitlines()
        assert len(table) == 2 + 2  # header + rule + one row per strategy
        assert manifest_path.name == "manifest_evaluate.json"

    def test_fine_tuned_external_routes_to_named_endpoint(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = tmp_path / "c.yaml"
        config_path.write_text(
            f"""
seed: 7
output_dir: {out_dir}
protocol: ESI
dataset: {{source: synthetic, n: 300}}
split:
  train_years: [2014, 2016]
  test_years: [2017, 2019]
  train_n: 100
  test_n: 20
strategies:
  - kind: fine_tuned_external
    endpoint: tuned
endpoints:
  default:
    base_url: "mock:rule-based"
    model_name: rule-based
  tuned:
    base_url: "mock:biased"
    model_name: tuned-variant
    mock:
      kind: biased
      bias_offsets: {{"Male|White": 1.0}}
      bias_application_rate: 0.0
""",
            "utf-8",
        )
        config, findings = load_config(config_path)
        assert findings == []
        Runner(config, findings).evaluate()
        report = json.loads(
            (out_dir / "reports" / "metrics_fine_tuned_external.json").read_text("utf-8")
        )
        # Rate 0 leaves the rule intact, so routing still scores perfectly;
        # the point is that the strategy ran against the "tuned" endpoint.
        assert report["n"] == 20


class TestConfigKnobs:
    def test_audit_requires_flag(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(
            f"""
seed: 1
output_dir: {tmp_path / 'out'}
dataset: {{source: synthetic, n: 100}}
strategies:
  - kind: zero_shot_vanilla
endpoint:
  base_url: "mock:rule-based"
""",
            "utf-8",
        )
        config, findings = load_config(path)
        assert config.audit.enabled is False
        with pytest.raises(ValueError, match="audit is not enabled"):
            Runner(config, findings).audit()

    def test_audit_section_enables(self, tmp_path):
        config_path = write_config(tmp_path / "c.yaml", tmp_path / "out")
        config, _ = load_config(config_path)
        assert config.audit.enabled is True

    def test_cli_flag_overrides(self, tmp_path):
        config_path = write_config(tmp_path / "c.yaml", tmp_path / "out")
        config, _ = load_config(
            config_path, overrides={"seed": 99, "output_dir": str(tmp_path / "other")}
        )
        assert config.seed == 99
        assert config.output_dir == str(tmp_path / "other")

    def test_text_source_validated(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml", tmp_path / "out",
            extra="embeddings_override: ignored\n",
        )
        config, findings = load_config(config_path)
        assert findings == []
        bad = tmp_path / "bad.yaml"
        bad.write_text(
            config_path.read_text("utf-8").replace(
                "embeddings:\n  dim: 8", "embeddings:\n  dim: 8\n  text_source: bogus"
            ),
            "utf-8",
        )
        _, findings = load_config(bad)
        assert any(f.key == "embeddings.text_source" for f in findings)

    def test_full_record_text_source_runs(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(
            tmp_path / "c.yaml",
            out_dir,
            strategies="  - kind: kate\n    shots: 2\n",
            extra="",
        )
        text = config_path.read_text("utf-8").replace(
            "embeddings:\n  dim: 8", "embeddings:\n  dim: 8\n  text_source: full_record"
        )
        config_path.write_text(text, "utf-8")
        config, findings = load_config(config_path)
        Runner(config, findings).evaluate()
        assert (out_dir / "reports" / "metrics_kate-2.json").exists()


class TestSweepCli:
    def test_sweep_shapes(self, tmp_path):
        out_dir = tmp_path / "out"
        config_path = write_config(
            tmp_path / "c.yaml",
            out_dir,
            strategies="  - kind: kate\n    shots: 2\n  - kind: few_shot\n    shots: 2\n",
            extra="sweep:\n  shots: [2, 3, 4]\n",
        )
        config, findings = load_config(config_path)
        Runner(config, findings).sweep_shots()
        rows = (out_dir / "reports" / "sweep_shots.csv").read_text("utf-8").splitlines()
        assert len(rows) == 1 + 6  # header + 2 strategies x 3 shot counts
        assert (out_dir / "figures" / "shots_sweep.png").exists()

    def test_sweep_rejects_zero_shot(self, tmp_path):
        config_path = write_config(
            tmp_path / "c.yaml",
            tmp_path / "out",
            extra="sweep:\n  shots: [2, 3]\n",
        )
        config, findings = load_config(config_path)
        with pytest.raises(ValueError):
            Runner(config, findings).sweep_shots()
