import json

import numpy as np
import pytest
from click.testing import CliRunner

from pipeshift import campaign as camp
from pipeshift import cli, scoring
from pipeshift.archive import read_manifest
from pipeshift.errors import ConfigError


def base_config(out, **overrides):
    doc = {
        "dataset": {"source": "phantoms", "n": 4, "seed": 3, "modality": "mri-like"},
        "scorer": {"backend": "synthetic", "seed": 11},
        "tau": [0.8],
        "optimizer": "random",
        "budget": 4,
        "seed": 99,
        "out": str(out),
    }
    doc.update(overrides)
    return camp.CampaignConfig.from_dict(doc)


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            camp.CampaignConfig.from_dict({"dataset": {}, "scorer": {}, "bogus": 1})

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            base_config("x", tau=[1.5])

    def test_empty_families(self):
        with pytest.raises(ConfigError):
            base_config("x", families=[])

    def test_bad_optimizer(self):
        with pytest.raises(ConfigError):
            base_config("x", optimizer="sgd")

    def test_scalar_tau_promoted(self):
        cfg = base_config("x", tau=0.9)
        assert cfg.tau == [0.9]


class TestIngest:
    def test_phantom_balance_and_ordering(self, tmp_path):
        cfg = base_config(tmp_path, dataset={"source": "phantoms", "n": 10, "seed": 1})
        samples = camp.ingest_dataset(cfg)
        assert len(samples) == 10
        assert sum(s.label for s in samples) == 5
        assert [s.sample_id for s in samples] == sorted(s.sample_id for s in samples)

    def test_directory_round_trip(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(cli.main, ["gen-phantoms", "--n", "6", "--seed", "2",
                                          "--out", str(tmp_path / "ds")])
        assert result.exit_code == 0, result.output
        cfg = base_config(tmp_path / "run", dataset={
            "source": "directory", "path": str(tmp_path / "ds"),
            "labels": str(tmp_path / "ds" / "labels.csv"),
        })
        samples = camp.ingest_dataset(cfg)
        assert len(samples) == 6
        reread = camp.ingest_dataset(cfg)
        assert [s.sample_id for s in samples] == [s.sample_id for s in reread]
        phantoms = scoring.gen_phantoms(6, 2)
        # 16-bit PNG round trip: intensities preserved to half a step.
        assert np.abs(samples[0].image - phantoms[0].image).max() <= 0.5 / 65535 + 1e-7

    def test_bad_label_rejected(self, tmp_path):
        ds = tmp_path / "ds"
        ds.mkdir()
        (ds / "labels.csv").write_text("id,path,label\na,missing.png,2\n")
        cfg = base_config(tmp_path, dataset={"source": "directory", "path": str(ds)})
        with pytest.raises(ConfigError, match="label"):
            camp.ingest_dataset(cfg)


class TestRunCampaign:
    def test_archive_and_round_trip(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        root = camp.run_campaign(cfg)
        pairs, errors = read_manifest(root)
        assert errors == []
        assert len(pairs) == 4
        summary_before = (root / "summary.csv").read_bytes()
        family_before = (root / "family_success.csv").read_bytes()
        camp.write_summaries(root)
        assert (root / "summary.csv").read_bytes() == summary_before
        assert (root / "family_success.csv").read_bytes() == family_before

    def test_decoded_png_objective_close(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        root = camp.run_campaign(cfg)
        _, docs = zip(*read_manifest(root)[0])
        for doc in docs:
            assert abs(doc["j_adv_png"] - doc["j_adv"]) <= 2e-3

    def test_verify_archive_clean(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        root = camp.run_campaign(cfg)
        count, problems = camp.verify_archive(root)
        assert count == 4
        assert problems == []

    def test_verify_flags_tampering(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        root = camp.run_campaign(cfg)
        victim = next((root / "images").glob("*_adv.png"))
        data = bytearray(victim.read_bytes())
        data[-1] ^= 0xFF
        victim.write_bytes(bytes(data))
        _, problems = camp.verify_archive(root)
        assert any("hash mismatch" in p for p in problems)

    def test_noop_campaign_preserves_accuracy(self, tmp_path):
        cfg = base_config(
            tmp_path / "noop",
            budget=1,
            families=["A"],
            domains={"a_gain": [0.0, 0.0]},
        )
        root = camp.run_campaign(cfg)
        pairs, _ = read_manifest(root)
        for rec, _ in pairs:
            assert rec.j_adv == rec.j_clean
            assert rec.success is False

    def test_workers_do_not_change_bytes(self, tmp_path):
        cfg1 = base_config(tmp_path / "w1", workers=1)
        cfg2 = base_config(tmp_path / "w2", workers=2)
        root1 = camp.run_campaign(cfg1)
        root2 = camp.run_campaign(cfg2)
        assert (root1 / "manifest.jsonl").read_bytes() == (root2 / "manifest.jsonl").read_bytes()

    def test_multi_tau(self, tmp_path):
        cfg = base_config(tmp_path / "run", tau=[0.9, 0.8], budget=2)
        root = camp.run_campaign(cfg)
        pairs, _ = read_manifest(root)
        assert len(pairs) == 8
        taus = {rec.tau for rec, _ in pairs}
        assert taus == {0.9, 0.8}


class TestBudgetCurve:
    def test_nested_trace_monotone(self, tmp_path):
        cfg = base_config(tmp_path / "run", budget=12, archive_traces=True,
                          optimizer="tpe")
        root = camp.run_campaign(cfg)
        pairs, _ = read_manifest(root)
        records = [r for r, _ in pairs]
        rows = camp.budget_curve(records)
        assert rows, "traces should produce curve rows"
        rates = [float(r["success_rate"]) for r in rows if r["success_rate"] != "--"]
        assert rates == sorted(rates)


class TestCli:
    def test_report_and_verify(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        camp.run_campaign(cfg)
        runner = CliRunner()
        result = runner.invoke(cli.main, ["report", "--archive", str(tmp_path / "run")])
        assert result.exit_code == 0, result.output
        assert "per-family success" in result.output
        result = runner.invoke(cli.main, ["verify-archive", "--archive", str(tmp_path / "run")])
        assert result.exit_code == 0, result.output

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        runner = CliRunner()
        result = runner.invoke(cli.main, ["attack", "--config", str(bad)])
        assert result.exit_code == 2

    def test_attack_cli_and_flag_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "dataset": {"source": "phantoms", "n": 4, "seed": 3},
            "scorer": {"backend": "synthetic", "seed": 11},
            "tau": [0.8],
            "budget": 2,
            "seed": 99,
            "out": str(tmp_path / "cli-run"),
        }))
        runner = CliRunner()
        result = runner.invoke(cli.main, ["attack", "--config", str(cfg_path),
                                          "--optimizer", "random", "--families", "R,D"])
        assert result.exit_code == 0, result.output
        pairs, _ = read_manifest(tmp_path / "cli-run")
        assert set(pairs[0][0].per_family) == {"R", "D"}

    def test_eval_zeroshot(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "dataset": {"source": "phantoms", "n": 8, "seed": 3},
            "scorer": {"backend": "synthetic", "seed": 11},
        }))
        runner = CliRunner()
        result = runner.invoke(cli.main, ["eval-zeroshot", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        assert "clean accuracy" in result.output

    def test_corrupt_manifest_line_reported(self, tmp_path):
        cfg = base_config(tmp_path / "run")
        root = camp.run_campaign(cfg)
        manifest = root / "manifest.jsonl"
        lines = manifest.read_text().splitlines()
        lines.insert(1, "{broken json")
        manifest.write_text("\n".join(lines) + "\n")
        runner = CliRunner()
        result = runner.invoke(cli.main, ["report", "--archive", str(root)])
        assert result.exit_code == 0
        assert "skipped" in result.output or "skipped" in (result.stderr or "")

    def test_empty_archive_report(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        (root / "manifest.jsonl").write_text("")
        runner = CliRunner()
        result = runner.invoke(cli.main, ["report", "--archive", str(root)])
        assert result.exit_code == 0
        assert "0 records" in result.output

    def test_repair_train_and_eval(self, tmp_path):
        cfg = base_config(tmp_path / "arch", scorer={"backend": "student",
                                                     "encoder_seed": 42, "seed": 7},
                          budget=2)
        camp.run_campaign(cfg)
        runner = CliRunner()
        adapter = tmp_path / "adapter.bin"
        result = runner.invoke(cli.main, [
            "repair-train", "--clean-n", "8", "--clean-seed", "4242",
            "--epochs", "3", "--out", str(adapter),
        ])
        assert result.exit_code == 0, result.output
        result = runner.invoke(cli.main, [
            "repair-eval", "--archive", str(tmp_path / "arch"),
            "--adapter", str(adapter), "--out", str(tmp_path / "repair.csv"),
        ])
        assert result.exit_code == 0, result.output
        assert "adversarial" in result.output
        assert (tmp_path / "repair.csv").exists()
