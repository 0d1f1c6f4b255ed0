from __future__ import annotations

import json
import shutil

import pytest
import yaml

from cxrscreen.catalog import Label, read_manifest
from cxrscreen.cli import main
from cxrscreen.splits import read_plan


def run_config(corpus, out_dir, **overrides):
    doc = {
        "corpus_root": str(corpus),
        "scheme": "THREE_CLASS",
        "augment": True,
        "balance": "always",
        "per_class_count": 8,
        "backbones": ["ResNet18"],
        "k": 2,
        "seed": 11,
        "val_fraction": 0.20,
        "output_dir": str(out_dir),
        "training": {"epochs": 1, "weights": "random", "learning_rate": 0.01},
        "explain": True,
        "materialize_augmented": True,
    }
    doc.update(overrides)
    return doc


def write_config(tmp_path, doc):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def completed_run(toy_corpus, tmp_path_factory):
    """One full THREE_CLASS augmented run shared by the report tests."""
    base = tmp_path_factory.mktemp("run3")
    config = write_config(base, run_config(toy_corpus, base / "runs"))
    assert main(["run", "--config", str(config)]) == 0
    run_dirs = list((base / "runs").iterdir())
    assert len(run_dirs) == 1
    return run_dirs[0]


class TestCatalogCommand:
    def test_full_corpus_counts_echoed(self, toy_corpus, tmp_path, capsys):
        assert main(["catalog", "--root", str(toy_corpus), "--out", str(tmp_path / "cat")]) == 0
        out = capsys.readouterr().out
        assert "COVID19=25" in out and "NORMAL=25" in out and "VIRAL_PNEUMONIA=25" in out
        manifest = read_manifest(tmp_path / "cat" / "manifest.tsv")
        assert len(manifest.records) == 75
        assert (tmp_path / "cat" / "ingest_report.tsv").exists()

    def test_empty_directory_zero_record_manifest(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["catalog", "--root", str(empty), "--out", str(tmp_path / "out")]) == 0
        manifest = read_manifest(tmp_path / "out" / "manifest.tsv")
        assert manifest.records == ()

    def test_missing_directory_exit_2(self, tmp_path):
        assert main(["catalog", "--root", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2

    def test_explicit_class_option(self, toy_corpus, tmp_path):
        assert (
            main(
                [
                    "catalog",
                    "--root",
                    str(toy_corpus),
                    "--out",
                    str(tmp_path / "cat"),
                    "--classes",
                    "covid=COVID19,normal=NORMAL",
                ]
            )
            == 0
        )
        manifest = read_manifest(tmp_path / "cat" / "manifest.tsv")
        assert manifest.class_counts[Label.VIRAL_PNEUMONIA] == 0


class TestSplitCommand:
    @pytest.fixture()
    def manifest_file(self, toy_corpus, tmp_path):
        main(["catalog", "--root", str(toy_corpus), "--out", str(tmp_path / "cat")])
        return tmp_path / "cat" / "manifest.tsv"

    def test_writes_plan_and_counts(self, manifest_file, tmp_path, capsys):
        out = tmp_path / "split"
        code = main(
            ["split", "--manifest", str(manifest_file), "--k", "5", "--seed", "3", "--out", str(out)]
        )
        assert code == 0
        plan = read_plan(out / "plan.json")
        assert plan.k == 5 and plan.seed == 3
        assert "COVID19" in capsys.readouterr().out
        assert (out / "counts.txt").exists()

    def test_rerun_same_seed_identical_bytes(self, manifest_file, tmp_path):
        for sub in ("a", "b"):
            main(
                [
                    "split", "--manifest", str(manifest_file),
                    "--k", "5", "--seed", "3", "--out", str(tmp_path / sub),
                ]
            )
        assert (tmp_path / "a" / "plan.json").read_bytes() == (tmp_path / "b" / "plan.json").read_bytes()

    def test_two_class_scheme_drops_viral(self, manifest_file, tmp_path):
        out = tmp_path / "split2"
        assert (
            main(
                [
                    "split", "--manifest", str(manifest_file), "--scheme", "TWO_CLASS",
                    "--k", "2", "--seed", "0", "--out", str(out),
                ]
            )
            == 0
        )
        plan = read_plan(out / "plan.json")
        manifest = read_manifest(manifest_file)
        viral_ids = {r.record_id for r in manifest.records if r.label is Label.VIRAL_PNEUMONIA}
        for fold in plan.folds:
            assert not viral_ids & (set(fold.train) | set(fold.validation) | set(fold.test))

    def test_class_smaller_than_k_exit_2(self, manifest_file, tmp_path):
        assert (
            main(
                [
                    "split", "--manifest", str(manifest_file),
                    "--k", "40", "--seed", "0", "--out", str(tmp_path / "x"),
                ]
            )
            == 2
        )

    def test_unknown_scheme_exit_2(self, manifest_file, tmp_path):
        assert (
            main(
                [
                    "split", "--manifest", str(manifest_file), "--scheme", "FOUR_CLASS",
                    "--out", str(tmp_path / "x"),
                ]
            )
            == 2
        )


class TestRunCommand:
    def test_dry_run_writes_nothing(self, toy_corpus, tmp_path, capsys):
        out_dir = tmp_path / "runs"
        config = write_config(tmp_path, run_config(toy_corpus, out_dir))
        assert main(["run", "--config", str(config), "--dry-run"]) == 0
        echoed = capsys.readouterr().out
        assert "stages:" in echoed and "augment" in echoed
        assert not out_dir.exists() or not any(out_dir.iterdir())

    def test_three_class_run_conserves_counts(self, completed_run):
        report = json.loads((completed_run / "report" / "report.json").read_text())
        entry = report["backbones"]["ResNet18"]
        assert entry["status"] == "ok"
        total = sum(map(sum, entry["confusion_matrix"]))
        assert total == 8 * 3  # balanced to 8 per class, every record tested once
        assert entry["pretrain_corpus_used"] == "RANDOM_INIT"
        assert (completed_run / "splits" / "counts.txt").exists()
        assert (completed_run / "metrics" / "ResNet18" / "report.txt").exists()
        assert entry["explain"] == "explain/panel-ResNet18.png"
        assert (completed_run / entry["explain"]).exists()

    def test_run_directory_layout(self, completed_run):
        for sub in ("manifest", "splits", "models", "metrics", "explain", "report"):
            assert (completed_run / sub).is_dir()
        assert (completed_run / "models" / "ResNet18" / "fold0" / "weights.pt").exists()
        assert (completed_run / "models" / "ResNet18" / "fold1" / "metadata.json").exists()
        assert (completed_run / "metrics" / "summary.txt").exists()

    def test_materialized_augmented_images(self, completed_run):
        base = completed_run / "aug" / "fold0"
        assert (base / "descriptors.tsv").exists()
        covid_pngs = list((base / "COVID19").glob("*aug*.png"))
        assert covid_pngs  # six rotation copies per training record

    def test_failed_backbone_exit_1(self, toy_corpus, tmp_path):
        # no pretrained weights are downloadable here, so this backbone fails
        config = write_config(
            tmp_path,
            run_config(
                toy_corpus,
                tmp_path / "runs",
                augment=False,
                explain=False,
                training={"epochs": 1, "weights": "pretrained"},
            ),
        )
        assert main(["run", "--config", str(config)]) == 1
        run_dir = next((tmp_path / "runs").iterdir())
        report = json.loads((run_dir / "report" / "report.json").read_text())
        entry = report["backbones"]["ResNet18"]
        assert entry["status"] == "failed"
        assert "ResNet18" in entry["error"]

    def test_run_lock_excludes_second_process(self, tmp_path):
        from cxrscreen.experiment import ExperimentError, RunLock

        with RunLock(tmp_path):
            with pytest.raises(ExperimentError):
                RunLock(tmp_path).__enter__()
        assert not (tmp_path / ".lock").exists()

    def test_two_class_run_excludes_viral(self, toy_corpus, tmp_path):
        config = write_config(
            tmp_path,
            run_config(
                toy_corpus,
                tmp_path / "runs",
                scheme="TWO_CLASS",
                augment=False,
                per_class_count=10,
                explain=False,
            ),
        )
        assert main(["run", "--config", str(config)]) == 0
        run_dir = next((tmp_path / "runs").iterdir())
        plan = read_plan(run_dir / "splits" / "plan.json")
        used = read_manifest(run_dir / "manifest" / "used.tsv")
        assert used.class_counts[Label.VIRAL_PNEUMONIA] == 0
        report = json.loads((run_dir / "report" / "report.json").read_text())
        entry = report["backbones"]["ResNet18"]
        assert sum(map(sum, entry["confusion_matrix"])) == 20
        assert report["class_labels"] == ["COVID19", "NORMAL"]
        assert plan.scheme == "TWO_CLASS"

    def test_empty_backbone_list_warns_and_succeeds(self, toy_corpus, tmp_path, caplog):
        config = write_config(
            tmp_path,
            run_config(toy_corpus, tmp_path / "runs", backbones=[], explain=False, augment=False),
        )
        with caplog.at_level("WARNING"):
            assert main(["run", "--config", str(config)]) == 0
        assert any("no backbones" in rec.message for rec in caplog.records)
        run_dir = next((tmp_path / "runs").iterdir())
        report = json.loads((run_dir / "report" / "report.json").read_text())
        assert report["backbones"] == {}

    def test_bad_config_exit_2(self, toy_corpus, tmp_path):
        config = write_config(
            tmp_path, run_config(toy_corpus, tmp_path / "runs", scheme="SEVEN_CLASS")
        )
        assert main(["run", "--config", str(config)]) == 2

    def test_missing_corpus_exit_2(self, tmp_path):
        config = write_config(tmp_path, run_config(tmp_path / "nowhere", tmp_path / "runs"))
        assert main(["run", "--config", str(config)]) == 2


class TestReportCommand:
    def test_renders_tables_and_roc(self, completed_run, capsys):
        assert main(["report", "--run-dir", str(completed_run)]) == 0
        out = capsys.readouterr().out
        assert "Weighted average performance metrics" in out
        assert (completed_run / "report" / "tables.txt").exists()
        assert (completed_run / "report" / "roc_ResNet18.png").exists()

    def test_missing_run_dir_exit_2(self, tmp_path):
        assert main(["report", "--run-dir", str(tmp_path / "ghost")]) == 2

    def test_tampered_artifact_exit_2_names_file(self, completed_run, tmp_path, capsys):
        tampered = tmp_path / "tampered"
        shutil.copytree(completed_run, tampered)
        victim = tampered / "splits" / "plan.json"
        victim.write_text(victim.read_text() + " ")
        assert main(["report", "--run-dir", str(tampered)]) == 2
        err = capsys.readouterr().err
        assert "splits/plan.json" in err

    def test_rerun_same_config_identical_counts(self, toy_corpus, tmp_path, completed_run):
        config = write_config(tmp_path, run_config(toy_corpus, tmp_path / "runs"))
        assert main(["run", "--config", str(config)]) == 0
        second = next((tmp_path / "runs").iterdir())
        a = json.loads((completed_run / "report" / "report.json").read_text())
        b = json.loads((second / "report" / "report.json").read_text())
        assert a["split_checksum"] == b["split_checksum"]
        assert a["manifest_checksum"] == b["manifest_checksum"]
        assert a["population"] == b["population"]
        ea, eb = a["backbones"]["ResNet18"], b["backbones"]["ResNet18"]
        assert ea["confusion_matrix"] == eb["confusion_matrix"]
        assert ea["supports"] == eb["supports"]
