import json

import numpy as np
import pytest

from grouptrain.cli import main
from grouptrain.data import load_csv, save_csv, strip_group_annotations
from grouptrain.models import Architecture, init_model
from grouptrain.reports import (
    fingerprint,
    load_model,
    read_error_set_csv,
    read_report,
    save_model,
    strip_timing,
    write_error_set_csv,
)
from grouptrain.trainers import ErrorSet

GENERATE = """
[generate]
n_train = 400
n_val = 160
n_test = 240
majority_fraction = 0.95
label_balance = 0.75, 0.25
core_separation = 2.0
spurious_separation = 4.0
noise_dims = 2
noise_sigma = 1.0
seed = 5
"""

TRAIN_COMMON = """
epochs = 6
batch_size = 32
learning_rate = 0.02
l2 = 0.001
seed = 0
"""

ERM = "[train]\nalgorithm = erm\n" + TRAIN_COMMON
JTT = "[train]\nalgorithm = jtt\n" + TRAIN_COMMON + "id_epochs = 1\nupweight_factor = 6\n"
CVAR = "[train]\nalgorithm = cvar\n" + TRAIN_COMMON + "alpha = 0.25\n"


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus finished ERM and JTT runs."""
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.ini").write_text(GENERATE)
    (root / "erm.ini").write_text(ERM)
    (root / "jtt.ini").write_text(JTT)
    (root / "cvar.ini").write_text(CVAR)
    assert run(["generate", "--config", root / "gen.ini", "--out", root / "data"]) == 0
    assert run(["train", "--config", root / "erm.ini", "--out", root / "erm",
                "--data", root / "data"]) == 0
    assert run(["train", "--config", root / "jtt.ini", "--out", root / "jtt",
                "--data", root / "data"]) == 0
    return root


class TestGenerate:
    def test_writes_three_datasets_with_fingerprints(self, workspace):
        report = read_report(workspace / "data" / "report.json")
        for split in ("train", "val", "test"):
            assert (workspace / "data" / f"{split}.csv").exists()
            entry = report["datasets"][split]
            assert entry["fingerprint"].startswith("sha256:")
        assert report["effective_config"]["generate"]["majority_fraction"] == 0.95

    def test_regeneration_fingerprints_match(self, workspace, tmp_path):
        assert run(["generate", "--config", workspace / "gen.ini",
                    "--out", tmp_path / "data2"]) == 0
        a = read_report(workspace / "data" / "report.json")
        b = read_report(tmp_path / "data2" / "report.json")
        assert strip_timing(a) == strip_timing(b)

    def test_seed_override_changes_content(self, workspace, tmp_path):
        assert run(["generate", "--config", workspace / "gen.ini",
                    "--out", tmp_path / "data3", "--seed", "99"]) == 0
        report = read_report(tmp_path / "data3" / "report.json")
        assert report["effective_config"]["generate"]["seed"] == 99
        original = read_report(workspace / "data" / "report.json")
        assert (report["datasets"]["train"]["fingerprint"]
                != original["datasets"]["train"]["fingerprint"])


class TestTrain:
    def test_report_metrics_and_outputs(self, workspace):
        report = read_report(workspace / "erm" / "report.json")
        metrics = report["results"]["metrics"]
        for block in ("worst-group", "average", "final"):
            assert "val" in metrics[block] or block != "final"
        wg = metrics["worst-group"]
        assert 0.0 <= wg["test"]["worst_group_accuracy"] <= 1.0
        assert wg["test"]["worst_group_accuracy"] <= wg["test"]["average_accuracy"]
        for name in ("history.csv", "model_final.txt",
                     "model_best_worst_group.txt", "model_best_average.txt"):
            assert (workspace / "erm" / name).exists()

    def test_jtt_report_carries_diagnostics_and_both_models(self, workspace):
        report = read_report(workspace / "jtt" / "report.json")
        assert (workspace / "jtt" / "model_identification.txt").exists()
        assert (workspace / "jtt" / "error_set.csv").exists()
        diag = report["results"]["diagnostics"]
        assert diag["error_set_size"] > 0
        assert len(diag["error_set_stats"]) == 4
        assert len(diag["enrichment"]) == 4

    def test_end_to_end_determinism(self, workspace, tmp_path):
        assert run(["train", "--config", workspace / "jtt.ini", "--out",
                    tmp_path / "jtt2", "--data", workspace / "data"]) == 0
        a = read_report(workspace / "jtt" / "report.json")
        b = read_report(tmp_path / "jtt2" / "report.json")
        assert strip_timing(a) == strip_timing(b)
        assert (workspace / "jtt" / "model_final.txt").read_text() \
            == (tmp_path / "jtt2" / "model_final.txt").read_text()

    def test_effective_config_embeds_defaults(self, workspace):
        cfg = read_report(workspace / "erm" / "report.json")["effective_config"]["train"]
        assert cfg["momentum"] == 0.9
        assert cfg["group_step_size"] == 0.01
        assert cfg["alpha"] is None

    def test_cvar_losses_written(self, workspace, tmp_path):
        assert run(["train", "--config", workspace / "cvar.ini", "--out",
                    tmp_path / "cvar", "--data", workspace / "data"]) == 0
        assert (tmp_path / "cvar" / "cvar_losses.csv").exists()


class TestSweepAnalyzeAblateStudy:
    def test_sweep(self, workspace, tmp_path):
        (tmp_path / "sweep.ini").write_text(
            JTT + "\n[grid]\nupweight_factor = 1, 6\n\n[sweep]\ncriterion = worst-group\n")
        assert run(["sweep", "--config", tmp_path / "sweep.ini", "--out",
                    tmp_path / "sweep", "--data", workspace / "data"]) == 0
        report = read_report(tmp_path / "sweep" / "report.json")
        assert report["results"]["n_configs"] == 2
        best = report["results"]["best_by_worst_group"]
        other = report["results"]["best_by_average"]
        assert best["metrics"]["val_worst_group"] >= other["metrics"]["val_worst_group"] - 1e-12
        text = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
        assert text[0].startswith("index,algorithm")
        assert "wg_selected_epoch" in text[0] and "avg_selected_epoch" in text[0]
        assert len(text) == 3

    def test_analyze(self, workspace, tmp_path):
        (tmp_path / "an.ini").write_text(
            f"[analyze]\nrun = {workspace / 'jtt'}\n"
            f"erm_report = {workspace / 'erm' / 'report.json'}\n")
        assert run(["analyze", "--config", tmp_path / "an.ini", "--out",
                    tmp_path / "an", "--data", workspace / "data"]) == 0
        report = read_report(tmp_path / "an" / "report.json")
        stats = report["results"]["error_set_stats"]
        assert stats["error_set_size"] > 0
        assert 0 <= stats["precision"] <= 1
        assert (tmp_path / "an" / "enrichment.csv").exists()

    def test_analyze_cvar_composition(self, workspace, tmp_path):
        assert run(["train", "--config", workspace / "cvar.ini", "--out",
                    tmp_path / "cvar", "--data", workspace / "data"]) == 0
        (tmp_path / "an.ini").write_text(
            f"[analyze]\nrun = {tmp_path / 'cvar'}\n"
            f"erm_report = {workspace / 'erm' / 'report.json'}\n")
        assert run(["analyze", "--config", tmp_path / "an.ini", "--out",
                    tmp_path / "an", "--data", workspace / "data"]) == 0
        report = read_report(tmp_path / "an" / "report.json")
        assert report["results"]["composition"]["epochs"] == 6
        lines = (tmp_path / "an" / "composition.csv").read_text().splitlines()
        assert lines[0] == "epoch,set_size,precision,recall"
        assert len(lines) == 7

    def test_ablate(self, workspace, tmp_path):
        (tmp_path / "ab.ini").write_text(
            f"[ablate]\nrun = {workspace / 'jtt'}\nmode = drop-y-neq-a\n")
        assert run(["ablate", "--config", tmp_path / "ab.ini", "--out",
                    tmp_path / "ab", "--data", workspace / "data"]) == 0
        report = read_report(tmp_path / "ab" / "report.json")
        res = report["results"]
        assert res["mode"] == "drop-y-neq-a"
        assert res["modified_error_set_size"] < res["original_error_set_size"]
        assert res["delta"] == pytest.approx(
            res["modified_test_worst_group_accuracy"]
            - res["original_test_worst_group_accuracy"])
        assert (tmp_path / "ab" / "error_set_modified.csv").exists()

    def test_ablate_drop_majority_alignment(self, workspace, tmp_path):
        (tmp_path / "ab2.ini").write_text(
            f"[ablate]\nrun = {workspace / 'jtt'}\nmode = drop-y-eq-a\n")
        assert run(["ablate", "--config", tmp_path / "ab2.ini", "--out",
                    tmp_path / "ab2", "--data", workspace / "data"]) == 0
        res = read_report(tmp_path / "ab2" / "report.json")["results"]
        assert {"original_test_worst_group_accuracy",
                "modified_test_worst_group_accuracy"} <= set(res)

    def test_val_study(self, workspace, tmp_path):
        (tmp_path / "vs.ini").write_text(
            ERM + "\n[study]\nfractions = 1, 0.25\nseeds = 0, 1\n")
        assert run(["val-study", "--config", tmp_path / "vs.ini", "--out",
                    tmp_path / "vs", "--data", workspace / "data"]) == 0
        report = read_report(tmp_path / "vs" / "report.json")
        rows = report["results"]["rows"]
        assert [r["fraction"] for r in rows] == [1.0, 0.25]
        lines = (tmp_path / "vs" / "study.csv").read_text().splitlines()
        assert lines[0].startswith("fraction,median_test_worst_group")
        assert len(lines) == 3


class TestFailureModes:
    def test_config_error_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text(ERM + "bogus = 1\n")
        assert run(["train", "--config", bad, "--out", tmp_path / "o",
                    "--data", tmp_path]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"]["kind"] == "config"

    def test_missing_config_exits_1(self, tmp_path):
        assert run(["train", "--config", tmp_path / "none.ini",
                    "--out", tmp_path / "o", "--data", tmp_path]) == 1

    def test_runtime_error_exits_2_and_cleans_partial(self, workspace, tmp_path, capsys):
        out = tmp_path / "broken"
        assert run(["train", "--config", workspace / "erm.ini", "--out", out,
                    "--data", tmp_path / "missing"]) == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"]["kind"] == "runtime"
        assert not out.exists()
        assert not (tmp_path / "broken.partial").exists()

    def test_usage_error_exits_1(self, capsys):
        assert run(["train"]) == 1
        capsys.readouterr()

    def test_occupied_output_rejected(self, workspace, tmp_path, capsys):
        out = tmp_path / "occupied"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run(["train", "--config", workspace / "erm.ini", "--out", out,
                    "--data", workspace / "data"]) == 2
        capsys.readouterr()

    def test_missing_data_files_exit_2(self, workspace, tmp_path, capsys):
        empty = tmp_path / "emptydir"
        empty.mkdir()
        assert run(["train", "--config", workspace / "erm.ini",
                    "--out", tmp_path / "o", "--data", empty]) == 2
        capsys.readouterr()


class TestPersistence:
    def test_checkpoint_roundtrip_exact(self, tmp_path):
        model = init_model(Architecture(5, (4,), 3), 123)
        save_model(model, tmp_path / "m.txt")
        again = load_model(tmp_path / "m.txt")
        assert again.arch == model.arch
        assert np.array_equal(again.params, model.params)

    def test_dataset_save_is_byte_stable(self, workspace, tmp_path):
        ds = load_csv(workspace / "data" / "train.csv")
        save_csv(ds, tmp_path / "again.csv")
        assert (tmp_path / "again.csv").read_bytes() \
            == (workspace / "data" / "train.csv").read_bytes()

    def test_fingerprint_semantics(self, workspace):
        ds = load_csv(workspace / "data" / "train.csv")
        assert fingerprint(ds) == fingerprint(ds)
        flipped = type(ds)(ds.features, 1 - ds.labels, ds.attributes, ds.name)
        assert fingerprint(flipped) != fingerprint(ds)
        assert fingerprint(strip_group_annotations(ds)) != fingerprint(ds)

    def test_error_set_csv_roundtrip(self, tmp_path):
        e = ErrorSet(np.array([3, 1, 8]), source_epoch=2)
        write_error_set_csv(tmp_path / "e.csv", e)
        again = read_error_set_csv(tmp_path / "e.csv")
        assert again == e
