import csv
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from gflowmask import pipeline
from gflowmask.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_SNAPSHOT, main
from gflowmask.config import load_config

SCHEMA = json.loads((Path(pipeline.__file__).parent / "schemas" / "metrics_report.schema.json").read_text())

SMALL = {
    "seed": 11,
    "data": {"root": "data", "per_class_counts": [12, 12, 12], "ood_per_class_counts": [4, 4, 4]},
    "backbone": {"channels": [4, 8], "strides": [1, 2], "stem_channels": 4},
    "gflowout": {"policy_hidden": 8},
    "train": {"epochs": 3, "batch_size": 9, "lr": 3e-3},
    "eval": {"passes": 3, "batch_size": 7},
    "output_dir": "run",
}


def write_config(directory: Path, **overrides) -> Path:
    cfg = json.loads(json.dumps(SMALL))
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = directory / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Small dataset plus a trained bottomup snapshot, shared by the read-only tests."""
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d)
    assert main(["gen-data", "--config", str(cfg), "-q"]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "-q"]) == EXIT_OK
    return d, cfg


class TestGenData:
    def test_default_counts(self, tmp_path):
        cfg = write_config(tmp_path, data={"per_class_counts": [267, 267, 266], "ood_per_class_counts": [67, 67, 66]})
        # Count-only check: generate the full default split sizes once.
        assert main(["gen-data", "--config", str(cfg), "-q"]) == EXIT_OK
        counts = {s: len(rows(tmp_path / "data" / s / "manifest.csv")) for s in ("train", "test", "ood")}
        assert counts == {"train": 600, "test": 200, "ood": 200}

    def test_rerun_identical_and_out_dir_created(self, tmp_path):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "nested" / "a", tmp_path / "b"
        assert main(["gen-data", "--config", str(cfg), "--out", str(a), "-q"]) == EXIT_OK
        assert main(["gen-data", "--config", str(cfg), "--out", str(b), "-q"]) == EXIT_OK
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


class TestTrain:
    def test_outputs(self, trained):
        d, _ = trained
        log = rows(d / "run" / pipeline.TRAIN_LOG_NAME)
        assert [r["epoch"] for r in log] == ["1", "2", "3"]
        assert all(np.isfinite(float(r["ce_loss"])) for r in log)
        assert (d / "run" / pipeline.SNAPSHOT_NAME).read_bytes()[:5] == b"GFMK1"

    def test_none_mode_has_zero_tb_column(self, tmp_path, trained):
        d, _ = trained
        cfg = write_config(tmp_path, gflowout={"mask_mode": "none"}, train={"epochs": 1})
        assert main(["train", "--config", str(cfg), "--dataset", str(d / "data"), "-q"]) == EXIT_OK
        assert all(float(r["tb_loss"]) == 0.0 for r in rows(tmp_path / "run" / pipeline.TRAIN_LOG_NAME))


class TestEval:
    def test_report_matches_schema(self, trained):
        d, cfg = trained
        assert main(["eval", "--config", str(cfg), "-q"]) == EXIT_OK
        report = json.loads((d / "run" / "report_test.json").read_text())
        jsonschema.validate(report, SCHEMA)
        assert report["n"] == 9 and report["config"]["passes"] == 3
        assert len(rows(d / "run" / "report_test.bins.csv")) == 10

    def test_zero_noise_is_bit_identical(self, trained, tmp_path):
        _, cfg = trained
        clean, noisy = tmp_path / "clean.json", tmp_path / "noisy.json"
        assert main(["eval", "--config", str(cfg), "--out", str(clean), "-q"]) == EXIT_OK
        assert main(["eval", "--config", str(cfg), "--out", str(noisy), "--noise", "gaussian:0", "-q"]) == EXIT_OK
        a, b = json.loads(clean.read_text()), json.loads(noisy.read_text())
        a.pop("config"), b.pop("config")
        assert a == b

    def test_noise_file_name(self, trained):
        d, cfg = trained
        assert main(["eval", "--config", str(cfg), "--noise", "salt-pepper:0.05", "-q"]) == EXIT_OK
        assert (d / "run" / "report_test_salt_pepper_0.05.json").is_file()

    def test_train_split_not_worse_than_test(self, trained, tmp_path):
        d, cfg = trained
        tr, te = tmp_path / "tr.json", tmp_path / "te.json"
        main(["eval", "--config", str(cfg), "--dataset", str(d / "data" / "train"), "--out", str(tr), "-q"])
        main(["eval", "--config", str(cfg), "--out", str(te), "-q"])
        assert json.loads(tr.read_text())["accuracy"] >= json.loads(te.read_text())["accuracy"]

    def test_thread_count_does_not_change_results(self, trained, tmp_path, monkeypatch):
        _, cfg = trained
        outs = []
        for threads in ("1", "3"):
            monkeypatch.setenv("GFLOWMASK_THREADS", threads)
            out = tmp_path / f"t{threads}.json"
            assert main(["eval", "--config", str(cfg), "--out", str(out), "-q"]) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestOOD:
    def test_same_split_gives_zero_deltas(self, trained, tmp_path):
        d, cfg = trained
        test = str(d / "data" / "test")
        out = tmp_path / "cmp.json"
        assert main(["ood", "--config", str(cfg), "--ood-dataset", test, "--out", str(out), "-q"]) == EXIT_OK
        cmp = json.loads(out.read_text())
        assert cmp["delta_mean_entropy"] == 0.0 and cmp["delta_ece"] == 0.0
        assert cmp["id_argmax_id"] == cmp["ood_argmax_id"]

    def test_entropy_csv(self, trained):
        d, cfg = trained
        assert main(["ood", "--config", str(cfg), "-q"]) == EXIT_OK
        table = rows(d / "run" / "ood_comparison_entropy.csv")
        assert [r["split"] for r in table].count("ood") == 12 and len(table) == 21
        cmp = json.loads((d / "run" / "ood_comparison.json").read_text())
        ood = [r for r in table if r["split"] == "ood"]
        assert cmp["ood_argmax_id"] == max(ood, key=lambda r: float(r["entropy"]))["id"]


class TestSaliency:
    def test_files_and_determinism(self, trained, tmp_path):
        _, cfg = trained
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["saliency", "--config", str(cfg), "--out", str(out), "-q"]) == EXIT_OK
        names = sorted(p.name for p in a.iterdir())
        assert len(names) == 4
        assert sum(n.startswith("min0_test-") for n in names) == 2
        assert all("_H" in n for n in names)
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
        assert (a / names[0]).read_bytes()[:2] in (b"P5", b"P6")

    def test_top_three(self, trained, tmp_path):
        _, cfg = trained
        assert main(["saliency", "--config", str(cfg), "--out", str(tmp_path), "--top", "3", "-q"]) == EXIT_OK
        assert len(list(tmp_path.glob("*_heatmap.pgm"))) == 6


class TestExitCodes:
    def test_bad_config(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 1, "unknown": 3}))
        assert main(["train", "--config", str(path), "-q"]) == EXIT_CONFIG
        assert main(["train", "--config", str(tmp_path / "absent.json"), "-q"]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--config", str(write_config(tmp_path)), "-q"]) == EXIT_CONFIG

    def test_bad_flags(self, trained):
        _, cfg = trained
        assert main(["eval", "--config", str(cfg), "--passes", "0", "-q"]) == EXIT_CONFIG
        assert main(["eval", "--config", str(cfg), "--noise", "blur:1", "-q"]) == EXIT_CONFIG

    def test_missing_and_mismatched_snapshot(self, trained, tmp_path):
        d, _ = trained
        cfg = write_config(tmp_path, data={"root": str(d / "data")})
        assert main(["eval", "--config", str(cfg), "-q"]) == EXIT_SNAPSHOT
        other = write_config(tmp_path, data={"root": str(d / "data")}, gflowout={"mask_mode": "random"})
        snap = str(d / "run" / pipeline.SNAPSHOT_NAME)
        assert main(["eval", "--config", str(other), "--snapshot", snap, "-q"]) == EXIT_SNAPSHOT

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point of this test
    def test_divergence(self, trained, tmp_path):
        d, _ = trained
        cfg = write_config(tmp_path, train={"lr": 1e300, "epochs": 2})
        assert main(["train", "--config", str(cfg), "--dataset", str(d / "data"), "-q"]) == EXIT_DIVERGED


def test_module_entry_point(trained):
    _, cfg = trained
    proc = subprocess.run([sys.executable, "-m", "gflowmask", "eval", "--config", str(cfg), "--passes", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and "--passes" in proc.stderr


def test_config_paths_resolve_next_to_file(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert Path(cfg.data.root) == tmp_path.resolve() / "data"
