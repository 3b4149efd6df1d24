import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pmol.checkpoint import load_backbone, load_container
from pmol.cli import main

SMALL = ["--d-model", "32", "--n-layers", "2", "--n-heads", "2", "--d-ff", "64", "--pretrain-steps", "20",
         "--rank", "2", "--batch-size", "4", "--epochs", "2"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--preferences", "2", "--pairs", "20", "--seed", "1", "--out", str(d / "d.jsonl")]) == 0
    return d / "d.jsonl"


@pytest.fixture(scope="module")
def run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out)] + SMALL) == 0
    return out


class TestGen:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen", "--pairs", "5", "--seed", "4", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        spec = json.loads((tmp_path / "a.spec.json").read_text())
        assert spec["pairs"] == 15 and spec["gap"] == 0.8

    @pytest.mark.parametrize("args", [["--gap", "1.5"], ["--conflict", "-0.1"], ["--preferences", "0"],
                                      ["--preferences", "2", "--names", "a,b,c"]])
    def test_bad_spec_exits_2(self, tmp_path, args):
        assert main(["gen", "--out", str(tmp_path / "x.jsonl")] + args) == 2

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen"])
        assert exc.value.code == 2

    def test_named_preferences_train(self, tmp_path):
        data = tmp_path / "n.jsonl"
        assert main(["gen", "--preferences", "2", "--pairs", "6", "--names", "helpful,harmless", "--out",
                     str(data)]) == 0
        assert json.loads(data.read_text().splitlines()[0])["preference"] == "helpful"
        out = tmp_path / "run"
        assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--no-figures"]
                    + SMALL[:-2]) == 0
        groups = json.loads((out / "manifest.json").read_text())["groups"]
        assert [e["name"] for e in groups["entries"]] == ["helpful", "harmless"]


class TestTrain:
    def test_run_directory(self, run):
        for name in ("manifest.json", "config.json", "backbone.npz", "loss.csv", "metrics.csv", "telemetry.csv",
                     "heldout.jsonl", "train.jsonl", "figures/training.png", "figures/expert_weights.png"):
            assert (run / name).exists(), name
        ckpts = sorted(p.name for p in (run / "checkpoints").iterdir())
        assert ckpts == ["step_000009.npz", "step_000018.npz"]

    def test_manifest(self, run, dataset):
        m = json.loads((run / "manifest.json").read_text())
        for key in ("config", "dataset_hash", "source_digest", "seed", "out", "groups", "command"):
            assert key in m
        assert m["config"]["backbone"]["d_model"] == 32
        assert m["data"] == str(dataset)

    def test_loss_csv(self, run):
        r = rows(run / "loss.csv")
        assert [int(x["step"]) for x in r] == list(range(1, 19))
        assert all(np.isfinite(float(x["total"])) for x in r)

    def test_backbone_file_unchanged_by_training(self, run):
        meta, arrays = load_container(run / "checkpoints" / "step_000018.npz")
        assert not any(k.startswith("backbone") for k in arrays)
        assert load_backbone(run / "backbone.npz").frozen

    def test_existing_run_refused(self, run, dataset):
        assert main(["train", "--data", str(dataset), "--out", str(run)]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "r")]) == 2
        assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "r")]) == 2

    def test_precedence(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"lr": 5e-4, "epochs": 3, "beta_egs": 0.5},
                                   "backbone": {"d_model": 16, "n_heads": 2}}))
        out = tmp_path / "r"
        args = ["train", "--data", str(dataset), "--out", str(out), "--config", str(cfg), "--epochs", "1",
                "--until", "0", "--no-figures", "--n-layers", "1", "--d-ff", "32", "--pretrain-steps", "2"]
        assert main(args) == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["train"]["lr"] == 5e-4        # file over default
        assert resolved["train"]["epochs"] == 1       # flag over file
        assert resolved["train"]["beta_dpo"] == 0.1   # default
        assert resolved["backbone"]["d_model"] == 16

    @pytest.mark.parametrize("cfg", [{"model": {}}, {"train": {"bogus": 1}}, {"train": {"loss_variant": "x"}},
                                     {"backbone": {"d_model": 30, "n_heads": 4}}])
    def test_bad_config_exits_2(self, dataset, tmp_path, cfg):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--config", str(path)]) == 2

    def test_sc_length_mismatch(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--sc", "0.8,0.8,0.8"]) == 2

    def test_divergence_exits_3(self, dataset, tmp_path):
        args = ["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--lr", "1e8", "--no-figures"]
        with pytest.warns(RuntimeWarning):
            assert main(args + SMALL) == 3

    def test_resume_matches_uninterrupted(self, run, dataset, tmp_path):
        out = tmp_path / "part"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--until", "5", "--no-figures"]
                    + SMALL) == 0
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000005.npz"]
        assert main(["train", "--out", str(out), "--resume", "--no-figures"]) == 0
        for name in ("loss.csv", "metrics.csv", "telemetry.csv", "checkpoints/step_000018.npz"):
            assert (out / name).read_bytes() == (run / name).read_bytes(), name

    def test_resume_without_run(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "none"), "--resume"]) == 2


class TestEval:
    def test_table_and_csv(self, run, capsys):
        assert main(["eval", "--run", str(run)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split("\t")[:4] == ["step", "preference", "n", "accuracy"]
        assert len(out) == 3
        r = rows(run / "eval.csv")
        assert [int(x["preference"]) for x in r] == [0, 1]
        for x in r:
            total = float(x["mass_0"]) + float(x["mass_1"]) + float(x["mass_empty"])
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self, run, capsys, tmp_path):
        main(["eval", "--run", str(run), "--out", str(tmp_path / "a.csv")])
        first = capsys.readouterr().out
        main(["eval", "--run", str(run), "--out", str(tmp_path / "b.csv")])
        assert capsys.readouterr().out == first
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_earlier_checkpoint(self, run, capsys):
        assert main(["eval", "--run", str(run), "--checkpoint", str(run / "checkpoints" / "step_000009.npz"),
                     "--out", str(run / "e9.csv")]) == 0
        assert capsys.readouterr().out.splitlines()[1].startswith("9\t")

    def test_missing_checkpoint(self, run):
        assert main(["eval", "--run", str(run), "--checkpoint", str(run / "nope.npz")]) == 2

    def test_unknown_preference(self, run, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(json.dumps({"prompt": "ab", "chosen": "c", "rejected": "d", "preference": 7}) + "\n")
        assert main(["eval", "--run", str(run), "--data", str(bad)]) == 2

    def test_corrupt_checkpoint(self, run, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a zip")
        assert main(["eval", "--run", str(run), "--checkpoint", str(bad)]) == 2


class TestInspect:
    def test_untrained_near_uniform(self, dataset, tmp_path, capsys):
        out = tmp_path / "u"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--until", "0", "--no-figures"]
                    + SMALL) == 0
        capsys.readouterr()
        assert main(["inspect", "--run", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        table = [ln.split("\t") for ln in lines[1:5]]
        # router weights start at N(0, 0.02), so each of the 5 slots sits near 1/5
        for layer, pref, m0, m1, empty in table:
            assert float(m0) == pytest.approx(0.4, abs=0.02)
            assert float(m1) == pytest.approx(0.4, abs=0.02)
            assert float(empty) == pytest.approx(0.2, abs=0.01)
        assert lines[-2] == "specialization_score\t0.000000"
        assert (out / "figures" / "inspect_step000000.png").exists()


class TestBench:
    def test_small_shape(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--shape", "K=4,r=2,a=16,b=16,batch=2,seq=4", "--reps", "2", "--warmup", "0",
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "speedup\tforward\tK=4,r=2" in text
        assert {x["path"] for x in rows(out)} == {"sequential", "parallel", "linear", "egs_loss"}
        assert out.with_suffix(".png").exists()

    @pytest.mark.parametrize("shape", ["K=0", "K=4,r=x", "Q=3", "K=4,r=16,a=16,b=16"])
    def test_bad_shape(self, shape):
        assert main(["bench", "--shape", shape, "--reps", "1"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "pmol", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("pmol ")
