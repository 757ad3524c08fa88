import json
from pathlib import Path

import numpy as np
import pytest

import tit.tensor as T
from tit.adapter import count_adapter_params, count_mix_params
from tit.cli import load_config, main, params_summary

ROOT = Path(__file__).resolve().parents[1]
TOY = str(ROOT / "toy.json")
QUICK = ["--override", "train.steps=4", "--override", "train.batch_size=2",
         "--override", "model.H=32", "--override", "model.W=32", "--override", "model.C=8",
         "--override", "model.heads=[1,1,2,2]", "--override", "model.depths=[1,1,1,1]",
         "--override", "model.k=8", "--override", "model.c_t=4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", TOY, "--seed", "7", "--out", str(out)] + QUICK) == 0
    return out


class TestConfig:
    def test_toy_matches_acceptance_shape(self):
        cfg = load_config(TOY)
        assert (cfg["model.H"], cfg["model.W"], cfg["model.C"]) == (64, 64, 16)
        assert cfg["model.depths"] == [1, 1, 2, 1] and cfg["model.heads"] == [2, 2, 4, 4]

    def test_override_parsing(self):
        cfg = load_config(None, ["train.lr=0.5", "model.embed_upsample=bilinear"], seed=3)
        assert cfg["train.lr"] == 0.5 and cfg["model.embed_upsample"] == "bilinear"
        assert cfg["seed"] == 3

    def test_unknown_key_in_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train.learning_rate": 1e-3}))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "train.learning_rate" in capsys.readouterr().err

    def test_unknown_override(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--override", "model.depth=3"]) == 2
        assert main(["train", "--out", str(tmp_path), "--override", "novalue"]) == 2

    def test_invalid_value(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--override", "model.H=50"]) == 2
        assert main(["train", "--out", str(tmp_path), "--override", "train.lr=-1"]) == 2

    def test_bad_subcommand(self):
        assert main(["fly"]) == 2


class TestTrain:
    def test_outputs(self, trained):
        man = json.loads((trained / "checkpoint" / "manifest.json").read_text())
        assert man["format"] == "tit-checkpoint/1"
        assert (trained / "checkpoint" / "params.bin").stat().st_size == man["total_bytes"]
        hist = [json.loads(l) for l in (trained / "history.jsonl").read_text().splitlines()]
        assert [h["step"] for h in hist] == [0, 1, 2, 3]
        assert all(np.isfinite(h["loss"]) for h in hist)

    def test_deterministic(self, trained, tmp_path):
        assert main(["train", "--config", TOY, "--seed", "7", "--out", str(tmp_path)] + QUICK) == 0
        assert (tmp_path / "history.jsonl").read_bytes() == (trained / "history.jsonl").read_bytes()
        assert (tmp_path / "checkpoint" / "params.bin").read_bytes() == \
            (trained / "checkpoint" / "params.bin").read_bytes()

    def test_nan_exit_code(self, tmp_path, monkeypatch):
        import tit.train as tr
        monkeypatch.setitem(tr.LOSSES, "miou", lambda p, t: p.sum() * np.inf)
        assert main(["train", "--out", str(tmp_path)] + QUICK) == 3


class TestEval:
    def test_metrics(self, trained, capsys):
        assert main(["eval", "--checkpoint", str(trained / "checkpoint"), "--config", TOY,
                     "--override", "eval.num_samples=3"]) == 0
        recs = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert [r["task"] for r in recs] == ["semseg", "depth", "normals", "edge"]
        assert all(np.isfinite(r["value"]) for r in recs)

    def test_out_dir_default_checkpoint(self, trained, capsys):
        assert main(["eval", "--out", str(trained), "--override", "eval.num_samples=2"]) == 0
        assert (trained / "metrics.jsonl").exists()

    def test_baseline(self, trained, tmp_path, capsys):
        base = tmp_path / "single.json"
        base.write_text(json.dumps({"semseg": 0.5, "depth": 1.0, "normals": 30.0, "edge": 0.2}))
        assert main(["eval", "--checkpoint", str(trained / "checkpoint"),
                     "--baseline", str(base), "--override", "eval.num_samples=2"]) == 0
        lines = capsys.readouterr().out.splitlines()
        dm = [json.loads(l) for l in lines if l.startswith("{") and "delta_m" in l]
        assert len(dm) == 1 and np.isfinite(dm[0]["value"])
        assert any(l.startswith("single-task") for l in lines)

    def test_baseline_mismatch(self, trained, tmp_path):
        base = tmp_path / "single.json"
        base.write_text(json.dumps({"semseg": 0.5, "depth": 1.0, "normals": 30.0}))
        assert main(["eval", "--checkpoint", str(trained / "checkpoint"),
                     "--baseline", str(base)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope")]) == 2
        assert main(["eval"]) == 2


class TestParams:
    def test_preset_rows(self, capsys):
        assert main(["params", "--preset", "swin-t-nyud"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert [l.split()[0] for l in out[1:]] == ["adapter", "m=n/8", "m=n/4", "m=n/2"]
        for l in out[1:]:
            cols = l.split()
            assert cols[4] == cols[5]    # closed form == enumeration

    def test_bad_preset(self):
        assert main(["params", "--preset", "swin-b"]) == 2
        assert main(["params", "--preset", "swin-t-nyud", "--override", "width=3"]) == 2

    def test_single_module_row(self):
        rows = params_summary((96,), (1,), 1, 1, 0.25)
        by = {r["module"]: r for r in rows}
        assert by["adapter"]["closed_form_no_bias"] == count_adapter_params(96, 0.25) == 4608
        assert by["m=n/2"]["closed_form_no_bias"] == count_mix_params(96, 0.25, 0.5) == 2880

    def test_task_increment(self):
        dims, depths = (96, 192, 384, 768), (2, 2, 6, 2)
        one = {r["module"]: r for r in params_summary(dims, depths, 2, 1, 0.25)}
        two = {r["module"]: r for r in params_summary(dims, depths, 2, 2, 0.25)}
        for label, ratio in (("m=n/8", 8), ("m=n/4", 4), ("m=n/2", 2)):
            mn = sum(2 * dd * (d // 4) * (d // 4 // ratio) for d, dd in zip(dims, depths))
            assert two[label]["total"] - one[label]["total"] == mn

    def test_preset_out_files(self, tmp_path):
        assert main(["params", "--preset", "swin-t-nyud", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "params_rows.jsonl").read_text().splitlines()
        assert len(rows) == 4 * 2 * 12
        assert "TOTAL" in (tmp_path / "params.txt").read_text()

    def test_model_report(self, capsys):
        assert main(["params"] + QUICK) == 0
        assert "closed form" in capsys.readouterr().out


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        for row in ("adapter", "mix-adapter", "gate-decoder", "block", "head", "model"):
            assert f"\n{row} " in out

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        orig = T.sigmoid

        def bad_sigmoid(a):
            out = orig(a)
            bw = out._backward
            if bw is not None:
                out._backward = lambda g: tuple(1.5 * x for x in bw(g))
            return out

        monkeypatch.setattr(T, "sigmoid", bad_sigmoid)
        assert main(["gradcheck"]) == 3
        assert "FAIL" in capsys.readouterr().out


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--override", "gen.count=2",
                 "--seed", "4"]) == 0
    side = json.loads((tmp_path / "000001" / "sample.json").read_text())
    assert side["index"] == 1 and side["arrays"]["image"]["shape"] == [64, 64, 3]
