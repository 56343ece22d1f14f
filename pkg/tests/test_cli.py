import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dmat import cli
from dmat import tensor as T
from dmat.config import DmatConfig
from dmat.data import load_directory, load_rgb_png, synth_dataset, synth_export
from dmat.masks import save_mask_png
from dmat.metrics import bucket_of
from dmat.train import NonFiniteLossError

from tiny import tiny_config


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    tiny_config(checkpoint_every=5).save(path)
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, cfg_path):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--config", str(cfg_path), "--out", str(out), "--count", "6"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, cfg_path):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out), "--iterations", "10"]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSynth:
    def test_writes_groups_and_manifest(self, tmp_path, cfg_path):
        assert cli.main(["synth", "--config", str(cfg_path), "--out", str(tmp_path), "--count", "8", "--seed", "7"]) == 0
        for part in ("img", "gt", "modal", "amodal", "occ"):
            assert len(list(tmp_path.glob(f"*_{part}.png"))) == 8
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["count"] == 8 and all(e["seed"] == 7 for e in manifest["samples"])
        recount = {k: 0 for k in manifest["ratio_histogram"]}
        labels = list(recount)
        for e in manifest["samples"]:
            recount[labels[bucket_of(e["occlusion_ratio"])]] += 1
        assert recount == manifest["ratio_histogram"]

    def test_rerun_bit_identical(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert cli.main(["synth", "--config", str(cfg_path), "--out", str(d), "--count", "3"]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


class TestTrain:
    def test_smoke_outputs(self, trained):
        rows = _rows(trained / "train_log.csv")
        assert len(rows) == 10 and list(rows[0]) == list(cli.CSV_FIELDS)
        assert [int(r["iter"]) for r in rows] == list(range(10))
        assert (trained / "last.dmat").exists()
        assert (trained / "ckpt_000005.dmat").exists() and (trained / "ckpt_000010.dmat").exists()
        assert DmatConfig.load(trained / "config.ini") == tiny_config(checkpoint_every=5)

    def test_resume_continues(self, tmp_path, cfg_path):
        straight, split = tmp_path / "straight", tmp_path / "split"
        base = ["train", "--config", str(cfg_path)]
        assert cli.main(base + ["--out", str(straight), "--iterations", "5"]) == 0
        assert cli.main(base + ["--out", str(split), "--iterations", "3"]) == 0
        assert cli.main(base + ["--out", str(split), "--iterations", "2", "--resume", str(split / "last.dmat")]) == 0
        a, b = _rows(straight / "train_log.csv"), _rows(split / "train_log.csv")
        assert [r["iter"] for r in b] == [str(i) for i in range(5)]
        for ra, rb in zip(a, b):
            for k in cli.CSV_FIELDS[1:]:
                assert float(ra[k]) == pytest.approx(float(rb[k]), rel=1e-6, abs=1e-9)

    def test_ablation_mapping(self, tmp_path, cfg_path):
        out = tmp_path / "abl"
        args = ["train", "--config", str(cfg_path), "--out", str(out), "--iterations", "1", "--ablation", "no-dhmga"]
        assert cli.main(args) == 0
        body = DmatConfig.load(out / "config.ini").body
        assert body.alpha_trainable is False and body.masks == ()
        assert body.tau_inv == body.tau_modal == body.tau_occ == 0.0

    def test_non_finite_exit_code(self, tmp_path, cfg_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise NonFiniteLossError(0, "l1", float("nan"))

        monkeypatch.setattr(cli, "train_step", boom)
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--iterations", "1"]) == 2
        assert "iteration 0" in capsys.readouterr().err


class TestInfer:
    def test_pairs_and_determinism(self, tmp_path, trained, dataset):
        ck = str(trained / "last.dmat")
        outs = [tmp_path / "o1", tmp_path / "o2"]
        for o in outs:
            assert cli.main(["infer", "--config", str(trained / "config.ini"), "--checkpoint", ck, "--input", str(dataset), "--out", str(o)]) == 0
        ids = sorted(p.name[: -len("_img.png")] for p in dataset.glob("*_img.png"))
        for sid in ids:
            for kind in ("pred", "composite"):
                f = f"{sid}_{kind}.png"
                assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        assert len(list(outs[0].glob("*_composite.png"))) == len(ids)

    def test_empty_invisible_composite_equals_input(self, tmp_path, trained, dataset):
        src = tmp_path / "in"
        src.mkdir()
        sample = next(load_directory(dataset))
        sid = sample.id
        for part in ("img", "occ"):
            (src / f"{sid}_{part}.png").write_bytes((dataset / f"{sid}_{part}.png").read_bytes())
        save_mask_png(src / f"{sid}_modal.png", sample.masks.amodal)
        save_mask_png(src / f"{sid}_amodal.png", sample.masks.amodal)
        out = tmp_path / "out"
        args = ["infer", "--config", str(trained / "config.ini"), "--checkpoint", str(trained / "last.dmat")]
        assert cli.main(args + ["--input", str(src), "--out", str(out)]) == 0
        assert np.array_equal(load_rgb_png(out / f"{sid}_composite.png"), load_rgb_png(src / f"{sid}_img.png"))

    def test_hash_mismatch_refused(self, tmp_path, trained, dataset, capsys):
        args = ["infer", "--config", str(trained / "config.ini"), "--ablation", "no-ru", "--checkpoint", str(trained / "last.dmat")]
        assert cli.main(args + ["--input", str(dataset), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "refusing" in err and err.count("hash") >= 2
        stored = tiny_config(checkpoint_every=5).config_hash()
        assert stored in err


class TestEval:
    def test_ground_truth_against_itself(self, tmp_path, dataset, cfg_path):
        preds = tmp_path / "preds"
        preds.mkdir()
        for p in dataset.glob("*_gt.png"):
            (preds / p.name.replace("_gt.png", "_composite.png")).write_bytes(p.read_bytes())
        reports = []
        for k in range(2):
            out = tmp_path / f"rep{k}"
            assert cli.main(["eval", "--config", str(cfg_path), "--predictions", str(preds), "--data", str(dataset), "--out", str(out)]) == 0
            reports.append((out / "report.json").read_text())
        assert reports[0] == reports[1]
        rep = json.loads(reports[0])
        assert rep["l1"]["total"] == 0.0 and rep["fd"]["total"] < 1e-6 and rep["hfd"]["total"] < 1e-6
        manifest = json.loads((dataset / "manifest.json").read_text())
        for band, n in manifest["ratio_histogram"].items():
            assert rep["counts"][band] == n
        assert (tmp_path / "rep0" / "report.txt").read_text().startswith("metric")

    def test_checkpoint_eval(self, tmp_path, trained, dataset):
        args = ["eval", "--config", str(trained / "config.ini"), "--checkpoint", str(trained / "last.dmat")]
        assert cli.main(args + ["--data", str(dataset), "--out", str(tmp_path), "--ema"]) == 0
        assert json.loads((tmp_path / "report.json").read_text())["counts"]["total"] == 6

    def test_missing_ground_truth_lists_ids(self, tmp_path, cfg_path, capsys):
        samples = synth_dataset(tiny_config().data)[:2]
        synth_export(samples, tmp_path / "d")
        (tmp_path / "d" / f"{samples[1].id}_gt.png").unlink()
        args = ["eval", "--config", str(cfg_path), "--predictions", str(tmp_path), "--data", str(tmp_path / "d")]
        assert cli.main(args + ["--out", str(tmp_path / "o")]) == 1
        assert samples[1].id in capsys.readouterr().err


class TestUsage:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["nope"],
            ["synth"],
            ["synth", "--out", "x", "--ablation", "no-such-thing"],
            ["synth", "--out", "x", "--config", "/does/not/exist.ini"],
        ],
    )
    def test_usage_errors_exit_1(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            code = cli.main(argv)
            raise SystemExit(code)
        assert exc.value.code == 1

    def test_unknown_config_key_exit_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[ech]\nkernal_sizes = [7, 7, 7]\n")
        assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1
        assert "kernal_sizes" in capsys.readouterr().err


class TestGradcheck:
    def test_subset_passes_and_is_deterministic(self, capsys):
        assert cli.main(["gradcheck", "--only", "tanh,conv2d"]) == 0
        first = [ln.split("(")[0] for ln in capsys.readouterr().out.splitlines()]
        assert cli.main(["gradcheck", "--only", "tanh,conv2d"]) == 0
        second = [ln.split("(")[0] for ln in capsys.readouterr().out.splitlines()]
        assert first == second and first[-1] == "2/2 checks passed"

    def test_unknown_check(self):
        assert cli.main(["gradcheck", "--only", "nonsense"]) == 1

    def test_corrupted_backward_fails_named(self, monkeypatch, capsys):
        def bad_tanh(x):
            out = np.tanh(x.data)
            return T._make(out, (x,), lambda g: (g * out,), "tanh")

        monkeypatch.setattr(T, "tanh", bad_tanh)
        assert cli.main(["gradcheck", "--only", "tanh,exp"]) == 2
        out = capsys.readouterr().out
        assert "FAIL tanh" in out and "PASS exp" in out and "failed: tanh" in out


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dmat", "gradcheck", "--only", "exp"], capture_output=True, text=True)
    assert res.returncode == 0 and "1/1 checks passed" in res.stdout
    res = subprocess.run([sys.executable, "-m", "dmat", "train"], capture_output=True, text=True)
    assert res.returncode == 1
