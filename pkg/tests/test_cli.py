import csv
import json

import numpy as np
import pytest
from PIL import Image

from cmsalgan import cli
from cmsalgan import gradcheck as G

SMALL = ["--set", "model.image_size=16", "--set", "model.base_channels=4", "--set", "model.lstm_hidden=4",
         "--set", "model.decoder_channels=8", "--set", "model.edge_feature_channels=8",
         "--set", "model.disc_channels=[3,4,4,4,4,4]", "--set", "model.disc_fc=[8,2,1]",
         "--set", "train.batch_size=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "set"
    assert run("synth", "--out", root, "--count", 8, "--seed", 7, "--image-size", 16, "--test-fraction", 0.25) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    assert run("train", "--data", dataset, "--out", out, "--epochs", 1, "--log-every", 0, *SMALL) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_count_and_manifest(tmp_path):
    out = tmp_path / "s"
    assert run("synth", "--out", out, "--count", 20, "--seed", 7, "--mode", "none", "--image-size", 16) == 0
    for sub in ("rgb", "depth", "gt"):
        assert len(list((out / sub).glob("*.png"))) == 20
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 7 and man["spec"]["count"] == 20 and man["command"] == "synth"


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--count", 5, "--seed", 3, "--image-size", 16) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_records_mode(tmp_path):
    assert run("synth", "--out", tmp_path, "--count", 2, "--mode", "corrupt_rgb", "--image-size", 16) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["mode"] == "corrupt_rgb" and man["spec"]["mode"] == "corrupt_rgb"


def test_synth_rejects_bad_mix(tmp_path):
    assert run("synth", "--out", tmp_path / "x", "--mode-mix", "corrupt_rgb=lots") == 1


def test_train_writes_run_directory(trained, dataset):
    assert (trained / "checkpoints" / "latest.npz").exists()
    rows = list(csv.DictReader(open(trained / "loss.csv")))
    assert len(rows) == 2                     # 6 training ids, batch 4
    man = json.loads((trained / "manifest.json").read_text())
    assert man["n_train"] == 6 and man["model"]["image_size"] == 16 and len(man["data_sha256"]) == 64


def test_train_bad_key_leaves_nothing(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--data", dataset, "--out", out, "--set", "train.lr=0.1") == 1
    assert "train.lr" in capsys.readouterr().err
    assert not out.exists()
    assert run("train", "--data", dataset, "--out", out, "--set", "model.image_size=20") == 1
    assert not out.exists()


def test_train_refuses_non_empty_run_dir(dataset, trained):
    assert run("train", "--data", dataset, "--out", trained, *SMALL) == 1


def test_train_missing_dataset(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r", *SMALL) == 2


def test_train_variant_flags(dataset, tmp_path):
    out = tmp_path / "g_rgb"
    assert run("train", "--data", dataset, "--out", out, "--stream", "rgb", "--no-afl", "--no-edge",
               "--max-steps", 1, "--log-every", 0, *SMALL) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["model"]["stream"] == "rgb" and not man["model"]["use_edge"] and not man["train"]["use_afl"]


def test_train_resume(dataset, trained, tmp_path):
    out = tmp_path / "more"
    assert run("train", "--data", dataset, "--out", out, "--resume", trained / "checkpoints" / "latest.npz",
               "--epochs", 2, "--log-every", 0) == 0
    rows = list(csv.DictReader(open(out / "loss.csv")))
    first = list(csv.DictReader(open(trained / "loss.csv")))
    assert len(rows) == 4 and rows[:2] == first


def test_predict_count_range_and_determinism(trained, dataset, tmp_path):
    ck = trained / "checkpoints" / "latest.npz"
    assert run("predict", "--checkpoint", ck, "--data", dataset, "--out", tmp_path / "a") == 0
    assert run("predict", "--checkpoint", ck, "--data", dataset, "--out", tmp_path / "b") == 0
    pngs = sorted((tmp_path / "a").glob("*.png"))
    assert [p.stem for p in pngs] == sorted(p.stem for p in (dataset / "gt").glob("*.png"))
    for p in pngs:
        img = np.asarray(Image.open(p))
        assert img.dtype == np.uint8 and img.ndim == 2
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_predict_rejects_mismatched_checkpoint(trained, dataset, tmp_path):
    z = dict(np.load(trained / "checkpoints" / "latest.npz"))
    z.pop("param/fuse.out.w")
    np.savez(tmp_path / "broken.npz", **z)
    assert run("predict", "--checkpoint", tmp_path / "broken.npz", "--data", dataset, "--out", tmp_path / "p") == 2
    assert run("predict", "--checkpoint", tmp_path / "none.npz", "--data", dataset, "--out", tmp_path / "p") == 2


def test_eval_gt_against_itself(dataset, tmp_path, capsys):
    assert run("eval", "--pred", dataset / "gt", "--gt", dataset, "--out", tmp_path, "--svg") == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert list(rows[0]) == ["id", "maxF", "S", "MAE"]
    assert rows[-1]["id"] == "aggregate" and len(rows) == 9
    agg = rows[-1]
    assert float(agg["maxF"]) == 1.0 and float(agg["S"]) == 1.0 and float(agg["MAE"]) == 0.0
    assert (tmp_path / "pr.csv").exists() and (tmp_path / "pr.svg").exists()
    assert "maxF" in capsys.readouterr().out


def test_eval_lists_id_mismatch(dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    ids = sorted(p.stem for p in (dataset / "gt").glob("*.png"))
    for i in ids[1:]:
        (pred / f"{i}.png").write_bytes((dataset / "gt" / f"{i}.png").read_bytes())
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(pred / "stray.png")
    assert run("eval", "--pred", pred, "--gt", dataset, "--out", tmp_path / "r") == 2
    err = capsys.readouterr().err
    assert ids[0] in err and "stray" in err


def test_gradcheck_table_and_exit_codes(monkeypatch, capsys):
    rows = [G.CheckRow("add", "op", 1e-9, G.OP_TOL), G.CheckRow("discriminator", "composite", 2e-4, G.COMPOSITE_TOL)]
    monkeypatch.setattr(G, "run_table", lambda seed, composite_elements: rows)
    assert run("gradcheck") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "name,kind,max_rel_error,tolerance,status"
    assert out[2].startswith("discriminator,composite,") and out[2].endswith("pass")
    rows.append(G.CheckRow("conv2d", "op", 3e-3, G.OP_TOL))
    assert run("gradcheck") == 3


def test_report_renders_figures(trained, dataset, tmp_path, capsys):
    ev = tmp_path / "ev"
    assert run("eval", "--pred", dataset / "gt", "--gt", dataset, "--out", ev) == 0
    capsys.readouterr()
    out = tmp_path / "rep"
    assert run("report", "--run", trained, "--eval", ev, "--out", out, "--format", "png", "svg") == 0
    for name in ("loss_run.png", "loss_run.svg", "pr_curves.png", "pr_curves.svg", "summary.csv"):
        assert (out / name).stat().st_size > 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t")[:2] == ["source", "kind"] and len(lines) == 3
    assert run("report", "--out", tmp_path / "empty") == 1


@pytest.mark.parametrize("sub", ["synth", "train", "predict", "eval", "gradcheck", "report"])
def test_help_for_every_subcommand(sub, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([sub, "--help"])
    assert e.value.code == 0
    assert "--" in capsys.readouterr().out


def test_unknown_flag_fails_fast():
    with pytest.raises(SystemExit) as e:
        cli.main(["synth", "--out", "x", "--bogus"])
    assert e.value.code == 1
