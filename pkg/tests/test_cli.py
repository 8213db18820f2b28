import json

import numpy as np
import pytest

from coxcnn import cli
from coxcnn import model as model_mod
from coxcnn import tensor_nn as nn
from coxcnn.simdata import derive_seed, read_dataset, write_idx


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["simulate", "--synthetic", "--n", "200", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_simulate_summary(dataset, capsys):
    ds = read_dataset(dataset)
    assert len(ds) == 200 and ds.events().sum() == 100
    doc = json.loads((dataset / "run_config.json").read_text())
    assert doc["command"] == "simulate" and doc["params"]["seed"] == 7


def test_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--synthetic", "--n", "20", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        if f != "run_config.json":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_from_idx_keeps_classes(tmp_path, capsys):
    rng = np.random.default_rng(0)
    labels = np.array([0, 1, 6, 2, 6, 0, 7, 0], np.uint8)
    imgs = np.zeros((8, 28, 28), np.uint8)
    imgs[:, 8:18, 9:17] = rng.integers(1, 256, size=(8, 10, 8))
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    code = cli.main(["simulate", "--idx-images", str(tmp_path / "img.idx"), "--idx-labels",
                     str(tmp_path / "lab.idx"), "--classes", "0,6", "--out", str(tmp_path / "d")])
    assert code == 0
    assert len(read_dataset(tmp_path / "d")) == 5
    assert "n=5" in capsys.readouterr().out


def test_train_cph(dataset, tmp_path):
    out = tmp_path / "cph"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--method", "cph", "--pca-dim", "20"]) == 0
    doc = json.loads((out / "baseline.json").read_text())
    assert len(doc["beta"]) == 20 and doc["convergence"]["converged"]
    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--data", str(dataset), "--model", str(out / "baseline.json"), "--out", str(ev)]) == 0
    assert 0.5 < json.loads((ev / "evaluation.json").read_text())["c_index"] <= 1.0


def test_train_cnn_smoke(dataset, tmp_path):
    out = tmp_path / "cnn"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "1"]) == 0
    m = model_mod.load_model(out / "model.cxnn")
    assert m.metadata["epochs_run"] == 1
    assert len(json.loads((out / "loss_history.json").read_text())) == 1
    assert cli.main(["evaluate", "--data", str(dataset), "--model", str(out / "model.cxnn")]) == 0


def test_train_lr_zero_keeps_init(dataset, tmp_path, capsys):
    out = tmp_path / "lr0"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2", "--lr", "0", "--seed", "5"]) == 0
    assert "learning rate is 0" in capsys.readouterr().err
    saved = model_mod.load_model(out / "model.cxnn")
    with nn.precision(32):
        fresh = model_mod.build(model_mod.CoxCnnConfig(), 1, seed=derive_seed(5, 0))
    assert all(np.array_equal(a.values, b.values) for a, b in zip(saved.tensors(), fresh.tensors()))


def test_crossval_rows_and_replay(dataset, tmp_path):
    args = ["crossval", "--data", str(dataset), "--k", "5", "--seed", "1", "--epochs", "1",
            "--pca-dims", "5,10"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    rows = [json.loads(l) for l in (tmp_path / "a" / "results.jsonl").read_text().splitlines()]
    folds = [r for r in rows if r["type"] == "fold"]
    assert sum(r["method"] == "CoxCNN" for r in folds) == 5
    assert sum(r["method"] == "CPH" for r in folds) == 10
    table = (tmp_path / "a" / "table.txt").read_text().splitlines()
    assert table[0].startswith("Performance") and len(table) == 4
    # replay from the saved config alone
    assert cli.main(["crossval", "--config", str(tmp_path / "a" / "run_config.json"),
                     "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.jsonl").read_bytes() == (tmp_path / "b" / "results.jsonl").read_bytes()


def test_crossval_does_not_touch_dataset(dataset, tmp_path):
    before = {p.name: p.read_bytes() for p in dataset.iterdir()}
    cli.main(["crossval", "--data", str(dataset), "--methods", "cph", "--k", "3", "--pca-dims", "5",
              "--out", str(tmp_path / "o")])
    assert {p.name: p.read_bytes() for p in dataset.iterdir()} == before


def test_gradcheck_passes_and_is_deterministic(capsys):
    assert cli.main(["gradcheck", "--n-seeds", "2", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["gradcheck", "--n-seeds", "2", "--seed", "3"]) == 0
    assert capsys.readouterr().out == first
    assert "FAIL" not in first and first.count("PASS") == 14


def test_gradcheck_catches_sign_flip(monkeypatch, capsys):
    real = nn.dense_backward

    def flipped(x, params, grad_out):
        gx, (gw, gb) = real(x, params, grad_out)
        return gx, (-gw, gb)

    monkeypatch.setattr(nn, "dense_backward", flipped)
    assert cli.main(["gradcheck", "--n-seeds", "1", "--precision", "64"]) == cli.EXIT_NUMERIC
    out = capsys.readouterr().out
    assert "FAIL 64-bit dense" in out and "block 1" in out


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"k": 4, "epochs": 3}))
    ns = cli.build_parser().parse_args(["crossval", "--config", str(cfg_file), "--epochs", "7"])
    cfg = cli.resolve_config("crossval", ns)
    assert (cfg["k"], cfg["epochs"], cfg["jobs"]) == (4, 7, 1)
    cfg_file.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["crossval", "--config", str(cfg_file), "--data", "x", "--out", "y"]) == cli.EXIT_ARGS


def test_exit_codes(tmp_path, dataset):
    assert cli.main(["simulate", "--n", "5", "--out", str(tmp_path / "x")]) == cli.EXIT_ARGS
    assert cli.main(["train", "--out", str(tmp_path / "x")]) == cli.EXIT_ARGS
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == cli.EXIT_DATA
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00\x01garbage")
    assert cli.main(["evaluate", "--data", str(dataset), "--model", str(junk)]) == cli.EXIT_DATA
    assert cli.main(["crossval", "--data", str(dataset), "--out", str(tmp_path / "o"), "--methods", "rsf"]) == cli.EXIT_ARGS
    assert cli.main(["gradcheck", "--precision", "16"]) == cli.EXIT_ARGS
    assert cli.main(["nonsense"]) == 2
