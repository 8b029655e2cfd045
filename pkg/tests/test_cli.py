import csv
import json

import pytest

from dmqca.cli import main
from dmqca.model import load_checkpoint

TINY_MODEL = {"filters": [2, 2, 3, 3, 4], "key_widths": [2, 2, 2, 3, 3, 3], "feature_dim": 4, "hidden": 16}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data")
    assert main(["generate", "--n", "6", "--seed", "7", "--out", str(path)]) == 0
    return path


def write_config(path, **kw):
    cfg = {"model": TINY_MODEL, "train": {"epochs": 1, "batch_size": 2}, "folds": 2, "ablations": ["Key"]}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return str(path)


def test_generate(dataset, tmp_path, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["n"] == 6 and manifest["config"]["frames"] == 4 and manifest["config"]["height"] == 64
    assert main(["generate", "--n", "6", "--seed", "7", "--out", str(tmp_path)]) == 0
    for f in dataset.iterdir():
        assert f.read_bytes() == (tmp_path / f.name).read_bytes()
    assert "RVD1" in capsys.readouterr().out


def test_generate_from_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", phantom={"noise": 0.01, "lesion_jitter_fraction": 0.0})
    assert main(["generate", "--n", "2", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["config"]["noise"] == 0.01 and manifest["config"]["lesion_jitter_fraction"] == 0.0
    assert main(["generate", "--n", "2", "--config", cfg, "--size", "desk", "--out", str(tmp_path / "e")]) == 2


def test_generate_zero(tmp_path):
    assert main(["generate", "--n", "0", "--out", str(tmp_path)]) == 2


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["generate", "--n", "x", "--out", "o"]) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"filterz": [1]}}))
    assert main(["config", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"epochs": 3}))
    assert main(["config", "--config", str(cfg)]) == 2


def test_config_defaults_round_trip(tmp_path, capsys):
    assert main(["config"]) == 0
    text = capsys.readouterr().out
    cfg = tmp_path / "c.json"
    cfg.write_text(text)
    assert main(["config", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out == text


def test_missing_config_file(tmp_path):
    assert main(["config", "--config", str(tmp_path / "nope.json")]) == 3


def test_train_key_only(dataset, tmp_path):
    cfg = write_config(tmp_path / "c.json")
    ckpt = tmp_path / "key.dmqc"
    assert main(["train", "--config", cfg, "--ablation", "Key", "--data", str(dataset), "--out", str(ckpt)]) == 0
    model = load_checkpoint(ckpt)
    assert all(n.startswith(("key.", "head.")) for n in model.params)
    rows = list(csv.reader(open(tmp_path / "key.loss.csv")))
    assert rows[0] == ["epoch", "lr", "loss"] and len(rows) == 2


def test_train_unknown_ablation(dataset, tmp_path, capsys):
    rc = main(["train", "--ablation", "Everything", "--data", str(dataset), "--out", str(tmp_path / "m")])
    assert rc == 2
    assert "Main+Key" in capsys.readouterr().err


def test_train_divergence_exit_code(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train={"epochs": 3, "batch_size": 1, "lr": 1e300, "lr_decay": 1.0})
    rc = main(["train", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / "m")])
    assert rc == 4
    assert "step" in capsys.readouterr().err


def test_train_overfit_smoke(dataset, tmp_path):
    cfg = write_config(tmp_path / "c.json", model={}, train={"epochs": 150, "batch_size": 4, "lr": 1e-3, "lr_decay": 1.0, "lam": 0.0})
    data = tmp_path / "four"
    main(["generate", "--n", "4", "--seed", "1", "--out", str(data)])
    log = tmp_path / "loss.csv"
    assert main(["train", "--config", cfg, "--ablation", "Key", "--data", str(data), "--out", str(tmp_path / "m"),
                 "--log", str(log)]) == 0
    losses = [float(r["loss"]) for r in csv.DictReader(open(log))]
    assert losses[-1] < 0.05 * losses[0]


def test_eval_oracle_row(dataset, tmp_path, capsys):
    assert main(["eval", "--predictor", "oracle", "--data", str(dataset), "--out", str(tmp_path)]) == 0
    row = capsys.readouterr().out.splitlines()[2].split()
    assert row[0] == "Oracle" and float(row[1]) == 0.0
    assert json.loads((tmp_path / "eval.json").read_text())["reports"][0]["mae"]["mean"] == 0.0


def test_eval_checkpoint(dataset, tmp_path):
    cfg = write_config(tmp_path / "c.json")
    ckpt = tmp_path / "m.dmqc"
    main(["train", "--config", cfg, "--ablation", "Key", "--data", str(dataset), "--out", str(ckpt)])
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "eval_model_bland_altman_MLD.csv").exists()


def test_eval_missing_files(dataset, tmp_path):
    assert main(["eval", "--predictor", "oracle", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3
    assert main(["eval", "--ckpt", str(tmp_path / "none"), "--data", str(dataset), "--out", str(tmp_path)]) == 3


def test_eval_corrupt_checkpoint(dataset, tmp_path):
    bad = tmp_path / "bad.dmqc"
    bad.write_bytes(b"DMQC" + bytes(100))
    assert main(["eval", "--ckpt", str(bad), "--data", str(dataset), "--out", str(tmp_path)]) == 3


def test_crossval_deterministic(dataset, tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for d in ("a", "b"):
        assert main(["crossval", "--config", cfg, "--data", str(dataset), "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "crossval.json").read_bytes()
    assert a == (tmp_path / "b" / "crossval.json").read_bytes()
    names = [r["name"] for r in json.loads(a)["reports"]]
    assert names == ["Mean", "Key"]


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "3", "--configs", "1"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS  conv3d" in out
