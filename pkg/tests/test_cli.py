import json

import numpy as np
import pytest

from esam.cli import main
from esam.errors import ConfigError
from esam.experiment import DEFAULTS, load_config, resolve_config
from esam.model import load_checkpoint


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    assert main(["synth", "--out", str(out), "--queries", "40", "--items", "150", "--impressions", "40", "--seed", "3"]) == 0
    return out


def write_config(path, **over):
    cfg = {"data_path": str(path.parent / "world"), "embedding_dim": 4, "hidden": [8, 6], "epochs": 2,
           "batch_size": 16, "lr": 0.01, "output_dir": str(path.parent / "run")}
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_config(root / "cfg.json", data_path=str(synth_dir), output_dir=str(root / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return root


def test_synth_files_and_determinism(synth_dir, tmp_path):
    names = {p.name for p in synth_dir.iterdir()}
    assert names == {"log.tsv", "items.tsv", "queries.tsv", "relevance.tsv", "world.json"}
    rel = (synth_dir / "relevance.tsv").read_text().splitlines()
    assert len(rel) == 40 * round(0.1 * 150)
    main(["synth", "--out", str(tmp_path), "--queries", "40", "--items", "150", "--impressions", "40", "--seed", "3"])
    for n in names:
        assert (tmp_path / n).read_bytes() == (synth_dir / n).read_bytes()


def test_run_directory(trained):
    run = trained / "run"
    for name in ("config.json", "seed.txt", "train_log.jsonl", "checkpoint.npz", "metrics.tsv", "metrics_per_query.tsv"):
        assert (run / name).exists(), name
    lines = [json.loads(l) for l in (run / "train_log.jsonl").read_text().splitlines()]
    assert len(lines) >= 1
    for rec in lines:
        assert {"epoch", "L_s", "L_DA", "L_DCc", "L_DCp", "total", "val_ndcg20"} <= set(rec)
        assert rec["model"] == "ESAM"
    cfg = json.loads((run / "config.json").read_text())
    assert set(cfg) == set(DEFAULTS)
    metrics = (run / "metrics.tsv").read_text().splitlines()
    assert [m.split("\t")[0] for m in metrics[1:]] == ["hot", "long-tail", "entire"]


def test_base_model_label(synth_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", data_path=str(synth_dir), lambda_da=0, lambda_dcc=0, lambda_dcp=0, epochs=1)
    assert main(["train", "--config", str(cfg)]) == 0
    assert "[BaseModel]" in capsys.readouterr().out
    rec = json.loads((tmp_path / "run" / "train_log.jsonl").read_text().splitlines()[0])
    assert rec["model"] == "BaseModel"


def test_train_is_deterministic(synth_dir, tmp_path):
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", data_path=str(synth_dir), output_dir=str(tmp_path / name))
        assert main(["train", "--config", str(cfg), "--seed", "5"]) == 0
    for f in ("metrics.tsv", "metrics_per_query.tsv", "train_log.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "seed.txt").read_text().strip() == "5"


def test_evaluate_report(trained, capsys):
    ck = trained / "run" / "checkpoint.npz"
    assert main(["evaluate", "--checkpoint", str(ck), "--split", "val", "--k", "10"]) == 0
    out = capsys.readouterr().out
    assert "NDCG@10" in out
    rows = (trained / "run" / "eval_val_k10.tsv").read_text().splitlines()
    values = [v for r in rows[1:] for v in r.split("\t")[1:4]]
    assert len(values) == 9
    assert (trained / "run" / "eval_val_k10_per_query.tsv").exists()


def test_evaluate_cold_start(trained, capsys):
    ck = trained / "run" / "checkpoint.npz"
    assert main(["evaluate", "--checkpoint", str(ck), "--cold-start"]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("cold-start:"))
    fields = dict(kv.split("=") for kv in line.split()[1:])
    assert int(fields["reduced_train_records"]) < int(fields["train_records"])
    assert int(fields["items"]) == 150


def test_diagnose(trained, tmp_path, capsys):
    ck = trained / "run" / "checkpoint.npz"
    assert main(["diagnose", "--checkpoint", str(ck), "--out", str(tmp_path / "d")]) == 0
    header = capsys.readouterr().out.splitlines()[0]
    assert header.split("\t") == ["source_source", "target_target", "source_target"]
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == ["domain_distance.tsv", "item_features.tsv", "score_histogram.tsv", "similarity_matrix.tsv"]
    first = {f: (tmp_path / "d" / f).read_bytes() for f in files}
    main(["diagnose", "--checkpoint", str(ck), "--out", str(tmp_path / "d")])
    assert {f: (tmp_path / "d" / f).read_bytes() for f in files} == first


def test_checkpoint_config_mismatch(trained, tmp_path, capsys):
    ck = load_checkpoint(trained / "run" / "checkpoint.npz")
    z = dict(np.load(trained / "run" / "checkpoint.npz"))
    z["param/item_bias"] = np.zeros((3, 1))
    bad = tmp_path / "bad.npz"
    np.savez(bad, **z)
    assert main(["evaluate", "--checkpoint", str(bad)]) == 2
    assert "VersionError" in capsys.readouterr().err
    assert ck.meta["model"] == "ESAM"


def test_config_rejects_unknown_and_bad_types(tmp_path):
    with pytest.raises(ConfigError, match="learning_rate"):
        resolve_config({"learning_rate": 0.1})
    with pytest.raises(ConfigError, match="epochs"):
        resolve_config({"epochs": "ten"})
    with pytest.raises(ConfigError):
        resolve_config({"mode": "ads"})
    with pytest.raises(ConfigError):
        resolve_config({"hidden": []})
    with pytest.raises(ConfigError):
        resolve_config({"m1": 0.9, "m2": 0.7})
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_default_config_mirrors_reference_values():
    cfg = resolve_config({})
    assert (cfg["lambda_da"], cfg["lambda_dcc"], cfg["lambda_dcp"]) == (0.7, 0.3, 0.5)
    assert (cfg["m1"], cfg["m2"], cfg["p1"], cfg["p2"]) == (0.2, 0.7, 0.2, 0.8)
    assert (cfg["batch_size"], cfg["lr"], cfg["n"], cfg["k"]) == (256, 1e-4, 10, 20)


def test_train_errors_exit_nonzero(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 2
    assert "bogus" in capsys.readouterr().err
    cfg = write_config(tmp_path / "d.json", data_path=str(tmp_path / "missing"))
    assert main(["train", "--config", str(cfg)]) != 0


def test_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--queries", "5", "--items", "20"]) == 1
    assert "I/O" in capsys.readouterr().err


def test_cold_start_prepare_restricts_candidates(synth_dir):
    from esam.experiment import prepare

    cfg = resolve_config({"data_path": str(synth_dir), "relevance": "ground_truth", "cold_start": True})
    prep = prepare(cfg)
    cold = np.unique(prep.test.item)
    assert np.flatnonzero(prep.candidates).tolist() == cold.tolist()
    assert not np.isin(prep.train.item, cold).any()
    assert prep.relevance is not None
    warm = prepare({**cfg, "cold_start": False})
    assert warm.candidates is None
