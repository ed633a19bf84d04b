import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cofedrec.cli import ConfigError, ExperimentConfig, main, read_checkpoint
from cofedrec.synthetic import planted_groups, write_csv


@pytest.fixture(scope="module")
def ratings_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ratings.csv"
    write_csv(planted_groups(num_users=30, num_items=150, seed=2).ratings, path)
    return str(path)


def base_args(ratings_csv, out, *extra):
    return ["--data-path", ratings_csv, "--data-format", "csv", "--rounds", "3", "--num-clusters", "5",
            "--embedding-dim", "8", "--output-dir", str(out), *extra]


def test_config_round_trip_is_byte_identical():
    cfg = ExperimentConfig(lam=0.0005, tau=0.3, data_path="x/y.dat", seed=7)
    text = cfg.dumps()
    assert ExperimentConfig.loads(text).dumps() == text
    assert ExperimentConfig.loads(text) == cfg


@settings(max_examples=50)
@given(st.floats(0, 10, allow_nan=False), st.floats(1e-3, 5), st.integers(0, 2**31))
def test_config_round_trip_property(lam, tau, seed):
    cfg = ExperimentConfig(lam=lam, tau=tau, seed=seed)
    assert ExperimentConfig.loads(cfg.dumps()).dumps() == cfg.dumps()


def test_config_comments_and_errors():
    cfg = ExperimentConfig.loads("# comment\nrounds = 7  # trailing\n\nlam=0.01\n")
    assert cfg.rounds == 7 and cfg.lam == 0.01
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("nonsense = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("rounds = many\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("tau = 0\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.loads("ablation = most\n")


def test_hash_ignores_output_location_and_workers():
    a = ExperimentConfig()
    assert a.hash == ExperimentConfig(output_dir="elsewhere", workers=4).hash
    assert a.hash != ExperimentConfig(lam=0.01).hash


def test_run_writes_named_artefacts(ratings_csv, tmp_path, capsys):
    assert main(["run", *base_args(ratings_csv, tmp_path)]) == 0
    cfg = ExperimentConfig(data_path=ratings_csv, data_format="csv", rounds=3, num_clusters=5,
                           embedding_dim=8, output_dir=str(tmp_path))
    tag = cfg.tag
    for name in ("config", "metrics", "log", "summary", "participation"):
        assert len(list(tmp_path.glob(f"{name}-{tag}.*"))) == 1
    metrics = [json.loads(line) for line in (tmp_path / f"metrics-{tag}.ndjson").read_text().splitlines()]
    assert [m["round"] for m in metrics] == [0, 1, 2, 3]
    assert ExperimentConfig.loads((tmp_path / f"config-{tag}.cfg").read_text()) == cfg
    ckpt = tmp_path / f"checkpoint-{tag}"
    for name in ("manifest.json", "clients.bin", "score_fns.bin", "global.bin", "group.bin", "membership.csv"):
        assert (ckpt / name).exists()
    _, manifest, models = read_checkpoint(str(ckpt))
    assert manifest["config_hash"] == cfg.hash and len(models) == manifest["num_users"]
    assert "best round" in capsys.readouterr().out


def test_rerun_from_saved_config_is_bit_identical(ratings_csv, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--no-checkpoint", *base_args(ratings_csv, first)]) == 0
    saved = next(first.glob("config-*.cfg"))
    assert main(["run", "--no-checkpoint", "--config", str(saved), "--output-dir", str(second), "--workers", "2"]) == 0
    a = next(first.glob("metrics-*")).read_bytes()
    b = next(second.glob("metrics-*")).read_bytes()
    assert a == b
    assert next(first.glob("metrics-*")).name == next(second.glob("metrics-*")).name


def test_eval_reproduces_best_round(ratings_csv, tmp_path, capsys):
    main(["run", *base_args(ratings_csv, tmp_path)])
    summary = next(csv.DictReader(next(tmp_path.glob("summary-*")).open()))
    ckpt = next(tmp_path.glob("checkpoint-*"))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["test_hr"] == float(summary["test_hr"])
    assert out["val_ndcg"] == float(summary["val_ndcg"])


def test_diagnose_writes_histogram(ratings_csv, tmp_path):
    main(["run", *base_args(ratings_csv, tmp_path)])
    ckpt = next(tmp_path.glob("checkpoint-*"))
    assert main(["diagnose", "--checkpoint", str(ckpt), "--k", "3", "--dump", str(tmp_path / "flat.bin")]) == 0
    rows = list(csv.reader(next(ckpt.glob("diagnose-*-k3.csv")).open()))
    assert rows[0] == ["cluster", "size"] and sum(int(r[1]) for r in rows[1:]) == 30
    assert (tmp_path / "flat.bin").exists()
    assert main(["diagnose", "--checkpoint", str(tmp_path / "missing")]) == 2


def test_prepare(ratings_csv, tmp_path, capsys):
    assert main(["prepare", "--data-path", ratings_csv, "--data-format", "csv", "--output-dir", str(tmp_path)]) == 0
    out = next(tmp_path.glob("prepared-*"))
    rows = list(csv.DictReader((out / "splits.csv").open()))
    assert sum(r["split"] == "test" for r in rows) == 30
    assert "users=30" in capsys.readouterr().out


def test_sweep_single_value_equals_run(ratings_csv, tmp_path):
    assert main(["sweep", *base_args(ratings_csv, tmp_path / "s"), "--param", "lambda", "--values", "0.005"]) == 0
    assert main(["run", "--no-checkpoint", *base_args(ratings_csv, tmp_path / "r")]) == 0
    table = list(csv.DictReader(next((tmp_path / "s").glob("sweep-*-lambda.csv")).open()))
    summary = next(csv.DictReader(next((tmp_path / "r").glob("summary-*")).open()))
    assert len(table) == 1
    assert float(table[0]["test_hr"]) == float(summary["test_hr"])
    assert float(table[0]["test_ndcg"]) == float(summary["test_ndcg"])


def test_sweep_rejects_unknown_param(ratings_csv, tmp_path):
    assert main(["sweep", *base_args(ratings_csv, tmp_path), "--param", "depth", "--values", "1"]) == 1


def test_ablation_and_virtual_flags(ratings_csv, tmp_path, capsys):
    assert main(["run", "--no-checkpoint", "--ablation", "origin", "--virtual-ratio", "0.2",
                 *base_args(ratings_csv, tmp_path)]) == 0
    cfg_text = next(tmp_path.glob("config-*")).read_text()
    assert "ablation = origin" in cfg_text and "virtual_ratio = 0.2" in cfg_text


def test_exit_codes(ratings_csv, tmp_path):
    assert main(["run", "--data-path", str(tmp_path / "none.csv")]) == 1
    assert main(["run", "--rounds", "x", "--data-path", ratings_csv]) == 1
    assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 1
    assert main(["nope"]) == 1
    bad = tmp_path / "bad.dat"
    bad.write_text("1::2::3::4\nbroken line\n")
    assert main(["run", "--data-path", str(bad), "--output-dir", str(tmp_path)]) == 2
