import json

import numpy as np
import pytest

from reid_lab import rank_eval
from reid_lab.cli import main
from reid_lab.experiment import (
    COMPARE_COLUMNS,
    CompareRow,
    format_compare_table,
    gain_failures,
    read_compare_csv,
    write_compare_csv,
)
from reid_lab.trainer import TrainReport

SMALL = {
    "dataset": {"synthetic": {"num_identities": 16, "samples_per_identity": 6, "feature_dim": 8, "confusable_pairs": 2}},
    "model": {"hidden": [16], "feature_dim": 8},
    "train": {"epochs": 3, "lr": 1e-3, "batch_size": 16},
    "eval": {"max_rank": 10},
}


def write_config(path, **overrides):
    data = json.loads(json.dumps(SMALL))
    data.update(overrides)
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = write_config(d / "exp.json")
    assert main(["train", "--config", cfg, "--out", str(d / "out")]) == 0
    return d, cfg


def test_train_writes_outputs(trained):
    d, _ = trained
    out = d / "out"
    for name in ("checkpoint.npz", "train_report.csv", "query_features.bin", "gallery_features.bin", "metrics.csv", "cmc.csv"):
        assert (out / name).is_file(), name
    report = TrainReport.read_csv(out / "train_report.csv")
    assert len(report.records) == 3
    metrics = rank_eval.read_metrics_csv(out / "metrics.csv")
    assert 0 <= metrics["mAP"] <= 1 and metrics["num_queries"] > 0


def test_train_is_byte_reproducible(trained, tmp_path):
    d, cfg = trained
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("train_report.csv", "metrics.csv", "cmc.csv", "query_features.bin", "checkpoint.npz"):
        assert (d / "out" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_evaluate_checkpoint_with_and_without_rerank(trained, tmp_path, capsys):
    d, cfg = trained
    ck = str(d / "out" / "checkpoint.npz")
    assert main(["evaluate", "--config", cfg, "--checkpoint", ck, "--out", str(tmp_path / "a")]) == 0
    plain = rank_eval.read_metrics_csv(tmp_path / "a" / "metrics.csv")
    assert plain == rank_eval.read_metrics_csv(d / "out" / "metrics.csv")
    args = ["evaluate", "--config", cfg, "--checkpoint", ck, "--rerank", "--plot", "--out", str(tmp_path / "b")]
    assert main(args) == 0
    both = rank_eval.read_metrics_csv(tmp_path / "b" / "metrics.csv")
    assert "mAP" in both and "mAP_rerank" in both
    assert list(rank_eval.read_cmc_csv(tmp_path / "b" / "cmc.csv")) == ["l2", "rerank"]
    assert (tmp_path / "b" / "cmc.svg").is_file()
    assert "mAP_rerank" in capsys.readouterr().out


def test_rerank_lambda_one_matches_plain(trained, tmp_path):
    d, _ = trained
    q, g = str(d / "out" / "query_features.bin"), str(d / "out" / "gallery_features.bin")
    args = ["evaluate", "--query-features", q, "--gallery-features", g, "--rerank", "--lambda", "1.0"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    m = rank_eval.read_metrics_csv(tmp_path / "metrics.csv")
    assert m["mAP_rerank"] == pytest.approx(m["mAP"], abs=1e-12)
    assert main(["rerank", "--query-features", q, "--gallery-features", g, "--out", str(tmp_path / "rr")]) == 0
    dist = np.load(tmp_path / "rr" / "rerank_distances.npy")
    nq = len(rank_eval.read_features(q)[1])
    assert dist.shape[0] == nq
    assert "mAP_rerank" in rank_eval.read_metrics_csv(tmp_path / "rr" / "rerank_metrics.csv")


def test_perfect_separation_gives_map_one(tmp_path):
    ids = np.arange(6)
    centers = np.eye(6) * 10
    rank_eval.write_features(tmp_path / "q.bin", centers, ids, np.zeros(6, int))
    g = np.vstack([centers, centers + 0.01])
    rank_eval.write_features(tmp_path / "g.bin", g, np.tile(ids, 2), np.ones(12, int))
    args = ["evaluate", "--query-features", str(tmp_path / "q.bin"), "--gallery-features", str(tmp_path / "g.bin")]
    assert main(args + ["--rerank", "--out", str(tmp_path / "o")]) == 0
    m = rank_eval.read_metrics_csv(tmp_path / "o" / "metrics.csv")
    assert m["mAP"] == 1.0 and m["rank1"] == 1.0 and m["mAP_rerank"] == 1.0


def test_missing_dataset_path_exits_2_without_outputs(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": {"dataset_file": "missing.csv"}}))
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 2
    assert "missing.csv" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["evaluate", "--out", "x"],
        ["evaluate", "--query-features", "a.bin", "--out", "x"],
        ["gradcheck", "--only", "nothing"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", learning_rate=0.1)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_rerank_flags_exit_2(trained, tmp_path):
    d, _ = trained
    q, g = str(d / "out" / "query_features.bin"), str(d / "out" / "gallery_features.bin")
    base = ["evaluate", "--query-features", q, "--gallery-features", g, "--out", str(tmp_path)]
    assert main(base + ["--k1", "3", "--k2", "5"]) == 2
    assert main(base + ["--lambda", "1.5"]) == 2
    assert not tmp_path.joinpath("metrics.csv").exists()


def test_compare(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json", variants=["xent", "cp"])
    out = tmp_path / "cmp"
    assert main(["compare", "--config", cfg, "--out", str(out), "--plot"]) == 0
    table = capsys.readouterr().out
    assert "entropy" in table.splitlines()[0]
    rows = read_compare_csv(out / "compare.csv")
    assert [r.variant for r in rows] == ["xent", "cp"]
    assert list(rank_eval.read_cmc_csv(out / "compare_cmc.csv")) == ["xent", "cp"]
    first = (out / "compare.csv").read_bytes()
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp2")]) == 0
    assert (tmp_path / "cmp2" / "compare.csv").read_bytes() == first
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp3"), "--require-gain", "1.0"]) == 1


def test_compare_needs_two_variants(tmp_path):
    cfg = write_config(tmp_path / "exp.json", variants=["xent"])
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_compare_csv_round_trip_and_gain(tmp_path):
    rows = [CompareRow("xent", 0.5, 0.6, 0.9, 1.2), CompareRow("ls", 0.53, 0.61, 1.0, 1.1), CompareRow("cp", 0.515, 0.6, 1.1, 1.3)]
    write_compare_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == ",".join(COMPARE_COLUMNS)
    back = read_compare_csv(tmp_path / "c.csv")
    assert [(r.variant, r.mAP, r.rank1, r.entropy, r.loss) for r in back] == [
        (r.variant, r.mAP, r.rank1, r.entropy, r.loss) for r in rows
    ]
    assert gain_failures(rows, "xent", 0.02) == ["cp"]
    assert "entropy" in format_compare_table(rows)
    with pytest.raises(ValueError):
        gain_failures(rows, "vib", 0.02)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--only", "vib"]) == 0
    out = capsys.readouterr().out
    cases = {line.split()[1] for line in out.splitlines()[1:-1]}
    assert cases == {"vib", "vib+ls", "vib+cp", "vib+ls+cp"}
    assert main(["gradcheck", "--only", "cp", "--inject-fault"]) == 1


def test_synth(tmp_path, capsys):
    cfg = write_config(tmp_path / "exp.json")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "synthetic.csv").is_file()
    data_cfg = tmp_path / "file.json"
    data_cfg.write_text(json.dumps({**SMALL, "dataset": {"dataset_file": "s/synthetic.csv"}}))
    assert main(["train", "--config", str(data_cfg), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "metrics.csv").is_file()


def test_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("REID_LAB_THREADS", "1")
    assert main(["gradcheck", "--only", "xent"]) == 0
    monkeypatch.setenv("REID_LAB_THREADS", "zero")
    assert main(["gradcheck", "--only", "xent"]) == 2
    monkeypatch.setenv("REID_LAB_THREADS", "0")
    assert main(["gradcheck", "--only", "xent"]) == 2
