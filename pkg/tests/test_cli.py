import csv

import numpy as np
import pytest

from vibe.cli import main
from vibe.data import load_features, load_params

from cli_pipeline import drop_column, run, run_pipeline, stable_bytes


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("run")
    return work, run_pipeline(work)


class TestPipeline:
    def test_all_outputs_written(self, pipeline):
        _, outputs = pipeline
        for path in outputs:
            assert path.exists() and path.stat().st_size > 0, path

    def test_train_log(self, pipeline):
        work, _ = pipeline
        rows = read_csv(work / "train_log.csv")
        assert list(rows[0]) == ["iter", "loss", "elbo", "wall_ms"]
        assert [int(r["iter"]) for r in rows] == list(range(300))
        assert [int(r["iter"]) for r in rows if r["elbo"]] == [0, 100, 200]

    def test_eval_report(self, pipeline):
        work, _ = pipeline
        metrics = {r["metric"]: r["value"] for r in read_csv(work / "eval.csv")}
        assert set(metrics) == {"acc", "asr", "pseudolabel_agreement", "rule_argmax_match"}
        assert 0.0 <= float(metrics["acc"]) <= 1.0 and metrics["asr"] != ""

    def test_rules_report(self, pipeline):
        work, _ = pipeline
        rows = read_csv(work / "rules.csv")
        assert len(rows) == 3 and all(r["source"] == "prototype_surrogate" for r in rows)
        assert all(r["truth_argmax"] == "0" for r in rows)
        for r in rows:
            assert sum(float(r[f"y{j}"]) for j in range(3)) == pytest.approx(1.0, abs=1e-12)

    def test_sweep_report(self, pipeline):
        work, _ = pipeline
        rows = read_csv(work / "sweep.csv")
        assert [r["lambda"] for r in rows] == ["10", "25"] and all(r["error"] == "" for r in rows)

    def test_preprocess_reports(self, pipeline):
        work, _ = pipeline
        rows = read_csv(work / "pre.csv")
        n_in = load_features(work / "poisoned.vibf").n
        n_out = load_features(work / "filtered.vibf").n
        assert len(rows) == n_in and n_in - n_out == sum(int(r["removed"]) for r in rows)
        assert len(read_csv(work / "dist.csv")) == 4

    def test_params_are_valid(self, pipeline):
        work, _ = pipeline
        p = load_params(work / "model.vibp")
        np.testing.assert_allclose(np.linalg.norm(p.mu, axis=1), 1.0, atol=1e-12)


def test_bitwise_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert stable_bytes(pa) == stable_bytes(pb), pa.name


def test_drop_column():
    assert drop_column("a,b,c\n1,2,3", "b") == "a,c\n1,3"


class TestErrors:
    def test_missing_input(self, tmp_path, capsys):
        code = main(["train", "--in", str(tmp_path / "nope.vibf"), "--params-out", str(tmp_path / "p.vibp")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code != 0 and len(err) == 1
        assert err[0].startswith("error code=") and "nope.vibf" in err[0]

    def test_bad_config_value(self, tmp_path, capsys):
        run(["generate", "--classes", "2", "--dim", "4", "--n-per-class", "10", "--out", tmp_path / "a.vibf"])
        code = main(["train", "--in", str(tmp_path / "a.vibf"), "--params-out", str(tmp_path / "p.vibp"),
                     "--lambda", "0.5"])
        err = capsys.readouterr().err
        assert code == 2 and "code=bad_lambda" in err

    def test_bad_magic(self, tmp_path, capsys):
        (tmp_path / "x.vibf").write_bytes(b"NOPE" + bytes(32))
        code = main(["preprocess", "--in", str(tmp_path / "x.vibf"), "--out", str(tmp_path / "y.vibf")])
        assert code == 2 and "code=bad_magic" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    run(["generate", "--classes", "2", "--dim", "4", "--n-per-class", "20", "--out", tmp_path / "a.vibf"])
    (tmp_path / "c.cfg").write_text("total_iters = 7\nestep_period = 3\nbatch_size = 8\n", encoding="utf-8")
    run(["train", "--in", tmp_path / "a.vibf", "--params-out", tmp_path / "p.vibp", "--config", tmp_path / "c.cfg",
         "--total-iters", "5", "--log", tmp_path / "log.csv"])
    rows = read_csv(tmp_path / "log.csv")
    assert len(rows) == 5
    assert [r["iter"] for r in rows if r["elbo"]] == ["0", "3"]
