import csv
import json

import pytest
import yaml

from ehr_consensus.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main

SMALL = {
    "folds": 3, "epochs": 2, "k": 5, "pfi_repeats": 2, "bootstrap": 3,
    "synth": {"n_subjects": 300, "n_hospitalisation": 30, "n_prescription": 20, "n_blood_test": 6,
              "n_history": 2, "n_latent_groups": 5, "sparsity_target": 0.95, "events_per_activation": 3},
}


@pytest.fixture()
def config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return str(p)


def _matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return names, {r[0]: dict(zip(names, map(float, r[1:]))) for r in rows[1:]}


def test_synth_byte_identical(tmp_path, config):
    for d in ("a", "b"):
        assert main(["synth", "--config", config, "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("events.csv", "labels.csv", "truth.json", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "events.csv").read_text().splitlines()[0]
    assert header == "subject_id,event_day,family,code,value,unit"


def test_synth_zero_subjects_is_validation_error(tmp_path, config, capsys):
    code = main(["synth", "--config", config, "--out", str(tmp_path), "--n-subjects", "0"])
    assert code == EXIT_INVALID
    assert "n_subjects" in capsys.readouterr().err


def test_bad_flags_and_unknown_config_keys(tmp_path):
    assert main(["pipeline", "--folds", "many"]) == EXIT_INVALID
    bad = tmp_path / "bad.yaml"
    bad.write_text("foldz: 3\n")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_INVALID
    assert main(["encode", "--events", str(tmp_path / "nope.csv"), "--labels", str(bad),
                 "--out", str(tmp_path)]) == EXIT_INVALID


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    runs = []
    for d in ("a", "b"):
        assert main(["pipeline", "--config", str(cfg), "--out", str(root / d)]) == EXIT_OK
        runs.append(root / d)
    return runs


def test_pipeline_manifest_lists_existing_files(pipeline_run):
    out = pipeline_run[0]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    files = summary["files"]
    for name in ("metrics.csv", "agreement_raw.csv", "agreement_clustered.csv", "top_k.csv",
                 "connectivity.csv", "cluster_composition.csv", "vocab.txt", "events.csv"):
        assert name in files
    from ehr_consensus.io import sha256

    for name, digest in files.items():
        assert (out / name).exists() and sha256(out / name) == digest
    produced = {p.name for p in out.iterdir()} - {"summary.json"}
    assert produced == set(files)


def test_pipeline_rerun_identical(pipeline_run):
    a, b = pipeline_run
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_pipeline_metrics_layout(pipeline_run):
    with open(pipeline_run[0] / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model"] for r in rows] == ["logistic", "sparse_gru", "bow_gru"]
    for r in rows:
        assert 0.0 <= float(r["auc_mean"]) <= 1.0 and float(r["auc_std"]) >= 0.0


def test_pipeline_stage_failure_marks_stale(tmp_path, config, monkeypatch):
    assert main(["pipeline", "--config", config, "--out", str(tmp_path), "--rbo-p", "1.5"]) == EXIT_INVALID

    def broken(*a, **kw):
        raise RuntimeError("solver diverged")

    # the cluster stage fails after training has written files
    monkeypatch.setattr("ehr_consensus.cli.spectral_cocluster", broken)
    code = main(["pipeline", "--config", config, "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "failed" and summary["stage"] == "cluster"
    assert "solver diverged" in summary["error"]
    assert "metrics.csv" in (tmp_path / "STALE").read_text().split()


def _register(reg, name, imp, scores, vocab, labels=None):
    argv = ["register-scores", "--name", name, "--importance", str(imp), "--scores", str(scores),
            "--vocab", str(vocab), "--registry", str(reg)]
    if labels:
        argv += ["--labels", str(labels)]
    return main(argv)


def test_register_copy_agrees_with_itself(pipeline_run, tmp_path):
    out = pipeline_run[0]
    reg = tmp_path / "reg"
    assert _register(reg, "ext_a", out / "importance_logistic.txt", out / "scores_logistic.txt",
                     out / "vocab.txt", out / "labels.csv") == EXIT_OK
    assert _register(reg, "ext_b", out / "importance_sparse_gru.txt", out / "scores_sparse_gru.txt",
                     out / "vocab.txt") == EXIT_OK
    assert json.loads((reg / "ext_a.json").read_text())["metrics"]["auc"] >= 0.0

    res = tmp_path / "cons"
    argv = ["consensus", "--out", str(res), "--registry", str(reg)]
    for name in ("logistic", "sparse_gru", "bow_gru"):
        argv += ["--importance", f"{name}={out / f'importance_{name}.txt'}"]
    assert main(argv) == EXIT_OK
    names, m = _matrix(res / "agreement_raw.csv")
    assert len(names) == 3 + 2
    assert m["logistic"]["ext_a"] == 1.0
    assert m["sparse_gru"]["ext_b"] == 1.0


def test_register_rejects_misaligned_vocabulary(pipeline_run, tmp_path, capsys):
    out = pipeline_run[0]
    lines = (out / "importance_logistic.txt").read_text().splitlines()
    short = tmp_path / "short.txt"
    short.write_text("\n".join(lines[1:]) + "\n")
    code = _register(tmp_path / "reg", "bad", short, out / "scores_logistic.txt", out / "vocab.txt")
    assert code == EXIT_INVALID
    assert "missing" in capsys.readouterr().err
    assert not (tmp_path / "reg" / "bad.json").exists()


def test_register_rejects_missing_subjects(pipeline_run, tmp_path, capsys):
    out = pipeline_run[0]
    lines = (out / "scores_logistic.txt").read_text().splitlines()
    partial = tmp_path / "partial.txt"
    partial.write_text("\n".join(lines[:-3]) + "\n")
    code = _register(tmp_path / "reg", "bad", out / "importance_logistic.txt", partial,
                     out / "vocab.txt", out / "labels.csv")
    assert code == EXIT_INVALID
    assert "misses 3 subjects" in capsys.readouterr().err


def test_stage_commands_chain(pipeline_run, tmp_path):
    out = pipeline_run[0]
    common = ["--events", str(out / "events.csv"), "--labels", str(out / "labels.csv")]
    assert main(["encode", *common, "--out", str(tmp_path / "enc")]) == EXIT_OK
    assert main(["train", *common, "--out", str(tmp_path / "tr"), "--model", "logistic",
                 "--folds", "3", "--epochs", "1"]) == EXIT_OK
    model = next((tmp_path / "tr").glob("*.npz"))
    assert main(["interpret", *common, "--model-file", str(model), "--pfi-repeats", "1",
                 "--out", str(tmp_path / "imp.txt")]) == EXIT_OK
    tokens = [t for t in (out / "vocab.txt").read_text().split() if t != "[UNK]"]
    assert [line.split()[0] for line in (tmp_path / "imp.txt").read_text().splitlines()] == tokens
    assert main(["cluster", *common, "--out", str(tmp_path / "cl"), "--k", "4"]) == EXIT_OK
    assert (tmp_path / "cl" / "clusters.txt").exists()
