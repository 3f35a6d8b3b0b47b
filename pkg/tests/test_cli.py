from __future__ import annotations

import csv

import pytest

from lesiongraph.cli import config_hash, gradient_suite, main


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--seed", "7", "--n-patients", "60", "--out", str(d)]) == 0
    return d


def _data(d):
    return ["--clinical", str(d / "clinical.csv"), "--lesions", str(d / "lesions.csv")]


def test_gen_is_byte_identical(tmp_path, cohort_dir):
    assert main(["gen", "--seed", "7", "--n-patients", "60", "--out", str(tmp_path)]) == 0
    for name in ("clinical.csv", "lesions.csv", "synth_config.json"):
        assert (tmp_path / name).read_bytes() == (cohort_dir / name).read_bytes()
    first = (tmp_path / "clinical.csv").read_text().splitlines()[0]
    assert first.startswith("# lesiongraph gen seed=7 config=")


def test_config_hash_ignores_paths(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("x\n")
    b.write_text("x\n")
    assert config_hash({"k": 1}, [a]) == config_hash({"k": 1}, [b])
    b.write_text("y\n")
    assert config_hash({"k": 1}, [a]) != config_hash({"k": 1}, [b])


def test_train_export_compare(tmp_path, cohort_dir, capsys):
    out = tmp_path / "train"
    assert main(["train", *_data(cohort_dir), "--seed", "1", "--epochs", "2", "--hidden", "4", "--out", str(out)]) == 0
    rows = list(csv.reader(ln for ln in (out / "metrics.csv").open() if not ln.startswith("#")))
    assert rows[0] == ["epoch", "loss", "val_auc"] and len(rows) == 3

    att = tmp_path / "att"
    assert main(["export-attention", *_data(cohort_dir), "--checkpoint", str(out / "checkpoint.txt"),
                 "--patients", "P00,P01", "--out", str(att)]) == 0
    lines = [ln for ln in (att / "attention.csv").read_text().splitlines() if not ln.startswith("#")]
    assert lines[0] == "patient_id,layer,lesion_index,clinical_index,attention"
    by_row: dict = {}
    for rec in csv.DictReader(lines):
        key = (rec["patient_id"], rec["layer"], rec["lesion_index"])
        by_row[key] = by_row.get(key, 0.0) + float(rec["attention"])
    assert by_row and all(abs(v - 1.0) < 1e-12 for v in by_row.values())

    gs = tmp_path / "gs"
    assert main(["gridsearch", *_data(cohort_dir), "--seed", "1", "--variant", "cross-attention,mlp-clinical",
                 "--repeats", "2", "--epochs", "2", "--grid-hidden", "4", "--grid-gamma", "1", "--out", str(gs)]) == 0
    capsys.readouterr()
    assert main(["compare", str(gs), "--out", str(tmp_path / "cmp")]) == 0
    printed = capsys.readouterr().out
    assert "mlp-clinical" in printed
    assert (tmp_path / "cmp" / "summary.csv").read_text().startswith("# lesiongraph compare seed=1")


def test_error_exit_codes(tmp_path, capsys):
    assert main(["train", "--clinical", str(tmp_path / "none.csv"), "--lesions", str(tmp_path / "none.csv"),
                 "--seed", "1", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["bogus"]) == 2
    assert main(["gen", "--out", str(tmp_path)]) == 2  # --seed is required


def test_gradient_suite_passes():
    cases = gradient_suite(seed=3)
    targets = {c.target for c in cases}
    assert {"layer:gatv2", "layer:cross-attention", "model:cross-attention"} <= targets
    assert all(c.report.passed for c in cases), [c.target for c in cases if not c.report.passed]


def test_check_grad_command(tmp_path, capsys):
    assert main(["check-grad", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert "passed" in capsys.readouterr().out
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0].startswith("# lesiongraph check-grad seed=0")
    assert lines[1] == "target,param,max_rel_error,passed"
