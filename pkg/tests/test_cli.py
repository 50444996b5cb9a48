import json

import pytest

from ehrgan import cli

CONFIG = {
    "seed": 5,
    "sim": {"n_records": 800, "n_icd": 12, "n_cpt": 3},
    "clean": {"holdout_fraction": 0.5},
    "gan": {"shrink": 32, "epochs": 2, "batch_size": 100, "probe_size": 100},
    "bvae": {"hidden": [16], "latent_dim": 4, "epochs": 2, "batch_size": 100},
    "privacy": {"known_sizes": [50, 100], "n_targets": 50},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    c = str(cfg)
    steps = [
        ["simulate", "--config", c, "--out-dir", str(root / "sim")],
        ["clean", "--config", c, "--real", str(root / "sim" / "cohort.csv"), "--out-dir", str(root / "clean")],
        ["train", "--config", c, "--real", str(root / "clean" / "cohort.csv"), "--out-dir", str(root / "hgan")],
        ["train", "--config", c, "--real", str(root / "clean" / "cohort.csv"), "--variant", "hgan-u", "--out-dir", str(root / "hganu")],
        ["generate", "--config", c, "--model", str(root / "hgan" / "model.json"), "--out-dir", str(root / "gen")],
    ]
    for argv in steps:
        assert cli.run(argv) == 0, argv
    return root, c


def read(path):
    return json.loads(path.read_text())


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    assert (root / "sim" / "ground_truth.json").exists()
    clean = read(root / "clean" / "report.json")
    assert clean["n_train"] + clean["n_holdout"] == clean["cleaning"]["n_output"]
    train = read(root / "hgan" / "report.json")
    assert train["variant"] == "hgan" and len(train["history"]) == 2
    assert read(root / "hganu" / "report.json")["variant"] == "hgan-u"
    gen = read(root / "gen" / "report.json")
    assert gen["n_records"] == clean["n_train"]


def test_reports_carry_provenance(pipeline):
    root, _ = pipeline
    for sub in ("sim", "clean", "hgan", "gen"):
        doc = read(root / sub / "report.json")
        for key in ("config_hash", "seeds", "schema_hash", "versions"):
            assert key in doc, (sub, key)
    assert read(root / "hgan" / "report.json")["seeds"] == {"train": 5}


def test_self_evaluation_has_unit_correlation(pipeline, tmp_path):
    root, c = pipeline
    real = str(root / "clean" / "cohort.csv")
    assert cli.run(["evaluate", "--config", c, "--real", real, "--synth", real, "--metrics", "dws,cvt,far,ccd", "--out-dir", str(tmp_path)]) == 0
    doc = read(tmp_path / "report.json")
    assert doc["metrics"]["dws"]["pearson"] == pytest.approx(1.0)
    assert doc["metrics"]["dws"]["mean_distance"] == 0.0
    assert (tmp_path / "dws.svg").exists() and (tmp_path / "dws.csv").exists()
    assert (tmp_path / "cvt_bmi_max-med.svg").exists()


def test_full_evaluate_and_attack(pipeline, tmp_path):
    root, c = pipeline
    real, synth = str(root / "clean" / "cohort.csv"), str(root / "gen" / "synth.csv")
    assert cli.run(["evaluate", "--config", c, "--real", real, "--synth", synth, "--out-dir", str(tmp_path / "ev")]) == 0
    metrics = read(tmp_path / "ev" / "report.json")["metrics"]
    assert set(metrics) == set(cli.ALL_METRICS)
    argv = ["attack", "--config", c, "--real", real, "--holdout", str(root / "clean" / "holdout.csv"), "--synth", synth]
    assert cli.run(argv + ["--out-dir", str(tmp_path / "at")]) == 0
    doc = read(tmp_path / "at" / "report.json")
    assert set(doc["membership"]) == {"codes", "full"} and len(doc["attribute"]["full"]) == 4


def test_sparsity_and_report(pipeline, tmp_path):
    root, c = pipeline
    models = ["--model", str(root / "hgan" / "model.json"), "--model", str(root / "hganu" / "model.json")]
    assert cli.run(["sparsity", "--config", c, *models, "--n", "200", "--out-dir", str(tmp_path / "sp")]) == 0
    body = read(tmp_path / "sp" / "report.json")["sparsity"]
    assert body["n_layers"] == 6 and len(body["layers"]) == 6
    assert ("deviation_note" in body) == (not body["hgan_lower_in_majority"])
    assert (tmp_path / "sp" / "sparsity_layer0.svg").exists()
    real = str(root / "clean" / "cohort.csv")
    cli.run(["evaluate", "--real", real, "--synth", real, "--metrics", "dws", "--out-dir", str(tmp_path / "ev")])
    inputs = [str(tmp_path / "ev" / "report.json"), str(tmp_path / "sp" / "report.json")]
    assert cli.run(["report", "--inputs", *inputs, "--out-dir", str(tmp_path / "rep")]) == 0
    merged = read(tmp_path / "rep" / "report.json")
    assert set(merged["reports"]) == {"ev", "sp"}
    assert (tmp_path / "rep" / "ev_dws.svg").exists()


def test_flags_override_config(pipeline, tmp_path):
    root, c = pipeline
    argv = ["train", "--config", c, "--real", str(root / "clean" / "cohort.csv"), "--epochs", "1", "--beta", "0", "--lambda", "5", "--seed", "9"]
    assert cli.run(argv + ["--out-dir", str(tmp_path)]) == 0
    doc = read(tmp_path / "report.json")
    assert len(doc["history"]) == 1 and doc["seeds"] == {"train": 9}
    assert doc["config"]["beta"] == 0.0 and doc["config"]["lam"] == 5.0


def test_exit_codes(pipeline, tmp_path, capsys):
    root, c = pipeline
    assert cli.run([]) == 1
    assert cli.run(["simulate"]) == 1  # no --out-dir
    assert cli.run(["bogus"]) == 1
    assert cli.run(["evaluate", "--real", str(tmp_path / "missing.csv"), "--synth", "x", "--out-dir", str(tmp_path)]) == 2
    assert cli.run(["evaluate", "--metrics", "nope", "--real", "a", "--synth", "b", "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("age,gender\n1,M\n")
    assert cli.run(["train", "--real", str(bad), "--out-dir", str(tmp_path)]) == 2
    # holdout too small for the requested known-set sizes
    tiny = {**CONFIG, "privacy": {"known_sizes": [100000]}}
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(tiny))
    real = str(root / "clean" / "cohort.csv")
    argv = ["attack", "--config", str(cfg), "--real", real, "--holdout", real, "--synth", real, "--out-dir", str(tmp_path)]
    assert cli.run(argv) == 2
    err = capsys.readouterr().err
    assert "usage error" in err and "data error" in err


def test_divergence_exit_code(pipeline, tmp_path, monkeypatch):
    from ehrgan import hgan

    root, c = pipeline
    monkeypatch.setattr(hgan, "DIVERGENCE_LIMIT", 0.0)
    assert cli.run(["train", "--config", c, "--real", str(root / "clean" / "cohort.csv"), "--out-dir", str(tmp_path)]) == 3
