import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from kcrlab.cli import analyze_features, gd_verify, main, read_features_csv, read_metrics_csv
from kcrlab.config import ConfigFile, DataSpec, RunConfig
from kcrlab.errors import ParseError, SchemaError
from kcrlab.model import ModelConfig


def tiny_config(tmp_path, **run):
    base = dict(t_search=1, t_train=3, t_warm=1, batch=16, m_land=16, gamma=0.5, lr_warmup_epochs=1)
    cf = ConfigFile(model=ModelConfig(image_side=8, patch=4, D=8, heads=2, depth=1, C=3, d_min=2),
                    run=RunConfig(**{**base, **run}), data=DataSpec(classes=3, n=48, n_val=12, image_side=8))
    path = tmp_path / "cfg.json"
    cf.dump(path)
    return path


def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)
    return path


def test_exit_codes(tmp_path, capsys):
    assert main(["search", "--out-dir", str(tmp_path), "--bogus"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": 1, "run": {"gamma": 0.9}}))
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "gamma" in err and "--bogus" in err
    # eta = 3 / lambda_1 is unstable: a short run warns, a long one diverges
    assert main(["gd-verify", "--eta-scale", "3", "--t", "5"]) == 0
    assert "unstable" in capsys.readouterr().err
    assert main(["gd-verify", "--eta-scale", "3", "--t", "60"]) == 2
    assert "iteration 20" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "kcrlab", "gd-verify", "--t", "5"], capture_output=True, text=True)
    assert out.returncode == 0 and "PASS" in out.stdout


def test_gen_data_writes_idx_and_is_seeded(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "a"), "--seed", "3"]) == 0
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path / "b"), "--seed", "3"]) == 0
    doc = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert doc["seed"] == 3 and doc["config"]["data"]["seed"] == 3
    for name in doc["files"].values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_read_features_csv(tmp_path):
    F, labels = read_features_csv(write_csv(tmp_path / "f.csv", [[1, 2, 0], [3, 4, 1]], ["a", "b", "label"]))
    assert F.tolist() == [[1, 2], [3, 4]] and labels.tolist() == [0, 1]
    with pytest.raises(ParseError, match="row 3"):
        read_features_csv(write_csv(tmp_path / "g.csv", [[1, 2], [3]], ["a", "b"]))
    with pytest.raises(ParseError, match="row 2"):
        read_features_csv(write_csv(tmp_path / "h.csv", [[1, 2], ["x", 1]]))
    with pytest.raises(ParseError, match="non-finite"):
        read_features_csv(write_csv(tmp_path / "i.csv", [[1, "nan"]]))
    with pytest.raises(ParseError):
        read_features_csv(write_csv(tmp_path / "j.csv", [], ["a"]))


def test_analyze_identity_features(tmp_path):
    # F = 2I gives K_n = I: h/4 + sqrt((4 - h)/4) is 1.0 at h = 0 and h = 4, ties go to h = 0
    path = write_csv(tmp_path / "eye2.csv", (2 * np.eye(4)).tolist())
    assert main(["analyze", str(path), "--out-dir", str(tmp_path / "o"), "--full-landmarks"]) == 0
    doc = json.loads((tmp_path / "o" / "bounds.json").read_text())
    assert doc["kc"] == 1.0 and doc["kc_h"] == 0
    assert doc["eigenvalues"] == [1.0] * 4
    assert doc["max_abs_tnn_delta"] <= 1e-12
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "spectrum.csv").read_text())))
    assert [float(r["tnn_exact"]) for r in rows] == pytest.approx([4.0, 3.0, 2.0, 1.0, 0.0])
    # F = I gives K_n = I/4, so the h = 0 value is sqrt(1/4)
    path = write_csv(tmp_path / "eye.csv", np.eye(4).tolist())
    assert main(["analyze", str(path), "--out-dir", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p" / "bounds.json").read_text())
    assert doc["kc"] == 0.5 and doc["kc_h"] == 0
    b = doc["bound"]
    assert b["upper"] - b["train_residual"] == b["train_residual"] - b["lower"]


def test_analyze_full_landmarks_delta(tmp_path):
    F = np.random.default_rng(0).normal(size=(30, 6))
    res = analyze_features(F, RunConfig(), full_landmarks=True, labels=np.arange(30) % 3)
    assert res["max_abs_tnn_delta"] <= 1e-6
    assert res["akc"] == pytest.approx(res["kc"], abs=1e-9)
    assert res["residual_source"].startswith("linear-probe")
    part = analyze_features(F, RunConfig(m_land=10))
    assert part["landmarks"] == 10 and part["tnn_approx_r"] >= part["tnn_exact_r"] - 1e-12


def test_gd_verify_function():
    res = gd_verify(t=30)
    assert res["pass"] and res["max_rel_deviation"] <= 1e-8 and not res["warnings"]
    assert gd_verify(t=0)["max_rel_deviation"] == 0.0


def test_report_null_and_perfect_correlation(tmp_path, capsys):
    header = ["epoch", "phase", "ce", "kcr", "akc", "lower", "upper", "train_sq", "val_sq", "val_acc", "flops", "tau"]
    one = write_csv(tmp_path / "one.csv", [[1, "regularized", 1, 0, 0.1, 0, 1, 0.5, 0.6, 0.9, 10, 1]], header)
    assert main(["report", str(one)]) == 0
    assert "null" in capsys.readouterr().out
    assert json.loads((tmp_path / "curves.json").read_text())["pearson_upper_val_sq"] is None
    rows = [[e, "regularized", 1, 0, 0.1, 0, e, 0.5, 2 * e + 1, 0.9, 10, 1] for e in range(1, 5)]
    lin = write_csv(tmp_path / "lin.csv", [[0, "warmup", 1, 0, "nan", "nan", "nan", 0.5, 9, 0.9, 10, 1]] + rows,
                    header)
    assert main(["report", str(lin), "--out-dir", str(tmp_path / "r")]) == 0
    doc = json.loads((tmp_path / "r" / "curves.json").read_text())
    assert doc["pearson_upper_val_sq"] == pytest.approx(1.0) and doc["regularized_epochs"] == 4
    assert doc["series"]["upper"][0] is None
    bad = write_csv(tmp_path / "bad.csv", [[1, 2]], ["epoch", "phase"])
    with pytest.raises(SchemaError):
        read_metrics_csv(bad)
    assert main(["report", str(bad)]) == 1


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(tmp)
    codes = [main(["train", "--config", str(cfg), "--out-dir", str(tmp / d), "--seed", "5"]) for d in ("a", "b")]
    codes.append(main(["search", "--config", str(cfg), "--out-dir", str(tmp / "s")]))
    return tmp, cfg, codes


def test_train_outputs(cli_runs):
    tmp, _, codes = cli_runs
    assert codes == [0, 0, 0]
    out = tmp / "a"
    for name in ("architecture.json", "model.json", "metrics.csv", "bounds.json", "curves.json"):
        assert (out / name).exists(), name
    arch = json.loads((out / "architecture.json").read_text())
    assert arch["seed"] == 5 and arch["total_flops"] <= arch["unpruned_flops"]
    bounds = json.loads((out / "bounds.json").read_text())
    assert len(bounds["reports"]) == 3
    for rep in bounds["reports"]:
        assert rep["upper"] - rep["train_residual"] == rep["train_residual"] - rep["lower"]
    assert (tmp / "s" / "supernet.json").exists()


def test_train_is_byte_identical_on_rerun(cli_runs):
    tmp, _, _ = cli_runs
    for name in ("metrics.csv", "bounds.json", "architecture.json"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes(), name


def test_analyze_checkpoint(cli_runs):
    tmp, cfg, _ = cli_runs
    assert main(["analyze", str(tmp / "a" / "model.json"), "--config", str(cfg), "--seed", "5",
                 "--out-dir", str(tmp / "an")]) == 0
    doc = json.loads((tmp / "an" / "bounds.json").read_text())
    assert doc["n"] == 48 and doc["residual_source"] == "given"


def test_epochs_override_clamps_warmup(tmp_path):
    cfg = tiny_config(tmp_path, t_warm=3)
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--out-dir", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert rows[-1].split(",")[1] == "warmup"
