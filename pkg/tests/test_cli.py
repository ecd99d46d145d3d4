import json
import subprocess
import sys

import pytest

from distant_rationales.cli import main

TINY = ["--n-train", "40", "--n-valid", "16", "--n-test", "16"]
FAST = ["--epochs", "1", "--batch-size", "16", "--embedding-dim", "6", "--kernel-widths", "2,3",
        "--kernels-per-width", "2", "--hidden-dim", "4"]


def test_generate_then_train_smoke(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["generate", "--out-dir", out, "--seed", "3"] + TINY) == 0
    assert (tmp_path / "train.jsonl").exists() and (tmp_path / "lexicon.tsv").exists()
    assert main(["train", "--out-dir", out, "--method", "none"] + FAST) == 0
    assert (tmp_path / "model.npz").exists() and (tmp_path / "run.jsonl").exists()


def test_threshold_is_echoed_in_run_record(tmp_path):
    out = str(tmp_path)
    main(["generate", "--out-dir", out] + TINY)
    assert main(["train", "--out-dir", out, "--method", "marginal_gate", "--threshold", "0.7"] + FAST) == 0
    header = json.loads((tmp_path / "run.jsonl").read_text().splitlines()[0])
    assert header["config"]["train"]["threshold"] == 0.7
    assert header["config"]["train"]["method"] == "marginal_gate"


def test_matrix_two_methods_two_seeds(tmp_path, capsys):
    code = main(["matrix", "--out-dir", str(tmp_path), "--methods", "base,order", "--seeds", "2"] + TINY + FAST)
    assert code == 0
    rows = [l for l in (tmp_path / "comparison.tsv").read_text().splitlines() if not l.startswith(("#", "method"))]
    assert len(rows) == 2
    assert all(r.split("\t")[2] == "2" for r in rows)


def test_perturb_trace_and_report(tmp_path):
    out = str(tmp_path)
    assert main(["perturb", "--out-dir", out, "--methods", "none,order", "--seeds", "1",
                 "--removal", "0.5", "--injection", "0.1"] + TINY + FAST) == 0
    assert (tmp_path / "sweep_removal.tsv").exists() and (tmp_path / "sweep_noise.tsv").exists()
    assert main(["trace", "--out-dir", out]) == 0
    assert main(["report", "--out-dir", str(tmp_path / "rep"), "--runs", str(tmp_path / "runs")]) == 0
    assert (tmp_path / "rep" / "sweep_removal.svg").exists()


def test_annotate(tmp_path):
    main(["generate", "--out-dir", str(tmp_path)] + TINY)
    (tmp_path / "lex2.tsv").write_text("w0001\tneutral\n")
    assert main(["annotate", "--input", str(tmp_path / "test.jsonl"), "--lexicon", str(tmp_path / "lex2.tsv"),
                 "--output", str(tmp_path / "re.jsonl")]) == 0
    assert (tmp_path / "re.jsonl").exists()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nmethod = gate\nthreshold = 0.5\nepochs = 1\nbatch-size = 16\n"
                   "embedding_dim = 6\nkernel_widths = 2,3\nkernels_per_width = 2\nhidden_dim = 4\n")
    out = str(tmp_path)
    main(["generate", "--out-dir", out] + TINY)
    assert main(["train", "--config", str(cfg), "--out-dir", out, "--threshold", "0.8"]) == 0
    header = json.loads((tmp_path / "run.jsonl").read_text().splitlines()[0])
    assert header["config"]["train"]["method"] == "gate"
    assert header["config"]["train"]["threshold"] == 0.8


def test_invalid_config_value_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = many\n")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) != 0
    assert "epochs" in capsys.readouterr().err
    cfg.write_text("lam = -1\n")
    main(["generate", "--out-dir", str(tmp_path)] + TINY)
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) != 0
    assert "lam" in capsys.readouterr().err
    cfg.write_text("colour = blue\n")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) != 0
    assert "colour" in capsys.readouterr().err


def test_unknown_flag_prints_usage_and_fails(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "distant_rationales", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
