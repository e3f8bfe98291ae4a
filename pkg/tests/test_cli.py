import re
import subprocess
import sys

import pytest

from maskdiff.cli import dispatch
from maskdiff.predictor import ModelDims, init_params
from maskdiff.toydata import build_toy_corpus, write_toy_corpus
from maskdiff.trainer import save_checkpoint


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = build_toy_corpus(seed=0, n_train_images=12, n_test_images=4, n_train=24, n_test=6, n_dialogue=6)
    paths = write_toy_corpus(root, corpus)
    ckpt = root / "tiny.ckpt"
    save_checkpoint(ckpt, init_params(0, ModelDims(d=16, d_ff=32, n_heads=2, max_len=160)))
    paths["ckpt"] = ckpt
    paths["root"] = root
    return paths


def run(argv, capsys):
    code = dispatch([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate_long_setting_is_valid(capsys):
    code, out, _ = run(["generate", "--gen-length", 256, "--block-length", 64, "--steps", 256], capsys)
    assert code == 0
    assert "L=256 B=64 Z=256" in out
    assert "calls=256" in out


def test_unknown_flag_and_subcommand(capsys):
    code, _, err = run(["generate", "--bogus"], capsys)
    assert code == 2 and "usage:" in err
    code, _, err = run(["frobnicate"], capsys)
    assert code == 2 and "usage:" in err
    code, _, err = run([], capsys)
    assert code == 2


def test_sweep_requires_corpus(capsys):
    code, _, err = run(["sweep", "--steps", "8"], capsys)
    assert code == 2 and "--corpus" in err


def test_invalid_config_is_usage_error(capsys):
    code, _, err = run(["generate", "--gen-length", 8, "--block-length", 3, "--steps", 8], capsys)
    assert code == 2 and "gen_length mod block_length" in err


def test_runtime_errors_exit_1(files, capsys):
    bad = files["root"] / "bad.ckpt"
    bad.write_bytes(b"nope")
    code, _, err = run(["generate", "--checkpoint", bad], capsys)
    assert code == 1 and "corrupt header" in err
    code, _, err = run(["eval", "--corpus", files["root"] / "missing.tsv", "--checkpoint", files["ckpt"]], capsys)
    assert code == 1


def test_threads_env(files, capsys, monkeypatch):
    monkeypatch.setenv("MDLM_THREADS", "zero")
    code, _, err = run(["generate", "--gen-length", 8, "--block-length", 8, "--steps", 8], capsys)
    assert code == 2 and "MDLM_THREADS" in err


def test_generate_is_deterministic_and_trace_renders(files, capsys, tmp_path):
    argv = ["generate", "--checkpoint", files["ckpt"], "--features", files["features"], "--image", "tr00001",
            "--prompt", "is it red?", "--gen-length", 16, "--block-length", 8, "--steps", 8,
            "--temperature", 0.8, "--remasking", "random", "--seed", 3]
    code1, out1, _ = run(argv + ["--out", tmp_path / "a.trace"], capsys)
    code2, out2, _ = run(argv + ["--out", tmp_path / "b.trace"], capsys)
    assert code1 == code2 == 0 and out1 == out2
    assert "remask=random" in out1 and "temperature=0.8" in out1 and "seed=3" in out1
    a = (tmp_path / "a.trace").read_text().splitlines()
    b = (tmp_path / "b.trace").read_text().splitlines()
    strip = lambda lines: [" ".join(w for w in ln.split() if not w.startswith(("latency=", "elapsed="))) for ln in lines]  # noqa: E731
    assert strip(a) == strip(b)
    code, view, _ = run(["inspect-trace", tmp_path / "a.trace"], capsys)
    assert code == 0
    assert len([ln for ln in view.splitlines() if re.match(r"\s*\d+ b\d ", ln)]) == 8


def test_sweep_and_eval(files, capsys, tmp_path):
    out_csv = tmp_path / "s.csv"
    code, out, _ = run(["sweep", "--corpus", files["test"], "--features", files["features"], "--checkpoint",
                        files["ckpt"], "--gen-length", 16, "--block-length", 16, "--steps", "16,8,4", "--out",
                        out_csv, "--limit", 3], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# sweep") and "configs=16:16:16;16:16:8;16:16:4" in lines[0]
    rows = out_csv.read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("gen_length,block_length,steps")
    code, out, _ = run(["sweep", "--corpus", files["test"], "--checkpoint", files["ckpt"], "--config", "8:4:4",
                        "--config", "8:8:2", "--limit", 2], capsys)
    assert code == 0 and "configs=8:4:4;8:8:2" in out
    code, out, _ = run(["eval", "--corpus", files["test"], "--checkpoint", files["ckpt"], "--gen-length", 8,
                        "--block-length", 8, "--steps", 8, "--limit", 2], capsys)
    assert code == 0 and out.startswith("# eval")


def _strip_timing(report):
    lines = report.splitlines()
    cols = lines[1].split(",")
    keep = [i for i, c in enumerate(cols) if c not in ("t_per_q", "t_per_w")]
    return [lines[0]] + [[row.split(",")[i] for i in keep] for row in lines[1:]]


def test_sweep_is_deterministic(files, capsys):
    argv = ["sweep", "--corpus", files["test"], "--checkpoint", files["ckpt"], "--gen-length", 8,
            "--block-length", 4, "--steps", "8,4", "--limit", 3, "--remasking", "random", "--temperature", 1.0]
    _, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert _strip_timing(a) == _strip_timing(b)


def test_train_stages_and_resume(files, capsys, tmp_path):
    s1 = tmp_path / "s1.ckpt"
    code, out, _ = run(["train", "--stage", "alignment", "--corpus", files["alignment"], "--features",
                        files["features"], "--checkpoint", files["ckpt"], "--out", s1, "--epochs", 1], capsys)
    assert code == 0 and "stage=alignment" in out and "trainable=projector " in out
    s2 = tmp_path / "s2.ckpt"
    argv = ["train", "--stage", "sd-sft", "--corpus", files["train"], "--features", files["features"],
            "--checkpoint", s1, "--epochs", 3, "--batch-size", 8, "--seed", 2]
    code, full, _ = run(argv + ["--out", s2], capsys)
    assert code == 0
    part = tmp_path / "part.ckpt"
    assert run(argv + ["--out", part, "--max-steps", 4], capsys)[0] == 0
    resumed = tmp_path / "resumed.ckpt"
    code, _, _ = run(["train", "--stage", "sd-sft", "--corpus", files["train"], "--features", files["features"],
                      "--checkpoint", part, "--resume", "--out", resumed], capsys)
    assert code == 0
    assert resumed.read_bytes() == s2.read_bytes()
    again = tmp_path / "again.ckpt"
    run(argv + ["--out", again], capsys)
    assert again.read_bytes() == s2.read_bytes()
    code, _, err = run(["train", "--stage", "md-sft", "--corpus", files["dialogue"], "--checkpoint", part,
                        "--resume", "--out", tmp_path / "x.ckpt"], capsys)
    assert code == 2 and "sd_sft" in err


def test_toy_corpus_command(tmp_path, capsys):
    code, out, _ = run(["toy-corpus", "--out", tmp_path / "toy"], capsys)
    assert code == 0 and (tmp_path / "toy" / "train.tsv").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "maskdiff", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "inspect-trace" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "maskdiff", "sweep"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--corpus" in proc.stderr
