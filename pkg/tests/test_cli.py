import json
import re
import subprocess
import sys

import numpy as np
import pytest

from sine_dae import checkpoint
from sine_dae.audio_io import Waveform, read_wav, write_wav
from sine_dae.cli import build_parser, main, train_config_from_args
from sine_dae.separation import evaluate_run, read_report_csv, read_representation
from sine_dae.synth import Track

TINY_FLAGS = ["--channels", "8", "--kernel-len", "32", "--stride", "8", "--segment", "2048",
              "--batch", "4", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth-data", "--out", str(root), "--tracks", "3", "--duration", "1.0",
                 "--test-tracks", "1", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(corpus / "train"), "--out", str(out), "--epochs", "1", *TINY_FLAGS]) == 0
    return out


def _subcommand_flags(name):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[name]
    return {opt for a in sub._actions for opt in a.option_strings if opt.startswith("--")}


@pytest.mark.parametrize("name", ["synth-data", "train", "evaluate", "separate", "export-repr", "gradcheck"])
def test_help_documents_every_flag(name):
    out = subprocess.run([sys.executable, "-m", "sine_dae.cli", name, "--help"],
                         capture_output=True, text=True, check=True).stdout
    for flag in _subcommand_flags(name):
        assert re.search(rf"{re.escape(flag)}\b", out), flag
    assert {"--seed", "--config"} <= _subcommand_flags(name)


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "x", "--out", "y", "--bogus"])
    assert exc.value.code == 2


def test_default_train_config_is_the_reference_protocol():
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    cfg = train_config_from_args(args).to_dict()
    m = cfg["model"]
    assert (m["channels"], m["stride"], m["kernel_len"], m["dil_kernel_len"], m["dilation"]) == (800, 256, 2048, 5, 10)
    assert (cfg["lam"], cfg["lr"], cfg["batch"], cfg["n"], cfg["hop"]) == (0.5, 1e-4, 8, 44100, 22050)
    assert m["decoder"] == "mod-cos" and m["squared"] is True


def test_train_writes_one_checkpoint_per_epoch(trained):
    assert sorted(p.name for p in trained.glob("epoch*.ckpt")) == ["epoch01.ckpt"]
    manifest, _ = checkpoint.read_manifest(trained / "epoch01.ckpt")
    assert manifest["config"]["model"]["channels"] == 8
    assert json.loads((trained / "config.json").read_text())["config_hash"] == manifest["config_hash"]
    assert (trained / "train_log.jsonl").read_text().strip()


def test_train_is_reproducible(corpus, trained, tmp_path):
    assert main(["train", "--data", str(corpus / "train"), "--out", str(tmp_path), "--epochs", "1", *TINY_FLAGS]) == 0
    assert checkpoint.file_hash(tmp_path / "epoch01.ckpt") == checkpoint.file_hash(trained / "epoch01.ckpt")


def test_train_missing_stems_is_data_error(corpus, tmp_path, capsys):
    (tmp_path / "song").mkdir()
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), *TINY_FLAGS]) == 3
    assert "song" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_evaluate_report_carries_config_hash(corpus, trained, tmp_path):
    assert main(["evaluate", "--checkpoint", str(trained), "--data", str(corpus / "test"),
                 "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "report.json").read_text())
    manifest, _ = checkpoint.read_manifest(trained / "epoch01.ckpt")
    assert summary["config_hash"] == manifest["config_hash"]
    assert summary["untrained"] is True  # one epoch on a toy corpus


def test_evaluate_missing_checkpoint_leaves_nothing(corpus, tmp_path):
    out = tmp_path / "report"
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(corpus / "test"),
                 "--out", str(out)]) != 0
    assert not out.exists()


def test_runs_are_pooled(corpus, tmp_path):
    runs = tmp_path / "runs"
    assert main(["train", "--data", str(corpus / "train"), "--out", str(runs), "--epochs", "1",
                 "--runs", "3", *TINY_FLAGS]) == 0
    assert sorted(p.name for p in runs.iterdir()) == ["run0", "run1", "run2"]
    assert main(["evaluate", "--checkpoint", str(runs), "--data", str(corpus / "test"),
                 "--out", str(tmp_path / "rep")]) == 0
    rows = read_report_csv(tmp_path / "rep" / "report.csv")
    assert {r["run_id"] for r in rows} == {"0", "1", "2"}
    summary = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert len(summary["bm_si_sdr"]["run_medians"]) == 3
    assert sum(summary["bm_si_sdr"][k] for k in ("count", "pos_inf_count", "neg_inf_count")) == len(rows)


def _stems(corpus, n=2048):
    track = sorted((corpus / "test").iterdir())[0]
    v = read_wav(track / "vocals.wav").samples
    a = read_wav(track / "accompaniment.wav").samples
    start = int(np.argmax(np.convolve(v * v, np.ones(n), mode="valid")))  # loudest window
    return v[start:start + n], a[start:start + n]


def test_separate_matches_evaluation_path(corpus, trained, tmp_path, capsys):
    v, a = _stems(corpus)
    write_wav(tmp_path / "v.wav", Waveform(v), "float32")
    write_wav(tmp_path / "a.wav", Waveform(a), "float32")
    ckpt = trained / "epoch01.ckpt"
    assert main(["separate", "--checkpoint", str(ckpt), "--vocals", str(tmp_path / "v.wav"),
                 "--accompaniment", str(tmp_path / "a.wav"), "--out", str(tmp_path / "est.wav"), "--json"]) == 0
    printed = json.loads(capsys.readouterr().out)["si_sdr_db"]
    assert len(read_wav(tmp_path / "est.wav")) == v.size
    model, _ = checkpoint.load(ckpt)
    rec = evaluate_run([Track("t", v, a)], model, n=v.size).records[0]
    assert abs(printed - rec.bm_si_sdr) <= 1e-9


def test_separate_prints_two_decimals(corpus, trained, tmp_path, capsys):
    v, a = _stems(corpus)
    write_wav(tmp_path / "v.wav", Waveform(v), "float32")
    write_wav(tmp_path / "a.wav", Waveform(np.zeros_like(a)), "float32")
    assert main(["separate", "--checkpoint", str(trained / "epoch01.ckpt"), "--vocals", str(tmp_path / "v.wav"),
                 "--accompaniment", str(tmp_path / "a.wav"), "--out", str(tmp_path / "e.wav")]) == 0
    assert re.search(r"SI-SDR -?\d+\.\d\d dB", capsys.readouterr().out)
    model, _ = checkpoint.load(trained / "epoch01.ckpt")
    np.testing.assert_allclose(read_wav(tmp_path / "e.wav").samples, model.autoencode(v), atol=1e-6)


def test_separate_length_mismatch(corpus, trained, tmp_path):
    v, a = _stems(corpus)
    write_wav(tmp_path / "v.wav", Waveform(v), "float32")
    write_wav(tmp_path / "a.wav", Waveform(a[:-10]), "float32")
    assert main(["separate", "--checkpoint", str(trained / "epoch01.ckpt"), "--vocals", str(tmp_path / "v.wav"),
                 "--accompaniment", str(tmp_path / "a.wav"), "--out", str(tmp_path / "e.wav")]) == 3
    assert not (tmp_path / "e.wav").exists()


def test_export_repr(corpus, trained, tmp_path):
    v, _ = _stems(corpus)
    write_wav(tmp_path / "v.wav", Waveform(v), "float32")
    assert main(["export-repr", "--checkpoint", str(trained / "epoch01.ckpt"), "--input", str(tmp_path / "v.wav"),
                 "--out", str(tmp_path / "a.bin")]) == 0
    assert read_representation(tmp_path / "a.bin").shape == (8, 2048 // 8)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)
