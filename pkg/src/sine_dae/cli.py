"""Command-line entry points: ``sine-dae <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
``SINE_DAE_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .audio_io import Waveform, WavFormatError, read_wav, write_wav
from .grad import DimensionError, GradcheckReport, Tape, UndefinedReferenceError, gradcheck
from .losses import EmptyReportError, si_sdr
from .model import ConfigError, ModelConfig, SineDAE
from .separation import evaluate_run, separate, write_representation
from .synth import MissingStemsError, SynthSpec, load_corpus, synth_dataset, write_corpus
from .training import NumericalError, TrainConfig, forward_loss, loss_value, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sine_dae")


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def _fmt_db(v: float) -> str:
    return f"{v:.2f}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    conf = _load_config(args.config)
    spec = SynthSpec(**{**conf, **{k: v for k, v in {
        "tracks": args.tracks, "duration": args.duration, "seed": args.seed}.items() if v is not None}})
    tracks = synth_dataset(spec)
    out = Path(args.out)
    if args.test_tracks:
        if args.test_tracks >= len(tracks):
            raise UsageError("--test-tracks must leave at least one training track")
        cut = len(tracks) - args.test_tracks
        write_corpus(tracks[:cut], out / "train")
        write_corpus(tracks[cut:], out / "test")
    else:
        write_corpus(tracks, out)
    print(f"wrote {len(tracks)} tracks ({spec.duration:.2f} s each) to {out}")
    return EXIT_OK


def train_config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.from_dict(_load_config(args.config)) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "lr": args.lr, "batch": args.batch, "lam": args.lam,
        "reg_target": args.reg_target, "n": args.segment, "hop": args.hop,
        "channels": args.channels, "kernel_len": args.kernel_len, "stride": args.stride,
        "decoder": args.decoder,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if args.segment is not None and args.hop is None:
        changes["hop"] = args.segment // 2
    if args.no_squaring:
        changes["squared"] = False
    if args.sort:
        changes["sort"] = True
    if args.early_stopping:
        changes["early_stopping"] = True
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    tracks = load_corpus(args.data)
    out = Path(args.out)
    for r in range(args.runs):
        run_cfg = cfg.replace(seed=cfg.seed + r)
        run_dir = out if args.runs == 1 else out / f"run{r}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg_dict = run_cfg.to_dict()
        (run_dir / "config.json").write_text(json.dumps(
            {**cfg_dict, "config_hash": checkpoint.config_hash(cfg_dict)}, indent=2, sort_keys=True))
        res = train(tracks, run_cfg, run_dir)
        print(f"run {r}: {len(res.epoch_losses)} epochs, final loss {_fmt_db(res.epoch_losses[-1])} dB"
              if res.epoch_losses else f"run {r}: 0 epochs")
    return EXIT_OK


def _resolve_checkpoints(path: str, runs: int | None) -> list[Path]:
    p = Path(path)
    if p.is_file():
        found = [p]
    elif p.is_dir():
        dirs = sorted(d for d in p.glob("run*") if d.is_dir()) or [p]
        found = []
        for d in dirs:
            epochs = sorted(d.glob("epoch*.ckpt"))
            if epochs:
                found.append(epochs[-1])
    else:
        found = []
    if not found:
        raise FileNotFoundError(f"no checkpoint found at {path}")
    if runs is not None:
        if runs > len(found):
            raise FileNotFoundError(f"{runs} runs requested but only {len(found)} checkpoints under {path}")
        found = found[:runs]
    return found


def cmd_evaluate(args) -> int:
    conf = _load_config(args.config)
    paths = _resolve_checkpoints(args.checkpoint, args.runs)
    loaded = [checkpoint.load(p) for p in paths]
    tracks = load_corpus(args.data)
    first_cfg = TrainConfig.from_dict(loaded[0][1]["config"])
    n = args.segment or conf.get("n", first_cfg.n)
    silence_db = conf.get("silence_db", first_cfg.silence_db)
    report = evaluate_run(tracks, [m for m, _ in loaded], n=n, silence_db=silence_db,
                          config_hash=loaded[0][1]["config_hash"])
    csv_path, json_path = report.write(args.out)
    s = report.summary()
    for key in ("reconstruction_si_sdr", "bm_si_sdr", "stft_bm_si_sdr", "mixture_si_sdr"):
        print(f"{key:24s} median {_fmt_db(s[key]['median'])} dB over {s[key]['count']} segments")
    if s["untrained"]:
        print("warning: reconstruction median below 5 dB; checkpoint flagged as untrained")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_separate(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    v, a = read_wav(args.vocals), read_wav(args.accompaniment)
    if len(v) != len(a):
        raise DimensionError(f"stems differ in length: {len(v)} vs {len(a)} samples")
    if v.sample_rate != a.sample_rate:
        raise DimensionError("stems differ in sample rate")
    est = separate(model, v.samples, a.samples)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_wav(args.out, Waveform(est, v.sample_rate))
    score = si_sdr(v.samples, est)
    if args.json:
        print(json.dumps({"si_sdr_db": score, "out": str(args.out)}))
    else:
        print(f"SI-SDR {_fmt_db(score)} dB -> {args.out}")
    return EXIT_OK


def cmd_export_repr(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    w = read_wav(args.input)
    a = model.encode(w.samples)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_representation(args.out, a)
    print(f"wrote {a.shape[0]}x{a.shape[1]} representation to {args.out}")
    return EXIT_OK


@dataclasses.dataclass
class VariantCheck:
    report: GradcheckReport
    kink_margin: float  # distance of the test point from the nearest ReLU / l1 kink


def kink_margin(model: SineDAE, inputs: list[np.ndarray], a_reg: np.ndarray) -> float:
    """Smallest |pre-activation| and smallest nonzero |TV difference| at a point.

    Central differences are only meaningful when a step of size h cannot
    cross a kink, so a gradcheck point should keep this well above h.
    """
    pre = min(float(np.min(np.abs(model.preactivation(x)))) for x in inputs)
    diffs = np.concatenate([np.abs(np.diff(a_reg, axis=-1)).ravel(), np.abs(np.diff(a_reg, axis=-2)).ravel()])
    nonzero = diffs[diffs > 0]
    return min(pre, float(nonzero.min()) if nonzero.size else np.inf)


def gradcheck_variants(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                       base: ModelConfig | None = None) -> dict[tuple[str, bool], VariantCheck]:
    """Finite-difference check of the full objective for every decoder variant."""
    base = base or ModelConfig(channels=8, kernel_len=32, stride=8, dil_kernel_len=3, dilation=2)
    results = {}
    for decoder in ("mod-cos", "cos", "conv"):
        for squared in (True, False):
            cfg = dataclasses.replace(base, decoder=decoder, squared=squared)
            rng = np.random.default_rng([seed, len(results)])
            model = SineDAE.initialize(cfg, rng)
            if "phi" in model.params:
                model.params["phi"] = rng.uniform(-np.pi, np.pi, cfg.channels)
            x_v = 0.3 * rng.standard_normal((2, 256))
            xt_v = x_v + 1e-4 * rng.standard_normal(x_v.shape)
            xt_m = x_v + 0.3 * rng.standard_normal(x_v.shape)
            tape = Tape()
            loss, _, _ = forward_loss(model, tape, x_v, xt_v, xt_m, 0.5)
            grads = tape.backward(loss)
            report = gradcheck(lambda p: loss_value(SineDAE(cfg, p), x_v, xt_v, xt_m, 0.5),
                               model.params, grads, h=h, tol=tol)
            results[(decoder, squared)] = VariantCheck(report, kink_margin(model, [xt_v, xt_m], model.encode(xt_m)))
    return results


def cmd_gradcheck(args) -> int:
    conf = _load_config(args.config)
    base = ModelConfig(**{**dict(channels=8, kernel_len=32, stride=8, dil_kernel_len=3, dilation=2), **conf})
    results = gradcheck_variants(args.seed, args.h, args.tol, base)
    ok = True
    for (decoder, squared), check in results.items():
        rep = check.report
        worst = max(rep.max_rel_error.values())
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {decoder:8s} squared={squared!s:5s} "
              f"max rel err {worst:.2e}  kink margin {check.kink_margin:.1e}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: from config, else 0)")
    common.add_argument("--config", default=None, help="JSON config file for this command")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="sine-dae", description="Train, evaluate and probe the modulated-cosine denoising autoencoder.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="generate a synthetic paired-stem corpus")
    s.add_argument("--out", required=True, help="output directory (<track>/vocals.wav, accompaniment.wav)")
    s.add_argument("--tracks", type=int, default=None, help="number of tracks (default 20)")
    s.add_argument("--duration", type=float, default=None, help="seconds per track (default 10)")
    s.add_argument("--test-tracks", type=int, default=0,
                   help="split off this many final tracks into out/test (rest go to out/train)")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", parents=[common], help="train the denoising autoencoder")
    t.add_argument("--data", required=True, help="directory of <track>/vocals.wav + accompaniment.wav")
    t.add_argument("--out", required=True, help="output directory for checkpoints and the training log")
    t.add_argument("--epochs", type=int, default=None, help="passes over the vocal segments")
    t.add_argument("--lr", type=float, default=None, help="Adam learning rate")
    t.add_argument("--batch", type=int, default=None, help="segments per optimizer step")
    t.add_argument("--lam", type=float, default=None, help="weight of the total-variation term")
    t.add_argument("--reg-target", choices=["A_m", "A_v"], default=None,
                   help="representation regularized by total variation")
    t.add_argument("--segment", type=int, default=None, help="segment length N in samples (hop defaults to N/2)")
    t.add_argument("--hop", type=int, default=None, help="training segment hop in samples")
    t.add_argument("--channels", type=int, default=None, help="number of kernels C")
    t.add_argument("--kernel-len", type=int, default=None, help="kernel length L")
    t.add_argument("--stride", type=int, default=None, help="encoder stride S")
    t.add_argument("--decoder", choices=["mod-cos", "cos", "conv"], default=None, help="decoder variant")
    t.add_argument("--no-squaring", action="store_true", help="use f instead of f**2 as carrier frequency")
    t.add_argument("--sort", action="store_true", help="sort kernels by frequency after every update")
    t.add_argument("--early-stopping", action="store_true", help="stop when the epoch neg-SNR stops decreasing")
    t.add_argument("--runs", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="reconstruction and binary-mask separation report")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or a train output directory")
    e.add_argument("--data", required=True, help="test directory of paired stems")
    e.add_argument("--out", required=True, help="output directory for report.csv and report.json")
    e.add_argument("--runs", type=int, default=None, help="number of run checkpoints to pool (default: all)")
    e.add_argument("--segment", type=int, default=None, help="evaluation segment length (default: training N)")
    e.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("separate", parents=[common], help="informed separation of one stem pair")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    sp.add_argument("--vocals", required=True, help="clean vocal WAV (reference and mask source)")
    sp.add_argument("--accompaniment", required=True, help="accompaniment WAV of equal length")
    sp.add_argument("--out", required=True, help="output WAV for the vocal estimate")
    sp.add_argument("--json", action="store_true", help="print the full-precision score as JSON")
    sp.set_defaults(func=cmd_separate)

    x = sub.add_parser("export-repr", parents=[common], help="write the encoded representation of a WAV")
    x.add_argument("--checkpoint", required=True, help="checkpoint file")
    x.add_argument("--input", required=True, help="input WAV")
    x.add_argument("--out", required=True, help="output matrix file")
    x.set_defaults(func=cmd_export_repr)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all decoder variants")
    g.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    g.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _limit_threads():
    n = os.environ.get("SINE_DAE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is None and args.command in ("gradcheck",):
        args.seed = 0
    _limit_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, MissingStemsError, WavFormatError, checkpoint.CheckpointError,
            DimensionError, EmptyReportError, UndefinedReferenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
