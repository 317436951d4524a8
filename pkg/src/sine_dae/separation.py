"""Informed binary-mask separation in the learned domain and the STFT baseline."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import is_silent, segment
from .grad import DimensionError
from .losses import EmptyReportError, median_report, si_sdr, tv_loss
from .model import ConfigError, SineDAE
from .synth import Track

UNTRAINED_DB = 5.0
REPR_MAGIC = b"SDREPR01"


# ---------------------------------------------------------------------------
# masks


def binary_mask(a_v: np.ndarray, a_acc: np.ndarray) -> np.ndarray:
    """1 where the vocal representation strictly dominates, 0 elsewhere (ties -> 0)."""
    a_v, a_acc = np.asarray(a_v), np.asarray(a_acc)
    if a_v.shape != a_acc.shape:
        raise DimensionError(f"mask operands differ: {a_v.shape} vs {a_acc.shape}")
    return (a_v > a_acc).astype(np.float64)


def separate(
    model: SineDAE,
    x_v: np.ndarray,
    x_acc: np.ndarray,
    mix: np.ndarray | None = None,
    mask_stems: bool = False,
) -> np.ndarray:
    """Vocal estimate ``D(mask * E(mix))`` with the mask from the encoded stems.

    ``mask_stems=True`` decodes the masked vocal encoding instead of the
    masked mixture encoding.
    """
    x_v, x_acc = np.asarray(x_v, dtype=np.float64), np.asarray(x_acc, dtype=np.float64)
    if x_v.shape != x_acc.shape:
        raise DimensionError(f"stems differ in length: {x_v.shape} vs {x_acc.shape}")
    mix = x_v + x_acc if mix is None else np.asarray(mix, dtype=np.float64)
    a_v, a_acc = model.encode(x_v), model.encode(x_acc)
    mask = binary_mask(a_v, a_acc)
    target = a_v if mask_stems else model.encode(mix)
    return model.decode(mask * target, x_v.shape[-1])


# ---------------------------------------------------------------------------
# STFT


@dataclass(frozen=True)
class StftConfig:
    win: int = 2048
    hop: int = 384
    window: str = "hamming"

    def window_array(self) -> np.ndarray:
        if self.window == "hamming":
            # periodic Hamming
            return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(self.win) / self.win)
        if self.window == "hann":
            return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(self.win) / self.win)
        raise ConfigError(f"unknown window {self.window!r}")

    @property
    def bins(self) -> int:
        return self.win // 2 + 1


@dataclass
class Spectrogram:
    data: np.ndarray  # (bins, frames) complex
    length: int
    config: StftConfig = field(default_factory=StftConfig)


def _padding(length: int, cfg: StftConfig) -> tuple[int, int, int]:
    left = cfg.win // 2
    frames = max(1, -(-(length + 2 * left - cfg.win) // cfg.hop) + 1)
    right = (frames - 1) * cfg.hop + cfg.win - length - left
    return left, right, frames


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Framewise real FFT of the zero-padded signal (half a window each side)."""
    x = np.asarray(x, dtype=np.float64)
    left, right, frames = _padding(x.size, cfg)
    xp = np.pad(x, (left, right))
    idx = np.arange(cfg.win)[None, :] + cfg.hop * np.arange(frames)[:, None]
    spec = np.fft.rfft(xp[idx] * cfg.window_array(), axis=1)
    return Spectrogram(spec.T, x.size, cfg)


def istft(spec: Spectrogram, cfg: StftConfig | None = None, eps: float = 1e-8) -> np.ndarray:
    """Weighted overlap-add with squared-window normalization."""
    cfg = spec.config if cfg is None else cfg
    if cfg != spec.config or spec.data.shape[0] != cfg.bins:
        raise ConfigError(f"spectrogram made with {spec.config}, cannot invert with {cfg}")
    left, right, frames = _padding(spec.length, cfg)
    if spec.data.shape[1] != frames:
        raise ConfigError(f"expected {frames} frames for length {spec.length}, got {spec.data.shape[1]}")
    win = cfg.window_array()
    chunks = np.fft.irfft(spec.data.T, n=cfg.win, axis=1) * win
    total = (frames - 1) * cfg.hop + cfg.win
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for k in range(frames):
        s = k * cfg.hop
        out[s:s + cfg.win] += chunks[k]
        norm[s:s + cfg.win] += wsq
    out /= np.maximum(norm, eps)
    return out[left:left + spec.length]


def stft_mask_baseline(x_v: np.ndarray, x_acc: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Ideal binary mask ``|V| > |Acc|`` applied to the mixture STFT."""
    x_v, x_acc = np.asarray(x_v, dtype=np.float64), np.asarray(x_acc, dtype=np.float64)
    if x_v.shape != x_acc.shape:
        raise DimensionError(f"stems differ in length: {x_v.shape} vs {x_acc.shape}")
    sv, sa = stft(x_v, cfg), stft(x_acc, cfg)
    sm = stft(x_v + x_acc, cfg)
    mask = np.abs(sv.data) > np.abs(sa.data)
    return istft(Spectrogram(sm.data * mask, sm.length, cfg))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SegmentRecord:
    run_id: int
    track_id: str
    segment_index: int
    bm_si_sdr: float
    recon_si_sdr: float
    stft_si_sdr: float
    mixture_si_sdr: float
    tv_mix: float

    @property
    def sentinel(self) -> str:
        if math.isinf(self.bm_si_sdr):
            return "+inf" if self.bm_si_sdr > 0 else "-inf"
        return ""


CSV_COLUMNS = [
    "run_id", "track_id", "segment_index", "si_sdr_db", "sentinel_flag",
    "recon_si_sdr_db", "stft_bm_si_sdr_db", "mixture_si_sdr_db", "tv_mixture",
]


@dataclass
class EvalReport:
    records: list[SegmentRecord]
    config_hash: str = ""
    discarded_silent: int = 0
    silence_reference: str = "vocals"

    def _summary(self, attr: str) -> dict:
        by_run: dict[int, list[float]] = {}
        for r in self.records:
            by_run.setdefault(r.run_id, []).append(getattr(r, attr))
        try:
            return median_report(list(by_run.values())).as_dict()
        except EmptyReportError:
            return {"median": None, "count": 0}

    def summary(self) -> dict:
        recon = self._summary("recon_si_sdr")
        return {
            "config_hash": self.config_hash,
            "segments": len(self.records),
            "runs": sorted({r.run_id for r in self.records}),
            "discarded_silent": self.discarded_silent,
            "silence_reference": self.silence_reference,
            "bm_si_sdr": self._summary("bm_si_sdr"),
            "reconstruction_si_sdr": recon,
            "stft_bm_si_sdr": self._summary("stft_si_sdr"),
            "mixture_si_sdr": self._summary("mixture_si_sdr"),
            "tv_mixture": self._summary("tv_mix"),
            "untrained": recon.get("median") is None or recon["median"] < UNTRAINED_DB,
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        tmp_csv, tmp_json = csv_path.with_suffix(".csv.tmp"), json_path.with_suffix(".json.tmp")
        with open(tmp_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.run_id, r.track_id, r.segment_index, _fmt(r.bm_si_sdr), r.sentinel,
                            _fmt(r.recon_si_sdr), _fmt(r.stft_si_sdr), _fmt(r.mixture_si_sdr), _fmt(r.tv_mix)])
        tmp_json.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        tmp_csv.replace(csv_path)
        tmp_json.replace(json_path)
        return csv_path, json_path


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (float(v) if k.endswith("_db") or k == "tv_mixture" else v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def evaluate_segment(model: SineDAE, x_v: np.ndarray, x_acc: np.ndarray, stft_cfg: StftConfig = StftConfig()) -> dict:
    mix = x_v + x_acc
    a_mix = model.encode(mix)
    return {
        "recon": si_sdr(x_v, model.autoencode(x_v)),
        "bm": si_sdr(x_v, separate(model, x_v, x_acc, mix)),
        "stft": si_sdr(x_v, stft_mask_baseline(x_v, x_acc, stft_cfg)),
        "mixture": si_sdr(x_v, mix),
        "tv_mix": tv_loss(a_mix),
    }


def evaluate_run(
    tracks: list[Track],
    models: list[SineDAE] | SineDAE,
    n: int = 44100,
    silence_db: float = -60.0,
    config_hash: str = "",
    stft_cfg: StftConfig = StftConfig(),
) -> EvalReport:
    """Score non-overlapping, non-silent segments of every track for each model (run)."""
    if isinstance(models, SineDAE):
        models = [models]
    records, discarded = [], 0
    stft_cache: dict[tuple[str, int], float] = {}
    for run_id, model in enumerate(models):
        for tr in tracks:
            vs = segment(tr.vocals, n, n).segments
            accs = segment(tr.accompaniment, n, n).segments
            for k, (x_v, x_acc) in enumerate(zip(vs, accs)):
                if is_silent(x_v, silence_db):
                    discarded += run_id == 0
                    continue
                key = (tr.name, k)
                mix = x_v + x_acc
                if key not in stft_cache:
                    stft_cache[key] = si_sdr(x_v, stft_mask_baseline(x_v, x_acc, stft_cfg))
                records.append(SegmentRecord(
                    run_id, tr.name, k,
                    bm_si_sdr=si_sdr(x_v, separate(model, x_v, x_acc, mix)),
                    recon_si_sdr=si_sdr(x_v, model.autoencode(x_v)),
                    stft_si_sdr=stft_cache[key],
                    mixture_si_sdr=si_sdr(x_v, mix),
                    tv_mix=tv_loss(model.encode(mix)),
                ))
    if not records:
        raise EmptyReportError("no non-silent segments to evaluate")
    return EvalReport(records, config_hash, discarded)


# ---------------------------------------------------------------------------
# representation export


def write_representation(path: str | Path, a: np.ndarray) -> None:
    """``magic(8) | uint32 rows | uint32 cols | float32 LE row-major data``."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D representation, got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(REPR_MAGIC + struct.pack("<II", *a.shape) + a.astype("<f4").tobytes())


def read_representation(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != REPR_MAGIC:
        raise ValueError(f"{path}: not a representation file")
    rows, cols = struct.unpack_from("<II", data, 8)
    return np.frombuffer(data, dtype="<f4", offset=16, count=rows * cols).reshape(rows, cols)
