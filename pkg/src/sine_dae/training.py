"""Denoising training protocol: corruption, batching, Adam, early stopping."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import checkpoint
from .audio_io import is_silent, segment
from .grad import DimensionError, Tape, neg_snr, total_variation
from .losses import LossBreakdown
from .model import ConfigError, ModelConfig, SineDAE, apply_permutation, model_from_dict
from .synth import Track

log = logging.getLogger(__name__)

REG_TARGETS = ("A_m", "A_v")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    n: int = 44100
    hop: int = 22050
    batch: int = 8
    lr: float = 1e-4
    epochs: int = 10
    lam: float = 0.5
    noise_std: float = 1e-4
    reg_target: str = "A_m"
    seed: int = 0
    sort: bool = False
    co_permute: bool = True
    early_stopping: bool = False
    group_size: int = 4  # tracks per accompaniment pool
    silence_db: float = -60.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.reg_target not in REG_TARGETS:
            raise ConfigError(f"reg_target must be one of {REG_TARGETS}, got {self.reg_target!r}")
        if self.n <= 0 or not 0 < self.hop <= self.n:
            raise ConfigError("need n > 0 and 0 < hop <= n")
        if self.batch < 1 or self.epochs < 0 or self.group_size < 1:
            raise ConfigError("batch and group_size must be >= 1, epochs >= 0")
        if self.noise_std < 0 or self.lr < 0:
            raise ConfigError("noise_std and lr must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = model_from_dict(d["model"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k: changes.pop(k) for k in list(changes) if k in ModelConfig.__dataclass_fields__}
        cfg = dataclasses.replace(self, **changes)
        if model_changes:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model_changes))
        return cfg


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias-corrected moments, state keyed like the parameter dict."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr:
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# corruption


def corrupt_gaussian(x_v: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x_v = np.asarray(x_v, dtype=np.float64)
    if sigma == 0:
        return x_v.copy()
    return x_v + rng.normal(0.0, sigma, size=x_v.shape)


def corrupt_mix(x_v: np.ndarray, x_acc: np.ndarray) -> np.ndarray:
    x_v, x_acc = np.asarray(x_v, dtype=np.float64), np.asarray(x_acc, dtype=np.float64)
    if x_v.shape != x_acc.shape:
        raise DimensionError(f"vocal {x_v.shape} and accompaniment {x_acc.shape} differ")
    return x_v + x_acc


def segment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, segment); batching order cannot shift it."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# objective


def forward_loss(
    model: SineDAE,
    tape: Tape,
    x_v: np.ndarray,
    xt_v: np.ndarray,
    xt_m: np.ndarray | None,
    lam: float,
    reg_target: str = "A_m",
):
    """Batch-mean ``neg_snr(x_v, D(E(xt_v))) + lam * tv(A_reg)`` recorded on ``tape``.

    Returns ``(loss_var, per_item_neg_snr, per_item_tv)``.
    """
    pv = model.bind(tape)
    n = x_v.shape[-1]
    a_v = model.encode_on(tape, pv, xt_v)
    est = model.decode_on(tape, pv, a_v, n)
    nsnr = tape.neg_snr(tape.const(x_v.reshape(est.shape)), est)
    if reg_target == "A_m":
        if xt_m is None:
            raise ValueError("reg_target A_m needs the mixture corruption")
        a_reg = model.encode_on(tape, pv, xt_m)
    else:
        a_reg = a_v
    tv = tape.total_variation(a_reg)
    loss = tape.add(tape.mean(nsnr), tape.scale(tape.mean(tv), lam))
    return loss, nsnr.data.copy(), tv.data.copy()


def loss_value(model: SineDAE, x_v, xt_v, xt_m, lam: float, reg_target: str = "A_m") -> float:
    """Scalar objective without recording gradients (used for finite differences)."""
    n = x_v.shape[-1]
    a_v = model.encode(xt_v.reshape(-1, n))
    est = model.decode(a_v, n)
    nsnr = neg_snr(x_v.reshape(est.shape), est)
    a_reg = model.encode(xt_m.reshape(-1, n)) if reg_target == "A_m" else a_v
    return float(np.mean(nsnr) + lam * np.mean(total_variation(a_reg)))


@dataclass
class StepResult:
    loss: LossBreakdown
    grad_norm: float


def train_step(
    model: SineDAE,
    adam: Adam,
    cfg: TrainConfig,
    x_v: np.ndarray,
    xt_v: np.ndarray,
    xt_m: np.ndarray | None,
) -> StepResult:
    """One Adam update on a batch ``(B, N)``; sorts kernels afterwards when enabled."""
    if x_v.ndim != 2 or x_v.shape[0] == 0:
        raise DimensionError("batch must be a non-empty (B, N) array")
    tape = Tape()
    loss, nsnr, tv = forward_loss(model, tape, x_v, xt_v, xt_m, cfg.lam, cfg.reg_target)
    if not np.isfinite(loss.data):
        norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
        raise NumericalError(f"non-finite loss {float(loss.data)}; parameter norms {norms}")
    grads = tape.backward(loss)
    adam.step(model.params, grads)
    if cfg.sort:
        perm = model.sort_kernels(cfg.co_permute)
        if not np.array_equal(perm, np.arange(perm.size)):
            apply_permutation(adam.m, perm, model.config, cfg.co_permute)
            apply_permutation(adam.v, perm, model.config, cfg.co_permute)
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    return StepResult(LossBreakdown(float(np.mean(nsnr)), float(np.mean(tv)), cfg.lam), gnorm)


def early_stop(history: list[float]) -> bool:
    """True once the latest epoch loss failed to improve on the previous one."""
    return len(history) >= 2 and history[-1] >= history[-2]


# ---------------------------------------------------------------------------
# data pipeline


@dataclass
class SegmentPool:
    vocals: list[np.ndarray]
    accompaniment: list[np.ndarray]
    track_of_vocal: list[int]
    track_of_acc: list[int]


def build_pool(tracks: list[Track], cfg: TrainConfig) -> SegmentPool:
    """Overlapping training segments; silent vocal segments are dropped."""
    pool = SegmentPool([], [], [], [])
    for i, tr in enumerate(tracks):
        for s in segment(tr.vocals, cfg.n, cfg.hop).segments:
            if not is_silent(s, cfg.silence_db):
                pool.vocals.append(s)
                pool.track_of_vocal.append(i)
        for s in segment(tr.accompaniment, cfg.n, cfg.hop).segments:
            pool.accompaniment.append(s)
            pool.track_of_acc.append(i)
    if not pool.vocals:
        raise ValueError("no non-silent vocal segments in the training data")
    return pool


def epoch_pairs(pool: SegmentPool, n_tracks: int, cfg: TrainConfig, epoch: int) -> list[tuple[int, int]]:
    """(vocal index, accompaniment index) pairs for one epoch.

    Tracks are shuffled into groups of ``cfg.group_size``; within a group each
    shuffled vocal segment is paired with a shuffled accompaniment segment of
    the same group, drawn without replacement (the pool is recycled if short).
    """
    rng = np.random.default_rng([cfg.seed, epoch, 0x5EED])
    order = rng.permutation(n_tracks)
    vocals_by_track: dict[int, list[int]] = {}
    acc_by_track: dict[int, list[int]] = {}
    for i, t in enumerate(pool.track_of_vocal):
        vocals_by_track.setdefault(t, []).append(i)
    for i, t in enumerate(pool.track_of_acc):
        acc_by_track.setdefault(t, []).append(i)
    pairs = []
    for g in range(0, n_tracks, cfg.group_size):
        group = order[g:g + cfg.group_size]
        voc = [i for t in group for i in vocals_by_track.get(int(t), [])]
        acc = [i for t in group for i in acc_by_track.get(int(t), [])]
        if not voc:
            continue
        voc = [voc[i] for i in rng.permutation(len(voc))]
        drawn: list[int] = []
        while len(drawn) < len(voc):
            drawn.extend(acc[i] for i in rng.permutation(len(acc)))
        pairs.extend(zip(voc, drawn))
    return pairs


def iter_batches(pool: SegmentPool, pairs: list[tuple[int, int]], cfg: TrainConfig, epoch: int) -> Iterator[tuple]:
    for start in range(0, len(pairs), cfg.batch):
        chunk = pairs[start:start + cfg.batch]
        x_v = np.stack([pool.vocals[v] for v, _ in chunk])
        xt_v = np.stack([
            corrupt_gaussian(pool.vocals[v], cfg.noise_std, segment_rng(cfg.seed, epoch, start + j))
            for j, (v, _) in enumerate(chunk)
        ])
        xt_m = np.stack([corrupt_mix(pool.vocals[v], pool.accompaniment[a]) for v, a in chunk])
        yield x_v, xt_v, xt_m


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: SineDAE
    epoch_losses: list[float]
    epoch_neg_snr: list[float]
    checkpoints: list[Path] = field(default_factory=list)
    stopped_early: bool = False


def train(
    tracks: list[Track],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from scratch on ``tracks``.

    With ``out_dir`` set, writes ``epochNN.ckpt`` (1-based) after every epoch,
    ``best.ckpt`` (lowest epoch loss) and a line-delimited JSON log ``train_log.jsonl``.
    """
    model = SineDAE.initialize(cfg.model, np.random.default_rng([cfg.seed, 0xC0DE]))
    if cfg.sort:
        model.sort_kernels(cfg.co_permute)
    adam = Adam(cfg.lr)
    pool = build_pool(tracks, cfg)
    out = Path(out_dir) if out_dir is not None else None
    logfh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logfh = open(out / "train_log.jsonl", "w")
    result = TrainResult(model, [], [])
    best = math.inf
    step = 0
    try:
        for epoch in range(cfg.epochs):
            pairs = epoch_pairs(pool, len(tracks), cfg, epoch)
            totals, snrs = [], []
            for x_v, xt_v, xt_m in iter_batches(pool, pairs, cfg, epoch):
                t0 = time.perf_counter()
                res = train_step(model, adam, cfg, x_v, xt_v, xt_m if cfg.reg_target == "A_m" else None)
                step += 1
                totals.append(res.loss.total * len(x_v))
                snrs.append(res.loss.neg_snr * len(x_v))
                record = {"step": step, "epoch": epoch + 1, **res.loss.as_dict(),
                          "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)}
                if logfh:
                    logfh.write(json.dumps(record) + "\n")
                if on_step:
                    on_step(record)
            count = len(pairs)
            result.epoch_losses.append(sum(totals) / count)
            result.epoch_neg_snr.append(sum(snrs) / count)
            log.info("epoch %d: loss %.3f neg-snr %.3f", epoch + 1, result.epoch_losses[-1], result.epoch_neg_snr[-1])
            if out is not None:
                path = out / f"epoch{epoch + 1:02d}.ckpt"
                checkpoint.save(path, model, cfg, epoch + 1, result.epoch_losses)
                result.checkpoints.append(path)
                if result.epoch_losses[-1] < best:
                    best = result.epoch_losses[-1]
                    checkpoint.save(out / "best.ckpt", model, cfg, epoch + 1, result.epoch_losses)
            if cfg.early_stopping and early_stop(result.epoch_neg_snr):
                result.stopped_early = True
                break
    finally:
        if logfh:
            logfh.close()
    return result
