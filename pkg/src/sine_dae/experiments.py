"""Desk-scale protocol shared by the acceptance tests and ``scripts/``.

A 20-track synthetic corpus (10 s each) split 16/4 into training and
held-out tracks, and a reduced model (C=64, L=512, S=128, L'=5, D=10).
Each configuration is trained with three seeds and the held-out medians
are pooled over the three runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint
from .model import ModelConfig
from .separation import EvalReport, evaluate_run
from .synth import SynthSpec, Track, synth_dataset
from .training import TrainConfig, TrainResult, train

DESK_CORPUS = SynthSpec(tracks=20, duration=10.0, seed=0)
HELD_OUT = 4
DESK_RUNS = 3
DESK_MODEL = ModelConfig(channels=64, kernel_len=512, stride=128, dil_kernel_len=5, dilation=10,
                         decoder="mod-cos", squared=True)
DESK_TRAIN = TrainConfig(n=44100, hop=22050, batch=2, lr=1e-3, epochs=10, lam=0.5, noise_std=1e-4,
                         reg_target="A_m", seed=0, model=DESK_MODEL)


def desk_split(spec: SynthSpec = DESK_CORPUS) -> tuple[list[Track], list[Track]]:
    tracks = synth_dataset(spec)
    return tracks[:-HELD_OUT], tracks[-HELD_OUT:]


@dataclass
class DeskRun:
    name: str
    config: TrainConfig
    results: list[TrainResult]
    report: EvalReport
    seconds: float

    def median(self, key: str) -> float:
        return self.report.summary()[key]["median"]

    @property
    def checkpoints(self) -> list[Path]:
        return [r.checkpoints[-1] for r in self.results if r.checkpoints]


def run_desk(name: str, cfg: TrainConfig, train_tracks, test_tracks, out_dir: str | Path | None = None,
             runs: int = DESK_RUNS) -> DeskRun:
    """Train ``runs`` seeds (cfg.seed, cfg.seed + 1, ...) and pool their held-out scores."""
    t0 = time.perf_counter()
    results = []
    for r in range(runs):
        run_dir = None if out_dir is None else Path(out_dir) / f"run{r}"
        results.append(train(train_tracks, cfg.replace(seed=cfg.seed + r), run_dir))
    report = evaluate_run(test_tracks, [res.model for res in results], n=cfg.n, silence_db=cfg.silence_db,
                          config_hash=checkpoint.config_hash(cfg.to_dict()))
    return DeskRun(name, cfg, results, report, time.perf_counter() - t0)


DESK_VARIANTS = {
    "mod-cos f^2": DESK_TRAIN,
    "mod-cos f": DESK_TRAIN.replace(squared=False),
    "mod-cos f^2, lambda=0": DESK_TRAIN.replace(lam=0.0),
    "mod-cos f^2, TV on A_v": DESK_TRAIN.replace(reg_target="A_v"),
    "cos f^2": DESK_TRAIN.replace(decoder="cos"),
    "conv": DESK_TRAIN.replace(decoder="conv"),
}
