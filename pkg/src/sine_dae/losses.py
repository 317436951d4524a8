"""Training objectives and the SI-SDR evaluation metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grad import SNR_EPS, DimensionError, UndefinedReferenceError
from .grad import neg_snr as _neg_snr
from .grad import total_variation

# SI-SDR values at or above this are reported as the +inf sentinel.
SI_SDR_CEILING_DB = 100.0


class EmptyReportError(ValueError):
    """No finite score is available to summarize."""


def tv_loss(a: np.ndarray) -> float:
    """Total variation of a ``(C, T)`` representation (mean l1 first differences)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a C x T matrix, got shape {a.shape}")
    return float(total_variation(a))


def neg_snr(ref: np.ndarray, est: np.ndarray, eps: float = SNR_EPS) -> float:
    return float(_neg_snr(np.ravel(ref), np.ravel(est), eps))


def si_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """Scale-invariant SDR in dB.

    Returns ``math.inf`` for (numerically) distortion-free estimates, i.e. at
    or above :data:`SI_SDR_CEILING_DB`, and ``-math.inf`` when the estimate
    is orthogonal to the reference.
    """
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise DimensionError(f"reference {ref.shape} and estimate {est.shape} differ")
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise UndefinedReferenceError("reference has zero energy")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    signal = float(target @ target)
    if signal == 0.0:
        return -math.inf
    noise = float(np.sum((target - est) ** 2))
    if noise == 0.0:
        return math.inf
    value = 10.0 * math.log10(signal / noise)
    return math.inf if value >= SI_SDR_CEILING_DB else value


@dataclass(frozen=True)
class LossBreakdown:
    neg_snr: float
    tv: float
    lam: float

    @property
    def total(self) -> float:
        return self.neg_snr + self.lam * self.tv

    def as_dict(self) -> dict[str, float]:
        return {"neg_snr": self.neg_snr, "tv": self.tv, "lambda": self.lam, "total": self.total}


def total_loss(ref: np.ndarray, est: np.ndarray, a_reg: np.ndarray, lam: float) -> LossBreakdown:
    return LossBreakdown(neg_snr(ref, est), tv_loss(a_reg), lam)


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    k = len(ordered)
    mid = k // 2
    return ordered[mid] if k % 2 else 0.5 * (ordered[mid - 1] + ordered[mid])


@dataclass
class MedianSummary:
    median: float
    median_of_run_medians: float
    count: int
    pos_inf: int = 0
    neg_inf: int = 0
    run_medians: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "median": self.median,
            "median_of_run_medians": self.median_of_run_medians,
            "count": self.count,
            "pos_inf_count": self.pos_inf,
            "neg_inf_count": self.neg_inf,
            "run_medians": self.run_medians,
        }


def median_report(scores_by_run: list[list[float]]) -> MedianSummary:
    """Median over the pooled finite scores of all runs.

    Infinite sentinels are excluded and counted. Runs with no finite score
    do not contribute a run median.
    """
    pooled, run_medians = [], []
    pos = neg = 0
    for run in scores_by_run:
        finite = []
        for s in run:
            if math.isinf(s):
                pos += s > 0
                neg += s < 0
            elif not math.isnan(s):
                finite.append(float(s))
        if finite:
            run_medians.append(_median(finite))
        pooled.extend(finite)
    if not pooled:
        raise EmptyReportError("no finite scores to summarize")
    return MedianSummary(_median(pooled), _median(run_medians), len(pooled), pos, neg, run_medians)
