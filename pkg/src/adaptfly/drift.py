"""Online domain-shift detection from activation statistics.

Each frame is summarized by per-channel (mean, std) pairs of early-layer
features. A tracker keeps an exponential moving average of these
statistics and flags a shift whenever the symmetric Gaussian KL divergence
between the incoming frame and the average exceeds a threshold.

Two KL variants are available. "standard" is the full closed form for
univariate Gaussians and scores identical distributions as 0; it is the
default for detection. "simplified" drops the log-variance and constant
terms, scoring identical distributions as 0.5 per direction, and is kept
for bit-faithful comparison against detectors specified that way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, StatsError

__all__ = [
    "SIGMA_FLOOR",
    "KL_VARIANTS",
    "ActivationStats",
    "DriftTracker",
    "compute_stats",
    "ema_update",
    "kl_gaussian",
    "divergence",
    "detect",
    "calibrate_threshold",
]

SIGMA_FLOOR = 1e-6
KL_VARIANTS = ("standard", "simplified")


@dataclass(frozen=True)
class ActivationStats:
    """Per-channel (mean, std) summary of a feature tensor."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).ravel()
        stds = np.asarray(self.stds, dtype=np.float64).ravel()
        if means.shape != stds.shape:
            raise StatsError("means and stds must have equal length")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(stds))):
            raise StatsError("activation statistics must be finite")
        stds = np.maximum(stds, SIGMA_FLOOR)
        means.setflags(write=False)
        stds.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    def __len__(self) -> int:
        return self.means.shape[0]


def compute_stats(features: np.ndarray) -> ActivationStats:
    """Spatially pool a (channels, ...) feature tensor into per-channel stats.

    Uses the population standard deviation, floored at SIGMA_FLOOR so the
    divergence stays finite for constant channels.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim < 2 or f[0].size == 0:
        raise StatsError(f"features need a non-empty spatial extent, got shape {f.shape}")
    flat = f.reshape(f.shape[0], -1)
    return ActivationStats(flat.mean(axis=1), flat.std(axis=1))


@dataclass
class DriftTracker:
    """EMA tracker of activation statistics for one agent (single writer).

    The moving average starts from the first observed frame; detection is
    disabled for the first ``warmup`` frames so the cold-start average
    cannot flag itself.
    """

    smoothing: float = 0.1
    threshold: float = 1.0
    warmup: int = 10
    kl_variant: str = "standard"
    ema: ActivationStats | None = None
    frames_seen: int = 0

    def __post_init__(self):
        if not (0.0 <= self.smoothing <= 1.0):
            raise StatsError("smoothing factor must lie in [0, 1]")
        if self.threshold <= 0.0:
            raise StatsError("threshold must be positive")
        if self.kl_variant not in KL_VARIANTS:
            raise StatsError(f"kl variant must be one of {KL_VARIANTS}")


def ema_update(tracker: DriftTracker, stats: ActivationStats) -> DriftTracker:
    """Fold one frame's statistics into the tracker's moving average."""
    if tracker.ema is None:
        tracker.ema = stats
        return tracker
    lam = tracker.smoothing
    tracker.ema = ActivationStats(
        lam * stats.means + (1.0 - lam) * tracker.ema.means,
        lam * stats.stds + (1.0 - lam) * tracker.ema.stds,
    )
    return tracker


def kl_gaussian(
    a: tuple[float, float], b: tuple[float, float], variant: str = "standard"
) -> float:
    """KL divergence between univariate Gaussians (mu, sigma).

    standard:   ln(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2
    simplified: (s1^2 + (m1-m2)^2) / (2 s2^2)
    """
    m1, s1 = a
    m2, s2 = b
    if s1 < SIGMA_FLOOR or s2 < SIGMA_FLOOR:
        raise StatsError(f"stds must be >= {SIGMA_FLOOR}")
    core = (s1**2 + (m1 - m2) ** 2) / (2.0 * s2**2)
    if variant == "simplified":
        return float(core)
    if variant == "standard":
        return float(math.log(s2 / s1) + core - 0.5)
    raise StatsError(f"kl variant must be one of {KL_VARIANTS}")


def divergence(a: ActivationStats, b: ActivationStats, variant: str = "standard") -> float:
    """Channel-averaged symmetric KL divergence between two stat summaries."""
    if len(a) != len(b):
        raise StatsError(f"stat lengths differ: {len(a)} vs {len(b)}")
    if variant not in KL_VARIANTS:
        raise StatsError(f"kl variant must be one of {KL_VARIANTS}")
    core_ab = (a.stds**2 + (a.means - b.means) ** 2) / (2.0 * b.stds**2)
    core_ba = (b.stds**2 + (b.means - a.means) ** 2) / (2.0 * a.stds**2)
    total = core_ab + core_ba
    if variant == "standard":
        # The opposed log-ratio terms cancel; only the two -1/2 remain.
        total = total - 1.0
    return float(total.mean())


def detect(
    tracker: DriftTracker, stats: ActivationStats
) -> tuple[bool, float, DriftTracker]:
    """Score one frame against the tracker and update the moving average.

    The divergence is computed before the EMA update, so a shifted frame
    cannot mask itself. During warmup the score is reported as 0 and no
    shift is ever flagged. The threshold is strict: a score exactly equal
    to it does not fire.
    """
    if tracker.ema is None or tracker.frames_seen < tracker.warmup:
        score, shift = 0.0, False
    else:
        score = divergence(tracker.ema, stats, tracker.kl_variant)
        shift = score > tracker.threshold
    ema_update(tracker, stats)
    tracker.frames_seen += 1
    return shift, score, tracker


def reset_reference(tracker: DriftTracker, stats: ActivationStats) -> DriftTracker:
    """Re-anchor the moving average on the given frame's statistics.

    Called after an agent has successfully adapted to a new domain: the
    detector re-arms for the next shift rather than re-firing on the one
    just handled. Warmup restarts so the refreshed average settles on a
    few frames of the new domain before detection resumes; a single-frame
    reference would otherwise inflate the scores right after adaptation.
    """
    tracker.ema = stats
    tracker.frames_seen = 0
    return tracker


def calibrate_threshold(scores, quantile: float = 0.99) -> float:
    """Empirical quantile of clean-stream scores (linear interpolation)."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size < 30:
        raise CalibrationError(
            f"need at least 30 clean scores to calibrate, got {scores.size}"
        )
    if not (0.0 < quantile <= 1.0):
        raise CalibrationError("quantile must lie in (0, 1]")
    return float(np.quantile(scores, quantile))
