"""Confidence-thresholded region extraction with min/max clamping, corpus
threshold calibration, and per-image count statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectionSet


@dataclass
class ExtractionConfig:
    threshold: float = 0.5
    min_regions: int = 10
    max_regions: int = 100

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")
        if not (0 < self.min_regions <= self.max_regions):
            raise ValueError(f"need 0 < min_regions <= max_regions, got {self.min_regions}, {self.max_regions}")


class CalibrationRangeError(ValueError):
    def __init__(self, target, low, high):
        super().__init__(f"target total {target} outside achievable range [{low}, {high}]")
        self.target = target
        self.low = low
        self.high = high


def selection_order(confidences):
    """Indices sorted by descending confidence, ties broken by lower index."""
    confidences = np.asarray(confidences, dtype=np.float64)
    return np.lexsort((np.arange(confidences.size), -confidences))


def clamped_count(confidences, cfg: ExtractionConfig) -> int:
    n_above = int((np.asarray(confidences, dtype=np.float64) > cfg.threshold).sum())
    n = min(max(n_above, cfg.min_regions), cfg.max_regions)
    return min(n, np.asarray(confidences).size)


def extract_regions(det: DetectionSet, cfg: ExtractionConfig) -> DetectionSet:
    """Keep detections above the threshold, clamped to [min, max] regions,
    ordered by descending confidence."""
    conf = det.confidence.data
    order = selection_order(conf)
    return det.subset(order[: clamped_count(conf, cfg)])


def calibrate_threshold(score_lists, target_total, cfg: ExtractionConfig):
    """Smallest threshold whose clamped corpus total is closest to the target.

    The total extracted count is a step function of the threshold, constant
    between adjacent score values, so it suffices to evaluate thresholds at 0
    and at every distinct score. A single descending sweep maintains the
    per-image clamped counts incrementally.
    """
    scores = [np.asarray(s, dtype=np.float64) for s in score_lists]
    lengths = np.array([s.size for s in scores], dtype=np.int64)

    def clamp(count, length):
        return min(max(int(count), cfg.min_regions), cfg.max_regions, int(length))

    low = int(sum(clamp(0, n) for n in lengths))
    high = int(sum(clamp(n, n) for n in lengths))
    if not (low <= target_total <= high):
        raise CalibrationRangeError(target_total, low, high)

    flat = np.concatenate(scores) if scores else np.zeros(0)
    owners = np.concatenate([np.full(s.size, i, dtype=np.int64) for i, s in enumerate(scores)]) if scores else np.zeros(0, dtype=np.int64)
    order = np.argsort(-flat, kind="stable")
    flat, owners = flat[order], owners[order]

    candidates = np.unique(np.concatenate([flat, [0.0]]))[::-1]
    counts = np.zeros(len(scores), dtype=np.int64)
    total = low
    best_th, best_dev = None, None
    ptr = 0
    for th in candidates:
        while ptr < flat.size and flat[ptr] > th:
            i = owners[ptr]
            total -= clamp(counts[i], lengths[i])
            counts[i] += 1
            total += clamp(counts[i], lengths[i])
            ptr += 1
        dev = abs(total - target_total)
        # candidates descend, so on equal deviation the later (smaller)
        # threshold wins
        if best_dev is None or dev <= best_dev:
            best_th, best_dev = float(th), int(dev)
    return best_th, best_dev


@dataclass
class RegionStats:
    counts: np.ndarray
    bins: np.ndarray
    histogram: np.ndarray
    total: int
    mean: float
    skewness: float
    threshold: float | None = None

    def to_summary(self):
        return {
            "images": int(self.counts.size),
            "total": int(self.total),
            "mean": float(self.mean),
            "skewness": float(self.skewness),
            "threshold": self.threshold,
        }


def sample_skewness(values):
    """Third standardized moment; defined as 0 for zero variance."""
    values = np.asarray(values, dtype=np.float64)
    m = values.mean()
    m2 = ((values - m) ** 2).mean()
    if m2 == 0.0:
        return 0.0
    m3 = ((values - m) ** 3).mean()
    return float(m3 / m2**1.5)


def region_histogram(counts, cfg: ExtractionConfig, threshold=None) -> RegionStats:
    counts = np.asarray(counts, dtype=np.int64)
    bins = np.arange(cfg.min_regions, cfg.max_regions + 1)
    hist = np.array([(counts == b).sum() for b in bins], dtype=np.int64)
    return RegionStats(
        counts=counts,
        bins=bins,
        histogram=hist,
        total=int(counts.sum()),
        mean=float(counts.mean()) if counts.size else 0.0,
        skewness=sample_skewness(counts) if counts.size else 0.0,
        threshold=threshold,
    )


def write_histogram_csv(stats: RegionStats, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count"])
        for b, c in zip(stats.bins, stats.histogram):
            writer.writerow([int(b), int(c)])


def write_stats_json(stats: RegionStats, path):
    Path(path).write_text(json.dumps(stats.to_summary(), sort_keys=True, indent=2) + "\n")
