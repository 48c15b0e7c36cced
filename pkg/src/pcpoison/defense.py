"""Distance-based outlier defense and cluster survival measurement.

The defense scores every point by its mean distance to the k nearest
other points and keeps the point when that score sits within a fixed
number of standard deviations of the cloud's mean score.  One pass, no
iteration.  The survival study measures how often the inserted cluster
outlives the victim's subsample-to-half preprocessing, optionally
followed by the defense filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attack import BackdoorPattern, embed
from .core import PointCloud, all_knn_mean_dists, as_points, subsample_indices

__all__ = [
    "AdConfig", "SurvivalStats",
    "sor_filter", "removal_rate", "subsample_survival_pmf",
]


@dataclass(frozen=True)
class AdConfig:
    k: int = 2
    band: float = 1.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.band < 0:
            raise ValueError("band must be >= 0")


def sor_filter(cloud, cfg: AdConfig = AdConfig()) -> tuple[PointCloud, np.ndarray]:
    """Filtered cloud and the boolean keep mask, in input order.

    Keeps point i iff |d_i - mean(d)| <= band * std(d), where d_i is the
    mean distance to the k nearest other points and std is the
    population deviation.  A zero deviation keeps everything.
    """
    pts = as_points(cloud)
    d = all_knn_mean_dists(pts, cfg.k)
    sigma = float(d.std())
    if sigma == 0.0:
        keep = np.ones(pts.shape[0], dtype=bool)
    else:
        keep = np.abs(d - d.mean()) <= cfg.band * sigma
    if not keep.any():
        raise ValueError("filter removed every point; widen the band")
    return PointCloud(pts[keep]), keep


@dataclass(frozen=True)
class SurvivalStats:
    trials: int
    n_prime: int
    keep: int
    sub_all_removed: float
    sub_under_k: float
    sub_mean_survivors: float
    ad_all_removed: float | None
    ad_under_k: float | None
    ad_mean_survivors: float | None


def subsample_survival_pmf(n_host: int, n_prime: int, keep: int) -> np.ndarray:
    """Exact P(j cluster points survive a uniform keep-of-N subsample)."""
    total = n_host + n_prime
    if not 0 <= keep <= total:
        raise ValueError("keep out of range")
    denom = math.comb(total, keep)
    pmf = np.zeros(n_prime + 1)
    for j in range(n_prime + 1):
        if keep - j <= n_host and keep - j >= 0:
            pmf[j] = math.comb(n_prime, j) * math.comb(n_host, keep - j) / denom
    return pmf


def _batched_sor_counts(pts_all: np.ndarray, idx: np.ndarray, n_host: int,
                        cfg: AdConfig, chunk: int = 256) -> np.ndarray:
    """Cluster survivors after the filter, for many subsampled trials at once.

    ``idx`` holds one row of kept indices per trial into ``pts_all``;
    per trial this equals sor_filter on the subsampled cloud (same kNN
    scores, same band test), just evaluated in chunks of trials.
    """
    trials, m = idx.shape
    out = np.zeros(trials, dtype=np.int64)
    for lo in range(0, trials, chunk):
        sel = idx[lo : lo + chunk]
        X = pts_all[sel]                                     # (c, m, 3)
        sq = (X * X).sum(axis=2)
        G = X @ X.transpose(0, 2, 1)
        d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * G
        np.maximum(d2, 0.0, out=d2)
        c = X.shape[0]
        d2[:, np.arange(m), np.arange(m)] = np.inf
        knn = np.sqrt(np.partition(d2, cfg.k - 1, axis=2)[:, :, : cfg.k]).mean(axis=2)
        mu = knn.mean(axis=1, keepdims=True)
        sigma = knn.std(axis=1, keepdims=True)
        keep = np.where(sigma > 0.0, np.abs(knn - mu) <= cfg.band * sigma, True)
        out[lo : lo + c] = np.count_nonzero(keep & (sel >= n_host), axis=1)
    return out


def removal_rate(host_cloud, pattern: BackdoorPattern, trials: int,
                 rng: np.random.Generator, ad: AdConfig | None = None,
                 keep_fraction: float = 0.5, survive_threshold: int = 3) -> SurvivalStats:
    """Monte-Carlo cluster survival under subsample-to-half, then the filter.

    Each trial subsamples the embedded cloud uniformly without
    replacement down to floor(keep_fraction * N) points and counts
    surviving cluster points; with ``ad`` set, the filter then runs on
    the subsampled cloud and the post-filter count is recorded too.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    embedded = embed(host_cloud, pattern)
    n_host = as_points(host_cloud).shape[0]
    n_prime = pattern.geometry.n_prime
    total = embedded.n
    keep = int(keep_fraction * total)
    if keep < 1 or (ad is not None and keep <= ad.k):
        raise ValueError(f"subsample keeps {keep} points; too few")
    idx = np.empty((trials, keep), dtype=np.intp)
    for t in range(trials):
        idx[t] = subsample_indices(total, keep, rng)
    sub_counts = np.count_nonzero(idx >= n_host, axis=1)
    ad_counts = None
    if ad is not None:
        ad_counts = _batched_sor_counts(embedded.points, idx, n_host, ad)

    def stats(counts):
        return (
            float(np.mean(counts == 0)),
            float(np.mean(counts < survive_threshold)),
            float(counts.mean()),
        )

    s_all, s_under, s_mean = stats(sub_counts)
    if ad_counts is None:
        a_all = a_under = a_mean = None
    else:
        a_all, a_under, a_mean = stats(ad_counts)
    return SurvivalStats(trials, n_prime, keep, s_all, s_under, s_mean,
                         a_all, a_under, a_mean)
