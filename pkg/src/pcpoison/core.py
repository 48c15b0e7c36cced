"""Point-cloud container and distance/density primitives.

A point is a length-3 float64 array; a cloud stores an (n, 3) array whose
row order is storage-only (the semantics are set-valued).  All neighbor
queries are exact brute force: at desk scale (n <= 4096) determinism and
simplicity beat spatial indexing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointCloud",
    "LabeledSample",
    "Dataset",
    "as_points",
    "knn_mean_dist",
    "all_knn_mean_dists",
    "median_knn_dist",
    "point_to_cloud_dist",
    "point_to_cloud_dist_grad",
    "random_subsample",
    "subsample_indices",
    "center_and_scale",
    "load_cloud_txt",
    "save_cloud_txt",
]


class PointCloud:
    """Unordered set of 3D points stored as an (n, 3) float64 array."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"PointCloud(n={self.n})"


@dataclass
class LabeledSample:
    cloud: PointCloud
    label: int


@dataclass
class Dataset:
    samples: list[LabeledSample]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ValueError("dataset needs at least two classes")
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise ValueError(f"label {s.label} out of range for {len(self.class_names)} classes")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def by_class(self, label: int) -> list[LabeledSample]:
        return [s for s in self.samples if s.label == label]


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or raw array-like and return the (n, 3) array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(cloud).points


def _pairwise_sq_dists(pts: np.ndarray) -> np.ndarray:
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def all_knn_mean_dists(cloud, k: int) -> np.ndarray:
    """Per-point mean distance to the k nearest neighbors, self excluded.

    The query point is never its own neighbor, but duplicate coordinates
    at other indices are valid neighbors (distance 0).
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    d2 = _pairwise_sq_dists(pts)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, k - 1, axis=1)[:, :k]
    return np.sqrt(part).mean(axis=1)


def knn_mean_dist(cloud, index: int, k: int) -> float:
    """Mean distance from point ``index`` to its k nearest neighbors."""
    pts = as_points(cloud)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    if not 0 <= index < n:
        raise ValueError(f"index {index} out of range for n={n}")
    d = np.linalg.norm(pts - pts[index], axis=1)
    d[index] = np.inf
    return float(np.partition(d, k - 1)[:k].mean())


def median_knn_dist(cloud, k: int) -> float:
    """Median over points of the k-nearest-neighbor mean distance.

    The median of an even-length list is the mean of the two central order
    statistics (numpy convention).
    """
    return float(np.median(all_knn_mean_dists(cloud, k)))


def point_to_cloud_dist(c, cloud) -> float:
    """Minimum Euclidean distance from point ``c`` to any point of the cloud."""
    pts = as_points(cloud)
    c = np.asarray(c, dtype=np.float64).reshape(3)
    return float(np.min(np.linalg.norm(pts - c, axis=1)))


def point_to_cloud_dist_grad(c, cloud) -> np.ndarray:
    """Gradient of ``point_to_cloud_dist`` with respect to ``c``.

    Equals the unit vector from the nearest cloud point toward ``c``.  Ties
    resolve to the lowest storage index so the gradient is deterministic.
    At exact coincidence the distance is kinked; we return the zero vector
    (a valid subgradient) and warn.
    """
    pts = as_points(cloud)
    c = np.asarray(c, dtype=np.float64).reshape(3)
    diffs = c - pts
    dists = np.linalg.norm(diffs, axis=1)
    i = int(np.argmin(dists))
    if dists[i] == 0.0:
        warnings.warn("query point coincides with its nearest cloud point; "
                      "returning zero subgradient", RuntimeWarning, stacklevel=2)
        return np.zeros(3)
    return diffs[i] / dists[i]


def subsample_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement sample of ``m`` indices, in ascending order."""
    if not 1 <= m <= n:
        raise ValueError(f"m must satisfy 1 <= m <= n (m={m}, n={n})")
    idx = rng.choice(n, size=m, replace=False)
    idx.sort()
    return idx


def random_subsample(cloud, m: int, rng: np.random.Generator) -> PointCloud:
    """Keep ``m`` points chosen uniformly without replacement (storage order kept)."""
    pts = as_points(cloud)
    return PointCloud(pts[subsample_indices(pts.shape[0], m, rng)])


def center_and_scale(cloud) -> PointCloud:
    """Translate the centroid to the origin and scale so max point norm is 1.

    A zero-extent cloud is centered but left unscaled.
    """
    pts = as_points(cloud)
    centered = pts - pts.mean(axis=0)
    r = np.linalg.norm(centered, axis=1).max()
    if r > 0.0:
        centered = centered / r
    return PointCloud(centered)


def save_cloud_txt(path, cloud) -> None:
    """Write one point per line: three decimal fields, single spaces, LF endings."""
    pts = as_points(cloud)
    with open(path, "w", newline="\n") as fh:
        for x, y, z in pts:
            fh.write(f"{x!r} {y!r} {z!r}\n")


def load_cloud_txt(path) -> PointCloud:
    """Read the point-per-line text format; ``#``-prefixed lines are comments."""
    rows = []
    with open(path, "r") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(" ")
            if len(fields) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 fields, got {len(fields)}")
            rows.append([float(f) for f in fields])
    if not rows:
        raise ValueError(f"{path}: no points found")
    return PointCloud(np.array(rows))
