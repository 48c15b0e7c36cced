"""Local geometry of the inserted cluster: generators and radius matching.

Four cluster shapes are supported: GS (deterministic grid on a sphere),
RS (random sphere), RP (random ball), HS (random half sphere).  The radius
parameter of the stochastic shapes is chosen so the cluster's local point
density matches the host cloud's, by minimizing the median absolute
deviation between the cluster's per-point kNN mean distances and the
host's median kNN distance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import all_knn_mean_dists, as_points, median_knn_dist
from .seeds import rng_from, spawn_key

__all__ = [
    "GS", "RS", "RP", "HS", "KINDS",
    "GeometrySpec", "LocalGeometry",
    "sphere_point", "generate",
    "mad_objective", "mad_optimize", "default_radius_grid",
    "OptimizationFailedError",
]

GS = "GS"
RS = "RS"
RP = "RP"
HS = "HS"
KINDS = (GS, RS, RP, HS)

GS_DEFAULT_GRID = (4, 8)


class OptimizationFailedError(RuntimeError):
    """No radius candidate produced a finite objective."""


@dataclass(frozen=True)
class GeometrySpec:
    """Parametric description of one cluster shape.

    ``radius_param`` is the sphere radius for GS/RS/HS and the maximum
    radius for RP.  ``optimized`` records whether it came from
    :func:`mad_optimize`.  GS uses a fixed deterministic grid whose shape
    ``gs_grid`` (theta count, phi count) must multiply to ``n_prime``;
    the default 4x8 grid pins n_prime to 32.
    """

    kind: str
    n_prime: int
    radius_param: float
    optimized: bool = False
    gs_grid: tuple[int, int] = GS_DEFAULT_GRID

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.n_prime < 1:
            raise ValueError("n_prime must be >= 1")
        if not self.radius_param > 0:
            raise ValueError("radius_param must be > 0")
        if self.kind == GS and self.gs_grid[0] * self.gs_grid[1] != self.n_prime:
            raise ValueError(
                f"GS grid {self.gs_grid} yields {self.gs_grid[0] * self.gs_grid[1]} "
                f"points, but n_prime={self.n_prime}"
            )

    def to_record(self) -> str:
        return (f"kind={self.kind} n_prime={self.n_prime} "
                f"radius_param={self.radius_param!r} optimized={self.optimized} "
                f"gs_grid={self.gs_grid[0]}x{self.gs_grid[1]}")

    @classmethod
    def from_record(cls, line: str) -> "GeometrySpec":
        try:
            kv = dict(item.split("=", 1) for item in line.split())
            grid = tuple(int(x) for x in kv.get("gs_grid", "4x8").split("x"))
            if len(grid) != 2:
                raise ValueError("gs_grid must look like AxB")
            return cls(kind=kv["kind"], n_prime=int(kv["n_prime"]),
                       radius_param=float(kv["radius_param"]),
                       optimized=kv.get("optimized", "False") == "True",
                       gs_grid=grid)
        except (KeyError, ValueError) as e:
            raise ValueError(f"bad geometry record {line!r}: {e}") from e


@dataclass(frozen=True)
class LocalGeometry:
    """Cluster point offsets relative to the cluster center, shape (n', 3)."""

    offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3))

    @property
    def n_prime(self) -> int:
        return self.offsets.shape[0]


def sphere_point(r: float, theta: float, phi: float) -> np.ndarray:
    """Point on the radius-``r`` sphere at polar angle theta, azimuth phi.

    Angles outside [0, pi] x [0, 2*pi] are wrapped onto the sphere with a
    warning.
    """
    if not r > 0:
        raise ValueError("radius must be > 0")
    if not (0.0 <= theta <= np.pi) or not (0.0 <= phi <= 2.0 * np.pi):
        warnings.warn("spherical angles out of range; wrapping", RuntimeWarning, stacklevel=2)
        theta = theta % (2.0 * np.pi)
        if theta > np.pi:
            theta = 2.0 * np.pi - theta
            phi = phi + np.pi
        phi = phi % (2.0 * np.pi)
    st = np.sin(theta)
    return np.array([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)])


def _gs_angles(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    a, b = grid
    thetas = (2 * np.arange(a) + 1) * np.pi / (2 * a)
    phis = (2 * np.arange(b) + 1) * np.pi / b
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    return tt.ravel(), pp.ravel()


def _on_sphere(r, theta, phi) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


def generate(spec: GeometrySpec, rng: np.random.Generator | None = None) -> LocalGeometry:
    """Draw one cluster geometry from the spec's generator.

    GS is deterministic (the rng is unused); RS/RP draw i.i.d. per-point
    angles; HS rejection-samples RS points against a random direction
    until exactly n' are accepted.
    """
    if spec.kind == GS:
        theta, phi = _gs_angles(spec.gs_grid)
        return LocalGeometry(_on_sphere(spec.radius_param, theta, phi))
    if rng is None:
        raise ValueError(f"{spec.kind} generation requires an rng")
    n = spec.n_prime
    if spec.kind == RS:
        theta = rng.uniform(0.0, np.pi, n)
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
        return LocalGeometry(_on_sphere(spec.radius_param, theta, phi))
    if spec.kind == RP:
        theta = rng.uniform(0.0, np.pi, n)
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
        radii = rng.uniform(0.0, spec.radius_param, n)
        return LocalGeometry(_on_sphere(radii, theta, phi))
    # HS: a half sphere facing a random direction.
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    accepted: list[np.ndarray] = []
    while len(accepted) < n:
        theta = rng.uniform(0.0, np.pi, n)
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
        pts = _on_sphere(spec.radius_param, theta, phi)
        keep = pts @ v > 0.0
        accepted.extend(pts[keep])
    return LocalGeometry(np.array(accepted[:n]))


def mad_objective(geometry: LocalGeometry, target_density: float, k: int) -> float:
    """Median over cluster points of |target density - kNN mean distance|."""
    if k >= geometry.n_prime:
        raise ValueError(f"k={k} must be < n_prime={geometry.n_prime}")
    dev = np.abs(target_density - all_knn_mean_dists(geometry.offsets, k))
    return float(np.median(dev))


def default_radius_grid(target_density: float, size: int = 64) -> np.ndarray:
    """Log-spaced radius candidates spanning [0.05, 5] x target density."""
    return np.geomspace(0.05 * target_density, 5.0 * target_density, size)


def mad_optimize(
    spec_template: GeometrySpec,
    target_cloud,
    k: int = 4,
    grid: np.ndarray | None = None,
    mc_samples: int = 50,
    rng: np.random.Generator | None = None,
) -> GeometrySpec:
    """Pick the radius whose clusters best match the target cloud's density.

    The target density is the cloud's median kNN distance.  For each
    candidate radius the expected objective over the generator's angle
    draws is estimated by Monte Carlo.  All four generators scale linearly
    in the radius parameter, so the same ``mc_samples`` unit-radius draws
    are scaled to every candidate (common random numbers); each sample uses
    a seed derived by index, making the estimate order-independent.

    Returns a copy of the template with ``radius_param`` set to the best
    candidate (ties take the smallest radius) and ``optimized`` set.
    """
    if rng is None:
        raise ValueError("mad_optimize requires an rng")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    target = median_knn_dist(as_points(target_cloud), k)
    if grid is None:
        grid = default_radius_grid(target)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be nonempty, positive, strictly ascending")
    if k >= spec_template.n_prime:
        raise ValueError(f"k={k} must be < n_prime={spec_template.n_prime}")

    base = spawn_key(rng)
    unit_spec = replace(spec_template, radius_param=1.0)
    samples = 1 if spec_template.kind == GS else mc_samples
    # (samples, n') per-point kNN means of unit-radius clusters.
    unit_means = np.stack([
        all_knn_mean_dists(generate(unit_spec, rng_from(base, "mad-sample", j)).offsets, k)
        for j in range(samples)
    ])
    # objective(r) = mean_j median_i |target - r * unit_means[j, i]|
    dev = np.abs(target - grid[:, None, None] * unit_means[None, :, :])
    estimates = np.median(dev, axis=2).mean(axis=1)

    if not np.any(np.isfinite(estimates)):
        raise OptimizationFailedError("all radius candidates produced non-finite objectives")
    best = int(np.argmin(estimates))  # argmin takes the first (smallest radius) on ties
    if best in (0, grid.size - 1):
        warnings.warn(
            f"optimal radius {grid[best]:.6g} sits on the grid edge; widen the grid",
            RuntimeWarning, stacklevel=2,
        )
    return replace(spec_template, radius_param=float(grid[best]), optimized=True)
