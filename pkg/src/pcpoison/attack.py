"""Assembling the backdoor pattern and the poisoned training set.

A pattern is a recipe for a small inserted cluster: a geometry spec, a
spatial location for the cluster centre, and a flag saying whether the
offsets are regenerated fresh for every embedding (the stochastic
shapes) or frozen once (the deterministic grid, or any shape pinned for
a controlled comparison).  Training-time poisoning embeds the pattern
into copies of source-class clouds and relabels them to the target
class; at test time the same pattern is embedded into held-out
source-class clouds to see whether the victim flips them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Dataset, LabeledSample, PointCloud, as_points, subsample_indices
from .geometry import GS, GeometrySpec, LocalGeometry, generate, mad_optimize

__all__ = [
    "BackdoorPattern", "PoisonPlan",
    "synthesize_pattern", "embed", "build_poison_set", "poison_dataset",
    "save_pattern", "load_pattern",
]


@dataclass(frozen=True)
class BackdoorPattern:
    """Cluster recipe: centre, geometry spec, and offset-freshness policy.

    ``geometry`` holds the frozen offsets and must be present when
    ``per_embedding_fresh`` is false.  A zero-point frozen geometry is
    tolerated as a degenerate control (embedding becomes the identity).
    """

    center: np.ndarray
    spec: GeometrySpec
    per_embedding_fresh: bool
    geometry: LocalGeometry | None = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)):
            raise ValueError("pattern center must be finite")
        object.__setattr__(self, "center", c)
        if self.per_embedding_fresh:
            if self.spec.kind == GS:
                raise ValueError("GS offsets are deterministic; freshness is meaningless")
        else:
            if self.geometry is None:
                raise ValueError("frozen pattern needs explicit geometry offsets")
            if self.geometry.n_prime not in (0, self.spec.n_prime):
                raise ValueError(
                    f"frozen geometry has {self.geometry.n_prime} offsets, "
                    f"spec says {self.spec.n_prime}")


@dataclass(frozen=True)
class PoisonPlan:
    """Which class gets flipped to which, with what pattern, how many copies."""

    source_class: int
    target_class: int
    pattern: BackdoorPattern
    poison_count: int
    per_cloud_density_match: bool = False

    def __post_init__(self):
        if self.source_class == self.target_class:
            raise ValueError("source and target class must differ")
        if min(self.source_class, self.target_class) < 0:
            raise ValueError("class indices must be >= 0")
        if self.poison_count < 1:
            raise ValueError("poison_count must be >= 1")


def synthesize_pattern(spec: GeometrySpec, center,
                       rng: np.random.Generator | None = None,
                       per_embedding_fresh: bool | None = None) -> BackdoorPattern:
    """Pattern with the conventional freshness for the spec's kind.

    The grid shape freezes its deterministic offsets; the stochastic
    shapes default to fresh offsets per embedding and only need an rng
    here when explicitly frozen.
    """
    if per_embedding_fresh is None:
        per_embedding_fresh = spec.kind != GS
    geometry = None if per_embedding_fresh else generate(spec, rng)
    return BackdoorPattern(np.asarray(center, dtype=np.float64), spec,
                           per_embedding_fresh, geometry)


def embed(cloud, pattern: BackdoorPattern, rng: np.random.Generator | None = None,
          *, density_match: bool = False, k: int = 4, mc_samples: int = 50) -> PointCloud:
    """Host cloud with the cluster appended after its own points.

    ``density_match`` re-tunes the cluster radius to this host's own
    density before generating offsets; fresh patterns and density
    matching both consume the rng.
    """
    pts = as_points(cloud)
    spec = pattern.spec
    if density_match:
        if rng is None:
            raise ValueError("density_match requires an rng")
        spec = mad_optimize(replace(spec, optimized=False), pts,
                            k=k, mc_samples=mc_samples, rng=rng)
    if pattern.per_embedding_fresh or density_match:
        if rng is None and spec.kind != GS:
            raise ValueError("fresh offsets require an rng")
        geometry = generate(spec, rng)
    else:
        geometry = pattern.geometry
    if geometry.n_prime == 0:
        return PointCloud(pts.copy())
    return PointCloud(np.vstack([pts, geometry.offsets + pattern.center]))


def build_poison_set(attacker_pool: Dataset, plan: PoisonPlan,
                     rng: np.random.Generator) -> list[LabeledSample]:
    """Relabeled embeddings of ``poison_count`` drawn source-class clouds."""
    source_clouds = [s.cloud for s in attacker_pool.samples
                     if s.label == plan.source_class]
    if plan.poison_count > len(source_clouds):
        raise ValueError(
            f"plan wants {plan.poison_count} poison samples but the pool has "
            f"only {len(source_clouds)} source-class clouds")
    chosen = subsample_indices(len(source_clouds), plan.poison_count, rng)
    return [
        LabeledSample(
            embed(source_clouds[i], plan.pattern, rng,
                  density_match=plan.per_cloud_density_match),
            plan.target_class)
        for i in chosen
    ]


def poison_dataset(clean: Dataset, poison: list[LabeledSample],
                   rng: np.random.Generator) -> tuple[Dataset, np.ndarray]:
    """Clean-plus-poison union in a seeded shuffle.

    Returns the merged dataset and a boolean provenance mask (True =
    poison) aligned with it, for audit only; the training loop never
    sees the mask.
    """
    n_classes = len(clean.class_names)
    for s in poison:
        if not 0 <= s.label < n_classes:
            raise ValueError(f"poison label {s.label} out of range for {n_classes} classes")
    merged = list(clean.samples) + list(poison)
    is_poison = np.zeros(len(merged), dtype=bool)
    is_poison[len(clean.samples):] = True
    order = rng.permutation(len(merged))
    return Dataset([merged[i] for i in order], clean.class_names), is_poison[order]


# ---------------------------------------------------------------------------
# pattern persistence: one text file, plus the frozen offsets when present

def save_pattern(path, pattern: BackdoorPattern) -> None:
    lines = [
        f"spec = {pattern.spec.to_record()}",
        f"center = {pattern.center[0]!r} {pattern.center[1]!r} {pattern.center[2]!r}",
        f"per_embedding_fresh = {'true' if pattern.per_embedding_fresh else 'false'}",
    ]
    if pattern.geometry is not None:
        for u in pattern.geometry.offsets:
            lines.append(f"offset = {u[0]!r} {u[1]!r} {u[2]!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_pattern(path) -> BackdoorPattern:
    spec = center = fresh = None
    offsets: list[list[float]] = []
    has_offsets = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                if key == "spec":
                    spec = GeometrySpec.from_record(value)
                elif key == "center":
                    center = [float(x) for x in value.split()]
                elif key == "per_embedding_fresh":
                    fresh = {"true": True, "false": False}[value.lower()]
                elif key == "offset":
                    has_offsets = True
                    offsets.append([float(x) for x in value.split()])
                else:
                    raise ValueError(f"unknown key {key!r}")
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    if spec is None or center is None or fresh is None:
        raise ValueError(f"{path}: pattern file needs spec, center, per_embedding_fresh")
    geometry = LocalGeometry(np.array(offsets).reshape(-1, 3)) if has_offsets else None
    return BackdoorPattern(np.array(center), spec, fresh, geometry)
