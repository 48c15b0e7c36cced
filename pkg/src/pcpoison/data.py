"""Synthetic point-cloud corpus and on-disk dataset layout.

Five surface classes (sphere, cube, cylinder, torus, plane) sampled at a
fixed point count, posed with a random heading, a small random tilt,
mild anisotropic scaling, and additive coordinate noise, then centered
and scaled to the unit ball.  Every cloud is a pure function of the
master seed plus its (role, class, index) tags, so any split can be
regenerated without replaying the others.

On disk a dataset is a directory of point files plus a manifest whose
lines are "<relative-path><TAB><class-name>".
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core import Dataset, LabeledSample, PointCloud, center_and_scale, \
    load_cloud_txt, save_cloud_txt
from .seeds import rng_from

__all__ = [
    "CLASS_NAMES", "ExperimentData",
    "make_cloud", "make_dataset", "make_splits",
    "save_dataset", "load_dataset",
]

CLASS_NAMES = ("sphere", "cube", "cylinder", "torus", "plane")

_TILT_STD = np.deg2rad(5.0)
_NOISE_STD = 0.01
_SCALE_LO, _SCALE_HI = 0.9, 1.1


def _sample_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_cube(n, rng):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[np.ix_(m, others)] = uv[m]
        pts[m, a] = sign[m]
    return pts


def _sample_cylinder(n, rng):
    r, h = 0.7, 1.0
    lateral_area = 2.0 * np.pi * r * (2.0 * h)
    cap_area = 2.0 * np.pi * r * r
    on_side = rng.uniform(0.0, 1.0, n) < lateral_area / (lateral_area + cap_area)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    z = rng.uniform(-h, h, n)
    rad = r * np.sqrt(rng.uniform(0.0, 1.0, n))
    cap_sign = np.where(rng.uniform(0.0, 1.0, n) < 0.5, 1.0, -1.0)
    pts = np.empty((n, 3))
    pts[:, 0] = np.where(on_side, r, rad) * np.cos(phi)
    pts[:, 1] = np.where(on_side, r, rad) * np.sin(phi)
    pts[:, 2] = np.where(on_side, z, cap_sign * h)
    return pts


def _sample_torus(n, rng):
    R, r = 0.7, 0.3
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    ring = R + r * np.cos(phi)
    return np.column_stack([ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)])


def _sample_plane(n, rng):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
    return pts


_SAMPLERS = (_sample_sphere, _sample_cube, _sample_cylinder, _sample_torus, _sample_plane)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_cloud(class_index: int, n_points: int, rng: np.random.Generator) -> PointCloud:
    """One posed, jittered, unit-ball-normalized cloud of the given class."""
    if not 0 <= class_index < len(CLASS_NAMES):
        raise ValueError(f"class_index must be in [0, {len(CLASS_NAMES)})")
    pts = _SAMPLERS[class_index](n_points, rng)
    scale = rng.uniform(_SCALE_LO, _SCALE_HI, 3)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    tilt_x, tilt_y = rng.normal(0.0, _TILT_STD, 2)
    R = _rot_z(heading) @ _rot_y(tilt_y) @ _rot_x(tilt_x)
    pts = (pts * scale) @ R.T
    pts += rng.normal(0.0, _NOISE_STD, pts.shape)
    return center_and_scale(PointCloud(pts))


def make_dataset(per_class: int, n_points: int, seed: int, role: str) -> Dataset:
    """``per_class`` clouds of every class; each cloud individually seeded."""
    if per_class < 1 or n_points < 1:
        raise ValueError("per_class and n_points must be >= 1")
    samples = []
    for ci in range(len(CLASS_NAMES)):
        for i in range(per_class):
            rng = rng_from(seed, "data", role, ci, i)
            samples.append(LabeledSample(make_cloud(ci, n_points, rng), ci))
    return Dataset(samples, CLASS_NAMES)


@dataclass
class ExperimentData:
    """Attacker's clouds, the trainer's clean pool, and the held-out test set."""

    attacker: Dataset
    train_clean: Dataset
    test: Dataset

    def source_clouds(self, source_class: int, split: str = "attacker") -> list[PointCloud]:
        ds = getattr(self, {"attacker": "attacker", "train": "train_clean",
                            "test": "test"}[split])
        return [s.cloud for s in ds.samples if s.label == source_class]


def make_splits(seed: int, trainer_per_class: int = 200, attacker_per_class: int = 50,
                test_per_class: int = 50, n_points: int = 512) -> ExperimentData:
    """Three disjoint splits, each a pure function of the seed and its role tag."""
    return ExperimentData(
        attacker=make_dataset(attacker_per_class, n_points, seed, "attacker"),
        train_clean=make_dataset(trainer_per_class, n_points, seed, "train"),
        test=make_dataset(test_per_class, n_points, seed, "test"),
    )


def save_dataset(dir_path, dataset: Dataset, manifest_name: str = "manifest.tsv") -> str:
    """Write point files under per-class subdirectories plus the manifest.

    Returns the manifest path.  Relative paths in the manifest use '/'
    regardless of platform.
    """
    dir_path = str(dir_path)
    os.makedirs(dir_path, exist_ok=True)
    counters = [0] * len(dataset.class_names)
    lines = []
    for s in dataset.samples:
        name = dataset.class_names[s.label]
        rel = f"{name}/{name}_{counters[s.label]:04d}.txt"
        counters[s.label] += 1
        full = os.path.join(dir_path, *rel.split("/"))
        os.makedirs(os.path.dirname(full), exist_ok=True)
        save_cloud_txt(full, s.cloud)
        lines.append(f"{rel}\t{name}")
    manifest = os.path.join(dir_path, manifest_name)
    with open(manifest, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest and every point file it names.

    Class names get indices in order of first appearance, which makes a
    save/load round trip label-stable.
    """
    manifest_path = str(manifest_path)
    base = os.path.dirname(manifest_path)
    names: list[str] = []
    samples = []
    with open(manifest_path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{manifest_path}:{lineno}: expected <path>\\t<class>")
            rel, cname = line.split("\t", 1)
            if not rel or not cname:
                raise ValueError(f"{manifest_path}:{lineno}: empty path or class name")
            if cname not in names:
                names.append(cname)
            cloud = load_cloud_txt(os.path.join(base, *rel.split("/")))
            samples.append(LabeledSample(cloud, names.index(cname)))
    if not samples:
        raise ValueError(f"{manifest_path}: manifest lists no samples")
    return Dataset(samples, tuple(names))
