"""End-to-end experiment harness.

One attack run is: train the attacker's surrogate on its data split,
optimize the cluster location against the surrogate, forge the pattern,
poison the trainer's clean pool, train the victim, then score the attack
(ASR: fraction of pattern-carrying source-class test clouds the victim
sends to the target class) and its stealth (ACC: clean accuracy versus
an identically seeded victim trained without poison).

Every random stream is derived from the config's master seed plus a role
tag, so each stage can be rerun standalone and reproduce exactly what it
did inside a full run; the stage functions take precomputed upstream
artifacts for that reason (sweeps share them instead of recomputing).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attack import BackdoorPattern, PoisonPlan, build_poison_set, embed, \
    poison_dataset, synthesize_pattern
from .config import ExperimentConfig
from .core import Dataset, random_subsample
from .data import ExperimentData, load_dataset, make_splits
from .defense import AdConfig, sor_filter
from .geometry import GS, mad_optimize
from .location import LagrangianConfig, LocationProblem, OptResult, \
    optimize_location_multistart
from .network import PointSetModel, classify_many, init_model, train
from .seeds import derive_seed, rng_from

__all__ = [
    "AttackReport", "Artifacts",
    "evaluate_asr", "evaluate_acc",
    "load_or_make_splits", "train_surrogate_stage", "optimize_location_stage",
    "make_pattern", "build_poisoned_trainset", "train_victim_stage",
    "run_attack_experiment",
    "sweep_poison_count", "sweep_n_prime", "sweep_epsilon",
    "random_location_baseline",
]


@dataclass
class AttackReport:
    """Attack metrics plus the settings snapshot that produced them.

    ``asr`` is absent (None) when location optimization found no
    feasible placement; ``diagnostic`` then says so.
    """

    asr: float | None
    acc: float | None
    clean_acc_baseline: float | None
    per_class_acc: np.ndarray | None
    settings: dict
    diagnostic: str | None = None


@dataclass
class Artifacts:
    """Heavyweight intermediates of a run, for reuse and inspection."""

    data: ExperimentData
    surrogate: PointSetModel
    location: OptResult
    pattern: BackdoorPattern | None
    victim: PointSetModel | None
    clean_victim: PointSetModel | None


# ---------------------------------------------------------------------------
# metrics

def evaluate_asr(victim: PointSetModel, test_source, pattern: BackdoorPattern,
                 t: int, subsample_m: int | None = None,
                 ad: AdConfig | None = None, rng: np.random.Generator | None = None,
                 density_match: bool = False, knn_k: int = 4,
                 mc_samples: int = 50) -> float:
    """Fraction of embedded source-class clouds classified as the target.

    Per cloud: embed the pattern, optionally subsample to m points,
    optionally run the outlier filter, classify.  The rng drives
    embedding freshness, density matching, and subsampling, in cloud
    order.
    """
    if not test_source:
        raise ValueError("test_source must be nonempty")
    processed = []
    for cloud in test_source:
        x = embed(cloud, pattern, rng, density_match=density_match,
                  k=knn_k, mc_samples=mc_samples)
        if subsample_m:
            if rng is None:
                raise ValueError("subsampling requires an rng")
            x = random_subsample(x, subsample_m, rng)
        if ad is not None:
            x, _ = sor_filter(x, ad)
        processed.append(x)
    pred = classify_many(victim, processed)
    return float(np.mean(pred == t))


def evaluate_acc(victim: PointSetModel, test_set: Dataset,
                 subsample_m: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Clean accuracy and the per-class accuracy vector (nan if class absent)."""
    clouds = []
    for s in test_set.samples:
        x = s.cloud
        if subsample_m:
            if rng is None:
                raise ValueError("subsampling requires an rng")
            x = random_subsample(x, subsample_m, rng)
        clouds.append(x)
    pred = classify_many(victim, clouds)
    labels = np.array([s.label for s in test_set.samples])
    correct = pred == labels
    per_class = np.full(len(test_set.class_names), np.nan)
    for c in range(len(test_set.class_names)):
        mask = labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    return float(correct.mean()), per_class


# ---------------------------------------------------------------------------
# pipeline stages

def load_or_make_splits(cfg: ExperimentConfig) -> ExperimentData:
    if cfg.from_manifests:
        return ExperimentData(
            attacker=load_dataset(cfg.attacker_manifest),
            train_clean=load_dataset(cfg.train_manifest),
            test=load_dataset(cfg.test_manifest),
        )
    return make_splits(cfg.seed, cfg.trainer_per_class, cfg.attacker_per_class,
                       cfg.test_per_class, cfg.n_points)


def train_surrogate_stage(cfg: ExperimentConfig,
                          data: ExperimentData) -> tuple[PointSetModel, list[float]]:
    model = init_model(len(data.attacker.class_names),
                       seed=derive_seed(cfg.seed, "surrogate", "init"))
    tc = cfg.surrogate_train_config(derive_seed(cfg.seed, "surrogate", "train"))
    return train(model, data.attacker, tc, augment_m=cfg.surrogate_subsample_m or None)


def optimize_location_stage(cfg: ExperimentConfig, data: ExperimentData,
                            surrogate: PointSetModel) -> OptResult:
    problem = LocationProblem(surrogate, data.source_clouds(cfg.source_class),
                              cfg.target_class, epsilon=cfg.epsilon,
                              source_class=cfg.source_class)
    lag = cfg.lagrangian_config()
    return optimize_location_multistart(problem, lag, cfg.restarts,
                                        seed=derive_seed(cfg.seed, "location",
                                                         "multistart"))


def make_pattern(cfg: ExperimentConfig, data: ExperimentData,
                 center) -> BackdoorPattern:
    """Pattern at the optimized centre, radius-matched when configured.

    The base radius of a stochastic shape is tuned against the first
    attacker source cloud; per-cloud matching at embed time supersedes
    it when attack.density_match is on.
    """
    spec = cfg.geometry_spec()
    if spec.kind != GS and cfg.match_radius:
        reference = data.source_clouds(cfg.source_class)[0]
        spec = mad_optimize(spec, reference, k=cfg.knn_k,
                            mc_samples=cfg.mc_samples,
                            rng=rng_from(cfg.seed, "pattern", "radius"))
    return synthesize_pattern(spec, center, rng=rng_from(cfg.seed, "pattern",
                                                         "offsets"))


def build_poisoned_trainset(cfg: ExperimentConfig, data: ExperimentData,
                            pattern: BackdoorPattern) -> tuple[Dataset, np.ndarray]:
    if cfg.poison_count == 0:
        poison = []
    else:
        plan = PoisonPlan(cfg.source_class, cfg.target_class, pattern,
                          cfg.poison_count, cfg.density_match)
        poison = build_poison_set(data.attacker, plan,
                                  rng_from(cfg.seed, "poison", "build"))
    return poison_dataset(data.train_clean, poison,
                          rng_from(cfg.seed, "poison", "shuffle"))


def train_victim_stage(cfg: ExperimentConfig,
                       trainset: Dataset) -> tuple[PointSetModel, list[float]]:
    model = init_model(len(trainset.class_names),
                       seed=derive_seed(cfg.seed, "victim", "init"))
    tc = cfg.victim_train_config(derive_seed(cfg.seed, "victim", "train"))
    return train(model, trainset, tc, augment_m=cfg.victim_subsample_m or None)


def _settings(cfg: ExperimentConfig, location: OptResult | None,
              pattern: BackdoorPattern | None) -> dict:
    s = {
        "seed": cfg.seed,
        "source_class": cfg.source_class,
        "target_class": cfg.target_class,
        "poison_count": cfg.poison_count,
        "epsilon": cfg.epsilon,
        "density_match": cfg.density_match,
        "subsample_m": cfg.eval_subsample_m,
        "geometry": cfg.geometry_kind,
        "n_prime": cfg.n_prime,
    }
    if location is not None:
        s["epsilon0"] = location.epsilon0
        s["objective"] = location.objective
        s["feasibility"] = location.feasibility
        s["restarts_used"] = location.restarts_used
        if location.c_star is not None:
            s["location"] = [float(v) for v in location.c_star]
    if pattern is not None:
        s["pattern_spec"] = pattern.spec.to_record()
    return s


def run_attack_experiment(cfg: ExperimentConfig, *, data: ExperimentData | None = None,
                          surrogate: PointSetModel | None = None,
                          location: OptResult | None = None,
                          clean_victim: PointSetModel | None = None,
                          return_artifacts: bool = False):
    """Full pipeline; returns an AttackReport (plus Artifacts on request).

    Precomputed stage outputs can be injected; anything not injected is
    computed from the config's master seed exactly as a standalone stage
    run would, so injection never changes results.
    """
    m = cfg.eval_subsample_m or None
    if data is None:
        data = load_or_make_splits(cfg)
    if surrogate is None:
        surrogate, _ = train_surrogate_stage(cfg, data)
    if location is None:
        location = optimize_location_stage(cfg, data, surrogate)
    if location.c_star is None:
        report = AttackReport(None, None, None, None, _settings(cfg, location, None),
                              diagnostic=(
                                  f"location optimization infeasible: no iterate "
                                  f"reached mean posterior {location.threshold:.6g} "
                                  f"in {cfg.restarts} restarts"))
        if return_artifacts:
            return report, Artifacts(data, surrogate, location, None, None, None)
        return report

    pattern = make_pattern(cfg, data, location.c_star)
    trainset, _ = build_poisoned_trainset(cfg, data, pattern)
    victim, _ = train_victim_stage(cfg, trainset)
    if clean_victim is None:
        clean_trainset, _ = poison_dataset(data.train_clean, [],
                                           rng_from(cfg.seed, "poison", "shuffle"))
        clean_victim, _ = train_victim_stage(cfg, clean_trainset)

    asr = evaluate_asr(victim, data.source_clouds(cfg.source_class, "test"),
                       pattern, cfg.target_class, subsample_m=m,
                       rng=rng_from(cfg.seed, "eval", "asr"),
                       density_match=cfg.density_match, knn_k=cfg.knn_k,
                       mc_samples=cfg.mc_samples)
    acc, per_class = evaluate_acc(victim, data.test, subsample_m=m,
                                  rng=rng_from(cfg.seed, "eval", "acc"))
    clean_acc, _ = evaluate_acc(clean_victim, data.test, subsample_m=m,
                                rng=rng_from(cfg.seed, "eval", "acc"))
    report = AttackReport(asr, acc, clean_acc, per_class,
                          _settings(cfg, location, pattern))
    if return_artifacts:
        return report, Artifacts(data, surrogate, location, pattern, victim,
                                 clean_victim)
    return report


# ---------------------------------------------------------------------------
# sweeps and baselines

def sweep_poison_count(cfg: ExperimentConfig, counts) -> list[AttackReport]:
    """One report per poison count, sharing every count-independent stage."""
    data = load_or_make_splits(cfg)
    surrogate, _ = train_surrogate_stage(cfg, data)
    location = optimize_location_stage(cfg, data, surrogate)
    clean_victim = None
    reports = []
    for count in counts:
        sub = dataclasses.replace(cfg, poison_count=int(count)).validate()
        report, art = run_attack_experiment(
            sub, data=data, surrogate=surrogate, location=location,
            clean_victim=clean_victim, return_artifacts=True)
        clean_victim = art.clean_victim
        reports.append(report)
    return reports


def sweep_n_prime(cfg: ExperimentConfig, n_primes, with_ad: bool = False,
                  ad: AdConfig | None = None) -> list[AttackReport]:
    """One report per cluster size; with_ad adds a filtered ASR to settings.

    The location stage inserts a bare point, so it is shared across
    cluster sizes; pattern, poison set, and victim are rebuilt per size.
    """
    data = load_or_make_splits(cfg)
    surrogate, _ = train_surrogate_stage(cfg, data)
    location = optimize_location_stage(cfg, data, surrogate)
    ad = ad or AdConfig(cfg.ad_k, cfg.ad_band)
    clean_victim = None
    reports = []
    for n in n_primes:
        sub = dataclasses.replace(cfg, n_prime=int(n)).validate()
        report, art = run_attack_experiment(
            sub, data=data, surrogate=surrogate, location=location,
            clean_victim=clean_victim, return_artifacts=True)
        clean_victim = art.clean_victim
        if with_ad and art.victim is not None:
            report.settings["asr_with_ad"] = evaluate_asr(
                art.victim, data.source_clouds(sub.source_class, "test"),
                art.pattern, sub.target_class,
                subsample_m=sub.eval_subsample_m or None, ad=ad,
                rng=rng_from(sub.seed, "eval", "asr-ad"),
                density_match=sub.density_match, knn_k=sub.knn_k,
                mc_samples=sub.mc_samples)
        reports.append(report)
    return reports


def sweep_epsilon(cfg: ExperimentConfig, epsilons) -> list[AttackReport]:
    """One report per posterior margin; location is re-optimized every time."""
    data = load_or_make_splits(cfg)
    surrogate, _ = train_surrogate_stage(cfg, data)
    clean_victim = None
    reports = []
    for eps in epsilons:
        sub = dataclasses.replace(cfg, epsilon=float(eps)).validate()
        report, art = run_attack_experiment(
            sub, data=data, surrogate=surrogate,
            clean_victim=clean_victim, return_artifacts=True)
        clean_victim = art.clean_victim
        reports.append(report)
    return reports


def _scale_to_distance(problem_mean_distance, direction: np.ndarray,
                       target: float, s_max: float = 8.0,
                       steps: int = 4001) -> np.ndarray:
    """Point along ``direction`` whose mean cloud distance best matches target."""
    unit = direction / np.linalg.norm(direction)
    scales = np.linspace(0.0, s_max, steps)
    best_s, best_err = 0.0, np.inf
    for s in scales:
        err = abs(problem_mean_distance(s * unit) - target)
        if err < best_err:
            best_s, best_err = s, err
    return best_s * unit


def random_location_baseline(cfg: ExperimentConfig, trials: int,
                             location: OptResult | None = None) -> tuple[np.ndarray, list]:
    """ASR histogram for un-optimized cluster centres.

    Each trial draws a standard-normal direction, rescales it so its
    mean distance to the attacker's source clouds equals the optimized
    location's objective, and runs the remaining pipeline at that
    centre.  Returns the per-trial ASRs and the centres used.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    data = load_or_make_splits(cfg)
    surrogate, _ = train_surrogate_stage(cfg, data)
    if location is None:
        location = optimize_location_stage(cfg, data, surrogate)
    if location.c_star is None:
        raise ValueError("baseline needs a feasible optimized location to match")
    problem = LocationProblem(surrogate, data.source_clouds(cfg.source_class),
                              cfg.target_class, epsilon=cfg.epsilon,
                              source_class=cfg.source_class)
    clean_trainset, _ = poison_dataset(data.train_clean, [],
                                       rng_from(cfg.seed, "poison", "shuffle"))
    asrs = np.empty(trials)
    centers = []
    for i in range(trials):
        direction = rng_from(cfg.seed, "baseline", i, "direction").standard_normal(3)
        center = _scale_to_distance(problem.mean_distance, direction,
                                    location.objective)
        pattern = synthesize_pattern(cfg.geometry_spec() if not cfg.match_radius
                                     else make_pattern(cfg, data, center).spec,
                                     center,
                                     rng=rng_from(cfg.seed, "baseline", i, "offsets"))
        plan = PoisonPlan(cfg.source_class, cfg.target_class, pattern,
                          cfg.poison_count, cfg.density_match)
        poison = build_poison_set(data.attacker, plan,
                                  rng_from(cfg.seed, "baseline", i, "build"))
        trainset, _ = poison_dataset(data.train_clean, poison,
                                     rng_from(cfg.seed, "baseline", i, "shuffle"))
        victim, _ = train_victim_stage(cfg, trainset)
        asrs[i] = evaluate_asr(victim, data.source_clouds(cfg.source_class, "test"),
                               pattern, cfg.target_class,
                               subsample_m=cfg.eval_subsample_m or None,
                               rng=rng_from(cfg.seed, "baseline", i, "asr"),
                               density_match=cfg.density_match, knn_k=cfg.knn_k,
                               mc_samples=cfg.mc_samples)
        centers.append(center)
    return asrs, centers
