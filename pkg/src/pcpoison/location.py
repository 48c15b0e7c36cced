"""Spatial placement of the inserted cluster.

The attacker wants a location c that (a) sits far from the clouds it
will be inserted into, so a distance-based filter cannot trivially
remove it, while (b) keeping the surrogate's posterior for the target
class above what the unmodified clouds already get.  Both pulls are
combined in a Lagrangian

    J(c, lam) = mean_j [ lam * d(c, X_j) - log p(t | X_j + {c}) ]

minimized by gradient descent on c while lam adapts multiplicatively:
whenever the mean target posterior clears the feasibility threshold the
distance term is made to matter more (lam grows) and the incumbent best
may be updated; otherwise lam shrinks so the posterior term can recover.

Evaluating p(t | X_j + {c}) for every attacker cloud at every iteration
is the hot loop, so the per-cloud pooled feature vectors are cached
once: inserting points can only raise pooled features, never lower
them, and the gradient reaches c exactly through the features where c's
own feature strictly beats the cached host max (pooling ties break to
the lowest index and insertions sit after the host points).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import network
from .core import as_points
from .geometry import LocalGeometry
from .network import PointSetModel
from .seeds import rng_from, spawn_key

__all__ = [
    "LagrangianConfig", "LocationProblem", "OptResult", "TraceRow",
    "epsilon0", "optimize_location", "optimize_location_multistart",
    "write_trace_csv",
]


@dataclass(frozen=True)
class LagrangianConfig:
    """Knobs of the adaptive-multiplier descent."""

    delta: float = 0.01        # gradient step size on c
    tau_max: int = 3000        # iteration budget
    alpha: float = 1.5         # multiplicative lambda update
    lambda_init: float = 1e-5
    lambda_min: float = 1e-12
    lambda_max: float = 1e6
    log_floor: float = 1e-12   # posterior floor inside the log term

    def __post_init__(self):
        if self.delta <= 0 or self.tau_max < 1:
            raise ValueError("delta must be positive and tau_max >= 1")
        if self.alpha <= 1:
            raise ValueError("alpha must be > 1")
        if not 0 < self.lambda_min <= self.lambda_init <= self.lambda_max:
            raise ValueError("need lambda_min <= lambda_init <= lambda_max")
        if not 0 < self.log_floor < 1:
            raise ValueError("log_floor must be in (0, 1)")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    rho: float
    lam: float
    objective: float
    clamped_count: int


@dataclass
class OptResult:
    """Outcome of one descent or of a multistart.

    ``c_star`` is None when no iterate ever met the posterior
    threshold; the trace is still complete for diagnosis.  For a
    multistart, the trace belongs to the winning restart.
    """

    c_star: np.ndarray | None
    objective: float
    feasibility: float
    epsilon0: float
    threshold: float
    restarts_used: int
    feasible_iterations: int
    clamp_events: int
    trace: list[TraceRow] = field(repr=False)

    @property
    def feasible(self) -> bool:
        return self.c_star is not None


@dataclass
class _Eval:
    mean_dist: float
    dist_grad: np.ndarray
    mean_logp: float
    logp_grad: np.ndarray
    rho: float
    floored: int


class LocationProblem:
    """Surrogate model, the attacker's source-class clouds, target class, margin.

    When ``geometry`` is given the posterior term inserts the whole
    cluster (offsets translated to c) instead of the bare point c; the
    distance term always measures from the centre c.
    """

    def __init__(self, model: PointSetModel, source_clouds, target_class: int,
                 epsilon: float = 0.02, source_class: int | None = None,
                 geometry: LocalGeometry | None = None):
        if not source_clouds:
            raise ValueError("need at least one source cloud")
        if not 0 <= target_class < model.n_classes:
            raise ValueError(f"target class {target_class} out of range")
        if source_class is not None and source_class == target_class:
            raise ValueError("source and target class must differ")
        if not epsilon > 0:
            raise ValueError("epsilon must be > 0")
        self.model = model
        self.source_class = source_class
        self.target_class = int(target_class)
        self.epsilon = float(epsilon)
        self.geometry = geometry
        self._clouds = [as_points(c) for c in source_clouds]
        pooled, base_logp = [], []
        for pts in self._clouds:
            logits, _, caches = network._forward_cloud(model, pts)
            pooled.append(caches[2])
            base_logp.append(network._log_softmax(logits)[self.target_class])
        self._pooled = np.stack(pooled)                      # (N, F)
        self._epsilon0 = float(np.exp(base_logp).mean())
        if self._epsilon0 + self.epsilon > 1.0:
            raise ValueError(
                f"threshold epsilon0 + epsilon = {self._epsilon0 + self.epsilon:.6g} "
                "exceeds 1; the posterior constraint can never hold")
        if self._epsilon0 + self.epsilon > 0.5:
            warnings.warn(
                f"threshold epsilon0 + epsilon = {self._epsilon0 + self.epsilon:.6g} "
                "> 0.5; the constraint is unlikely to be satisfiable at useful "
                "distances", RuntimeWarning, stacklevel=2)
        sizes = {pts.shape[0] for pts in self._clouds}
        self._stacked = np.stack(self._clouds) if len(sizes) == 1 else None

    @property
    def n_clouds(self) -> int:
        return len(self._clouds)

    @property
    def epsilon0(self) -> float:
        """Mean target-class posterior of the untouched source clouds."""
        return self._epsilon0

    @property
    def threshold(self) -> float:
        return self._epsilon0 + self.epsilon

    # -- distance term ----------------------------------------------------

    def _distance(self, c: np.ndarray):
        """Mean min-distance from c to each cloud and its gradient in c."""
        if self._stacked is not None:
            diff = c - self._stacked                          # (N, n, 3)
            norms = np.sqrt((diff * diff).sum(axis=2))
            idx = norms.argmin(axis=1)
            rows = np.arange(len(self._clouds))
            d = norms[rows, idx]
            with np.errstate(invalid="ignore"):
                units = diff[rows, idx] / d[:, None]
            units[d == 0.0] = 0.0
            return float(d.mean()), units.mean(axis=0)
        total, grad = 0.0, np.zeros(3)
        for pts in self._clouds:
            diff = c - pts
            norms = np.linalg.norm(diff, axis=1)
            i = int(norms.argmin())
            total += norms[i]
            if norms[i] > 0.0:
                grad += diff[i] / norms[i]
        n = len(self._clouds)
        return total / n, grad / n

    def mean_distance(self, c) -> float:
        return self._distance(np.asarray(c, dtype=np.float64))[0]

    # -- posterior term ---------------------------------------------------

    def _inserted_points(self, c: np.ndarray) -> np.ndarray:
        if self.geometry is None:
            return c[None, :]
        return self.geometry.offsets + c

    def _evaluate(self, c: np.ndarray, log_floor: float) -> _Eval:
        model = self.model
        mean_dist, dist_grad = self._distance(c)
        ins = self._inserted_points(c)
        zs, acts = network._point_stack_forward(model, ins)
        feats = acts[-1]                                      # (n_ins, F)
        ins_max = feats.max(axis=0)
        ins_arg = feats.argmax(axis=0)
        combined = np.maximum(self._pooled, ins_max)          # (N, F)
        hzs, hacts = network._head_forward(model, combined)
        logits = hacts[-1]                                    # (N, C)
        if not np.all(np.isfinite(logits)):
            raise network.NumericOverflowError("non-finite logits in location eval")
        logp = network._log_softmax(logits)[:, self.target_class]
        rho = float(np.exp(logp).mean())
        floor = math.log(log_floor)
        floored = int((logp < floor).sum())
        mean_logp = float(np.maximum(logp, floor).mean())
        # d log p / d logits, averaged over clouds
        dlogits = -network._softmax(logits)
        dlogits[:, self.target_class] += 1.0
        dlogits /= len(self._clouds)
        dpooled = network._head_backward(model, hzs, hacts, dlogits)
        win = ins_max > self._pooled                          # (N, F)
        per_feature = (dpooled * win).sum(axis=0)             # (F,)
        dfeat = np.zeros_like(feats)
        dfeat[ins_arg, np.arange(feats.shape[1])] = per_feature
        dpts = network._point_stack_backward(model, zs, acts, dfeat)
        return _Eval(mean_dist, dist_grad, mean_logp, dpts.sum(axis=0), rho, floored)

    def mean_posterior(self, c) -> float:
        """Mean over clouds of p(target | cloud + insertion at c)."""
        return self._evaluate(np.asarray(c, dtype=np.float64), 1e-300).rho

    def lagrangian(self, c, lam: float,
                   log_floor: float = LagrangianConfig.log_floor) -> tuple[float, np.ndarray]:
        """Value and gradient of J at (c, lam).

        The log term's value is floored at log(log_floor) so J stays
        finite when a cloud's target posterior underflows; the gradient
        is the exact log-softmax backprop either way.
        """
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        ev = self._evaluate(np.asarray(c, dtype=np.float64), log_floor)
        return lam * ev.mean_dist - ev.mean_logp, lam * ev.dist_grad - ev.logp_grad


def epsilon0(problem: LocationProblem) -> float:
    return problem.epsilon0


def optimize_location(problem: LocationProblem,
                      cfg: LagrangianConfig = LagrangianConfig(),
                      rng: np.random.Generator | None = None,
                      c0: np.ndarray | None = None) -> OptResult:
    """Adaptive-multiplier descent from one random (or given) start.

    Per iteration: step c against the gradient of J at the current lam,
    then measure the mean target posterior rho at the new c.  Feasible
    (rho at least epsilon0 + epsilon) multiplies lam by alpha and
    promotes c to incumbent when its mean distance improves; infeasible
    divides lam by alpha.  An infeasible run returns c_star = None with
    the full trace.
    """
    if c0 is None:
        if rng is None:
            raise ValueError("need rng or explicit c0")
        c = rng.standard_normal(3)
    else:
        c = np.asarray(c0, dtype=np.float64).copy()
        if c.shape != (3,):
            raise ValueError("c0 must have shape (3,)")
    threshold = problem.threshold
    lam = cfg.lambda_init
    best_c, best_dist, best_rho = None, math.inf, math.nan
    clamps = 0
    feasible = 0
    trace: list[TraceRow] = []
    ev = problem._evaluate(c, cfg.log_floor)
    for tau in range(1, cfg.tau_max + 1):
        grad = lam * ev.dist_grad - ev.logp_grad
        c = c - cfg.delta * grad
        ev = problem._evaluate(c, cfg.log_floor)
        clamps += ev.floored
        if ev.rho >= threshold:
            feasible += 1
            new_lam = lam * cfg.alpha
            if ev.mean_dist < best_dist:
                best_c, best_dist, best_rho = c.copy(), ev.mean_dist, ev.rho
        else:
            new_lam = lam / cfg.alpha
        lam = min(max(new_lam, cfg.lambda_min), cfg.lambda_max)
        if lam != new_lam:
            clamps += 1
        trace.append(TraceRow(tau, ev.rho, lam, ev.mean_dist, clamps))
    return OptResult(best_c, best_dist, best_rho, problem.epsilon0, threshold,
                     1, feasible, clamps, trace)


def optimize_location_multistart(problem: LocationProblem,
                                 cfg: LagrangianConfig = LagrangianConfig(),
                                 n_restarts: int = 10,
                                 rng: np.random.Generator | None = None,
                                 seed: int | None = None) -> OptResult:
    """Best feasible result over independently seeded restarts.

    Restart i draws its start from a child stream derived by index, so
    the outcome does not depend on evaluation order and any single
    restart can be reproduced in isolation.  c_star is absent only when
    every restart came back infeasible.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    if (rng is None) == (seed is None):
        raise ValueError("pass exactly one of rng or seed")
    base = spawn_key(rng) if rng is not None else seed
    best: OptResult | None = None
    for i in range(n_restarts):
        child = rng_from(base, "restart", i)
        res = optimize_location(problem, cfg, rng=child)
        if best is None or (res.feasible and
                            (not best.feasible or res.objective < best.objective)):
            best = res
    best.restarts_used = n_restarts
    return best


def write_trace_csv(path, result: OptResult) -> None:
    """One row per iteration: iteration, rho, lambda, objective, clamped_count."""
    with open(path, "w", newline="\n") as fh:
        fh.write("iteration,rho,lambda,objective,clamped_count\n")
        for row in result.trace:
            fh.write(f"{row.iteration},{row.rho!r},{row.lam!r},"
                     f"{row.objective!r},{row.clamped_count}\n")
