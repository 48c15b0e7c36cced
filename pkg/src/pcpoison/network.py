"""Miniature max-pooling point-set classifier, in plain numpy.

Each point passes independently through a shared stack of affine+ReLU
layers; the per-point features are pooled by a coordinatewise max over
points (which makes the network permutation invariant and defines the
"critical points" -- the points that win at least one pooled feature);
an affine head maps the pooled vector to class logits.

Gradients are computed by hand.  Through the pooling layer the gradient
of each pooled feature flows only to the point that attained the max
(ties break to the lowest storage index, so everything is deterministic).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .core import Dataset, PointCloud, as_points, subsample_indices
from .seeds import rng_from

__all__ = [
    "PointSetModel", "TrainConfig",
    "init_model", "forward", "posterior", "log_posterior", "classify",
    "classify_many", "train", "input_grad_log_posterior", "critical_points",
    "save_model", "load_model",
    "NumericOverflowError", "TrainingDivergedError", "CheckpointError",
]

DEFAULT_POINT_WIDTHS = (3, 32, 64, 128)
DEFAULT_HEAD_HIDDEN = (64,)


class NumericOverflowError(ArithmeticError):
    """Forward pass produced non-finite activations."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class CheckpointError(ValueError):
    """Model checkpoint is malformed, truncated, or version-mismatched."""


@dataclass
class PointSetModel:
    """Parameters of the classifier.

    ``point_layers`` and ``head_layers`` are lists of (W, b) with W of
    shape (out, in).  Every point layer is followed by ReLU; head layers
    are ReLU-separated with bare logits at the end.
    """

    point_layers: list[tuple[np.ndarray, np.ndarray]]
    head_layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def n_classes(self) -> int:
        return self.head_layers[-1][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.point_layers[-1][0].shape[0]

    def copy(self) -> "PointSetModel":
        return PointSetModel(
            [(W.copy(), b.copy()) for W, b in self.point_layers],
            [(W.copy(), b.copy()) for W, b in self.head_layers],
        )

    def widths(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        pw = (self.point_layers[0][0].shape[1],) + tuple(W.shape[0] for W, _ in self.point_layers)
        hw = (self.head_layers[0][0].shape[1],) + tuple(W.shape[0] for W, _ in self.head_layers)
        return pw, hw


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 16
    learning_rate: float = 1e-2
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 30
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.lr_decay_every) < 1:
            raise ValueError("epochs, batch_size, lr_decay_every must be >= 1")
        if self.learning_rate < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("learning_rate must be >= 0 and lr_decay_factor in (0, 1]")


def init_model(
    n_classes: int,
    point_widths: tuple[int, ...] = DEFAULT_POINT_WIDTHS,
    head_hidden: tuple[int, ...] = DEFAULT_HEAD_HIDDEN,
    seed: int = 0,
) -> PointSetModel:
    """Glorot-uniform weights, zero biases, fully determined by the seed."""
    rng = rng_from(seed, "model-init")
    head_widths = (point_widths[-1],) + tuple(head_hidden) + (n_classes,)

    def make(widths):
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-s, s, (fan_out, fan_in)), np.zeros(fan_out)))
        return layers

    return PointSetModel(make(point_widths), make(head_widths))


# ---------------------------------------------------------------------------
# forward / backward primitives (shared by the public ops and the trainer)

def _point_stack_forward(model: PointSetModel, pts: np.ndarray):
    """Per-point MLP on an (m, 3) array.  Returns pre-activations and activations."""
    zs, acts = [], [pts]
    a = pts
    for W, b in model.point_layers:
        z = a @ W.T + b
        a = np.maximum(z, 0.0)
        zs.append(z)
        acts.append(a)
    return zs, acts


def _point_stack_backward(model: PointSetModel, zs, acts, dfeat: np.ndarray,
                          grads: list | None = None) -> np.ndarray:
    """Backprop dfeat (m, F) through the per-point stack; returns d(points).

    When ``grads`` is given, parameter gradients are accumulated into it
    (list parallel to model.point_layers of [dW, db]).
    """
    da = dfeat
    for i in range(len(model.point_layers) - 1, -1, -1):
        W, _ = model.point_layers[i]
        dz = da * (zs[i] > 0.0)
        if grads is not None:
            grads[i][0] += dz.T @ acts[i]
            grads[i][1] += dz.sum(axis=0)
        da = dz @ W
    return da


def _head_forward(model: PointSetModel, pooled: np.ndarray):
    """Head on pooled features; works on (F,) or batched (B, F)."""
    zs, acts = [], [pooled]
    h = pooled
    last = len(model.head_layers) - 1
    for i, (W, b) in enumerate(model.head_layers):
        z = h @ W.T + b
        h = z if i == last else np.maximum(z, 0.0)
        zs.append(z)
        acts.append(h)
    return zs, acts


def _head_backward(model: PointSetModel, zs, acts, dlogits: np.ndarray,
                   grads: list | None = None) -> np.ndarray:
    """Backprop dlogits through the head; returns d(pooled)."""
    batched = dlogits.ndim == 2
    dz = dlogits
    for i in range(len(model.head_layers) - 1, -1, -1):
        W, _ = model.head_layers[i]
        if grads is not None:
            if batched:
                grads[i][0] += dz.T @ acts[i]
                grads[i][1] += dz.sum(axis=0)
            else:
                grads[i][0] += np.outer(dz, acts[i])
                grads[i][1] += dz
        da = dz @ W
        if i > 0:
            dz = da * (zs[i - 1] > 0.0)
    return da


def _forward_cloud(model: PointSetModel, pts: np.ndarray):
    zs, acts = _point_stack_forward(model, pts)
    feats = acts[-1]
    pooled = feats.max(axis=0)
    pool_argmax = feats.argmax(axis=0)
    hzs, hacts = _head_forward(model, pooled)
    logits = hacts[-1]
    if not np.all(np.isfinite(logits)):
        raise NumericOverflowError("non-finite logits")
    return logits, pool_argmax, (zs, acts, pooled, hzs, hacts)


def forward(model: PointSetModel, cloud) -> tuple[np.ndarray, np.ndarray]:
    """Class logits and, per pooled feature, the index of the winning point."""
    logits, pool_argmax, _ = _forward_cloud(model, as_points(cloud))
    return logits, pool_argmax


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def posterior(model: PointSetModel, cloud) -> np.ndarray:
    """Softmax class probabilities (max-subtracted for stability)."""
    logits, _ = forward(model, cloud)
    return _softmax(logits)


def log_posterior(model: PointSetModel, cloud) -> np.ndarray:
    logits, _ = forward(model, cloud)
    return _log_softmax(logits)


def classify(model: PointSetModel, cloud) -> int:
    logits, _ = forward(model, cloud)
    return int(np.argmax(logits))


def classify_many(model: PointSetModel, clouds, chunk: int = 64) -> np.ndarray:
    """Predicted class per cloud; equal-sized chunks share stacked matmuls."""
    pts_list = [as_points(c) for c in clouds]
    out = np.empty(len(pts_list), dtype=np.intp)
    i = 0
    while i < len(pts_list):
        j = min(i + chunk, len(pts_list))
        sizes = {p.shape[0] for p in pts_list[i:j]}
        if len(sizes) == 1:
            m = sizes.pop()
            X = np.stack(pts_list[i:j]).reshape((j - i) * m, 3)
            _, acts = _point_stack_forward(model, X)
            pooled = acts[-1].reshape(j - i, m, -1).max(axis=1)
            _, hacts = _head_forward(model, pooled)
            logits = hacts[-1]
            if not np.all(np.isfinite(logits)):
                raise NumericOverflowError("non-finite logits")
            out[i:j] = logits.argmax(axis=1)
        else:
            for k in range(i, j):
                out[k] = classify(model, pts_list[k])
        i = j
    return out


def critical_points(model: PointSetModel, cloud) -> np.ndarray:
    """Sorted distinct indices of points selected by the max pooling."""
    _, pool_argmax = forward(model, cloud)
    return np.unique(pool_argmax)


def input_grad_log_posterior(model: PointSetModel, cloud, t: int,
                             subset: np.ndarray | list | None = None) -> np.ndarray:
    """d log p(t | cloud) / d coordinates for the listed point indices.

    Gradient reaches a point only through the pooled features it wins;
    all other points get an exact zero.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    subset = np.arange(n) if subset is None else np.asarray(subset, dtype=np.intp)
    if subset.size and (subset.min() < 0 or subset.max() >= n):
        raise ValueError("subset indices out of range")
    logits, pool_argmax, (zs, acts, pooled, hzs, hacts) = _forward_cloud(model, pts)
    dlogits = -_softmax(logits)
    dlogits[t] += 1.0
    dpooled = _head_backward(model, hzs, hacts, dlogits)
    dfeat = np.zeros_like(acts[-1])
    dfeat[pool_argmax, np.arange(model.feature_dim)] = dpooled
    dpts = _point_stack_backward(model, zs, acts, dfeat)
    return dpts[subset]


# ---------------------------------------------------------------------------
# training

def _zero_grads(model: PointSetModel):
    pg = [[np.zeros_like(W), np.zeros_like(b)] for W, b in model.point_layers]
    hg = [[np.zeros_like(W), np.zeros_like(b)] for W, b in model.head_layers]
    return pg, hg


def _batch_loss_and_grads(model: PointSetModel, clouds: list[np.ndarray],
                          labels: np.ndarray, pg, hg) -> float:
    """Cross-entropy and parameter gradients, averaged over the batch.

    Equal-sized clouds take a stacked fast path; ragged batches fall back
    to a per-sample loop with identical math.
    """
    B = len(clouds)
    sizes = {c.shape[0] for c in clouds}
    if len(sizes) == 1:
        m = sizes.pop()
        X = np.stack(clouds).reshape(B * m, 3)
        zs, acts = _point_stack_forward(model, X)
        feats = acts[-1].reshape(B, m, -1)
        pooled = feats.max(axis=1)
        arg = feats.argmax(axis=1)
        hzs, hacts = _head_forward(model, pooled)
        logits = hacts[-1]
        logp = _log_softmax(logits)
        loss = float(-logp[np.arange(B), labels].mean())
        dlogits = _softmax(logits)
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        dpooled = _head_backward(model, hzs, hacts, dlogits, grads=hg)
        F = model.feature_dim
        dfeat = np.zeros_like(feats)
        bidx = np.repeat(np.arange(B)[:, None], F, axis=1)
        fidx = np.tile(np.arange(F), (B, 1))
        dfeat[bidx, arg, fidx] = dpooled
        _point_stack_backward(model, zs, acts, dfeat.reshape(B * m, F), grads=pg)
        return loss
    loss = 0.0
    for pts, label in zip(clouds, labels):
        zs, acts = _point_stack_forward(model, pts)
        pooled = acts[-1].max(axis=0)
        arg = acts[-1].argmax(axis=0)
        hzs, hacts = _head_forward(model, pooled)
        logp = _log_softmax(hacts[-1])
        loss += float(-logp[label])
        dlogits = _softmax(hacts[-1])
        dlogits[label] -= 1.0
        dlogits /= B
        dpooled = _head_backward(model, hzs, hacts, dlogits, grads=hg)
        dfeat = np.zeros_like(acts[-1])
        dfeat[arg, np.arange(model.feature_dim)] = dpooled
        _point_stack_backward(model, zs, acts, dfeat, grads=pg)
    return loss / B


def train(model: PointSetModel, dataset: Dataset, cfg: TrainConfig,
          augment_m: int | None = None) -> tuple[PointSetModel, list[float]]:
    """Mini-batch SGD on cross-entropy; returns the model and epoch-mean losses.

    ``augment_m`` enables the training-time preprocessing that randomly
    subsamples every cloud to m points, fresh per epoch.  The model is
    updated in place and also returned.  Fully deterministic given
    cfg.seed.
    """
    N = len(dataset.samples)
    if N == 0:
        raise ValueError("dataset is empty")
    if cfg.batch_size > N:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {N}")
    rng = rng_from(cfg.seed, "sgd")
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(N)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, N, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            clouds = []
            for i in batch:
                pts = dataset.samples[i].cloud.points
                if augment_m is not None and augment_m < pts.shape[0]:
                    pts = pts[subsample_indices(pts.shape[0], augment_m, rng)]
                clouds.append(pts)
            labels = np.array([dataset.samples[i].label for i in batch])
            pg, hg = _zero_grads(model)
            loss = _batch_loss_and_grads(model, clouds, labels, pg, hg)
            epoch_loss += loss
            n_batches += 1
            if lr != 0.0:
                for (W, b), (dW, db) in zip(model.point_layers, pg):
                    W -= lr * dW
                    b -= lr * db
                for (W, b), (dW, db) in zip(model.head_layers, hg):
                    W -= lr * dW
                    b -= lr * db
        mean_loss = epoch_loss / n_batches
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(epoch)
        trace.append(mean_loss)
    return model, trace


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, widths, float64-LE parameters, sha256

_MAGIC = b"PSETMDL\x00"
_VERSION = 1


def save_model(path, model: PointSetModel) -> None:
    pw, hw = model.widths()
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<I", _VERSION)
    header += struct.pack("<I", len(pw)) + struct.pack(f"<{len(pw)}I", *pw)
    header += struct.pack("<I", len(hw)) + struct.pack(f"<{len(hw)}I", *hw)
    blob = bytearray(header)
    for W, b in model.point_layers + model.head_layers:
        blob += W.astype("<f8").tobytes()
        blob += b.astype("<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> PointSetModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 4 + 32 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    def read_widths(off):
        (k,) = struct.unpack_from("<I", body, off)
        widths = struct.unpack_from(f"<{k}I", body, off + 4)
        return list(widths), off + 4 + 4 * k

    pw, off = read_widths(off)
    hw, off = read_widths(off)

    def read_layers(widths, off):
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            W = np.frombuffer(body, "<f8", fan_out * fan_in, off).reshape(fan_out, fan_in).copy()
            off += 8 * fan_out * fan_in
            b = np.frombuffer(body, "<f8", fan_out, off).copy()
            off += 8 * fan_out
            layers.append((W, b))
        return layers, off

    point_layers, off = read_layers(pw, off)
    head_layers, off = read_layers(hw, off)
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return PointSetModel(point_layers, head_layers)
