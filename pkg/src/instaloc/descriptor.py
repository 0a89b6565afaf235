"""Fixed-length instance descriptors.

Two engines share one interface (``describe(instances) -> (M, D) array``):

* ``GeometricEngine``: covariance-eigenvalue shape statistics, rigid-motion
  invariant, no training.
* ``LearnedEngine``: a shared per-point network, average pooling over the
  instance, and a small fully connected head, trained with a margin triplet
  loss. Forward and backward passes are plain numpy.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rot_z
from .labels import NUM_CLASSES

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_DIM = 16


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# handcrafted baseline

def geometric_descriptor(instance, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Eigenvalue shape features of an instance, zero-padded to ``dim``.

    Layout: normalised eigenvalues (3, descending), linearity, planarity,
    sphericity, extents along the principal axes (3, descending, metres),
    log10 point count / 5, class index / 12.
    """
    pts = np.asarray(instance.points, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    cov = centred.T @ centred / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = evecs[:, ::-1]
    total = evals.sum()
    feats = np.zeros(max(dim, 11))
    if total > 0:
        l1, l2, l3 = evals
        feats[0:3] = evals / total
        feats[3] = (l1 - l2) / l1
        feats[4] = (l2 - l3) / l1
        # rank < 2 covariance: sphericity is meaningless, keep it at zero
        feats[5] = l3 / l1 if l2 > 1e-12 * l1 else 0.0
        proj = centred @ evecs
        feats[6:9] = np.sort(proj.max(axis=0) - proj.min(axis=0))[::-1]
    feats[9] = math.log10(len(pts)) / 5.0
    feats[10] = instance.semantic / (NUM_CLASSES - 1)
    return feats[:dim]


class GeometricEngine:
    name = "geometric"

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 11:
            raise ValueError("geometric descriptor needs at least 11 dimensions")
        self.dim = dim

    def describe(self, instances) -> np.ndarray:
        if not instances:
            return np.zeros((0, self.dim))
        return np.stack([geometric_descriptor(i, self.dim) for i in instances])

    def to_dict(self) -> dict:
        return {"engine": self.name, "dim": self.dim}


# --------------------------------------------------------------------------
# learned embedding

@dataclass
class EmbeddingModel:
    """Per-point affine+ReLU stack, mean pooling, then a fully connected head.

    ``point_layers`` and ``head_layers`` hold ``(W, b)`` pairs with ``W`` of
    shape (in, out). ReLU follows every layer except the last head layer; the
    input to the last head layer is dropped out at train time.
    """

    point_layers: list
    head_layers: list
    dropout: float = 0.1

    def __post_init__(self):
        dims_in = 3 + NUM_CLASSES
        for W, b in self.point_layers + self.head_layers:
            if W.shape[0] != dims_in or b.shape != (W.shape[1],):
                raise ValueError("layer shapes do not chain")
            dims_in = W.shape[1]
        if not self.head_layers:
            raise ValueError("model needs at least one head layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def dim(self) -> int:
        return self.head_layers[-1][0].shape[1]

    @classmethod
    def create(cls, seed: int = 0, point_widths=(16, 32, 64), head_widths=(32,),
               dim: int = DEFAULT_DIM, dropout: float = 0.1) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)

        def layer(n_in, n_out):
            return rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out)), np.zeros(n_out)

        widths = [3 + NUM_CLASSES, *point_widths]
        points = [layer(a, b) for a, b in zip(widths[:-1], widths[1:])]
        head_w = [widths[-1], *head_widths, dim]
        head = [layer(a, b) for a, b in zip(head_w[:-1], head_w[1:])]
        return cls(points, head, dropout)

    def params(self) -> list:
        out = []
        for W, b in self.point_layers + self.head_layers:
            out += [W, b]
        return out

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel([(W.copy(), b.copy()) for W, b in self.point_layers],
                              [(W.copy(), b.copy()) for W, b in self.head_layers], self.dropout)

    def to_dict(self) -> dict:
        layers = []
        for stage, group in (("point", self.point_layers), ("head", self.head_layers)):
            for W, b in group:
                layers.append({"stage": stage, "shape": list(W.shape),
                               "weights": W.ravel().tolist(), "bias": b.tolist()})
        return {"format": "instaloc-embedding", "version": MODEL_FORMAT_VERSION,
                "descriptor_dim": self.dim, "nonlinearity": "relu", "pooling": "mean",
                "dropout": self.dropout, "num_classes": NUM_CLASSES, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingModel":
        if d.get("format") != "instaloc-embedding":
            raise ValueError("not an embedding model file")
        if d.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('version')!r}")
        if d.get("nonlinearity") != "relu" or d.get("num_classes") != NUM_CLASSES:
            raise ValueError("model nonlinearity or class count not supported")
        point, head = [], []
        for layer in d["layers"]:
            W = np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"])
            b = np.array(layer["bias"], dtype=np.float64)
            (point if layer["stage"] == "point" else head).append((W, b))
        model = cls(point, head, float(d["dropout"]))
        if model.dim != d["descriptor_dim"]:
            raise ValueError("descriptor_dim does not match the final layer")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize_instance(instance, rng: np.random.Generator | None = None) -> np.ndarray:
    """Centre an instance on its centroid; with ``rng``, also apply a random yaw."""
    pts = np.asarray(instance.points, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    if rng is not None:
        centred = centred @ rot_z(rng.uniform(-math.pi, math.pi)).T
    return centred


def point_features(centred: np.ndarray, semantic: int) -> np.ndarray:
    feats = np.zeros((len(centred), 3 + NUM_CLASSES))
    feats[:, :3] = centred
    feats[:, 3 + int(semantic)] = 1.0
    return feats


@dataclass
class _Cache:
    starts: np.ndarray
    counts: np.ndarray
    seg: np.ndarray
    point_in: list = field(default_factory=list)
    point_pre: list = field(default_factory=list)
    head_in: list = field(default_factory=list)
    head_pre: list = field(default_factory=list)
    mask: np.ndarray | None = None


def _forward(model: EmbeddingModel, feats: np.ndarray, counts: np.ndarray, mask=None):
    """Batched forward pass over instances stored back to back in ``feats``."""
    counts = np.asarray(counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cache = _Cache(starts, counts, np.repeat(np.arange(len(counts)), counts), mask=mask)
    h = feats
    for W, b in model.point_layers:
        cache.point_in.append(h)
        z = h @ W + b
        cache.point_pre.append(z)
        h = np.maximum(z, 0.0)
    g = np.add.reduceat(h, starts, axis=0) / counts[:, None]
    n_head = len(model.head_layers)
    for k, (W, b) in enumerate(model.head_layers):
        if k == n_head - 1 and mask is not None:
            g = g * mask
        cache.head_in.append(g)
        z = g @ W + b
        cache.head_pre.append(z)
        g = z if k == n_head - 1 else np.maximum(z, 0.0)
    return g, cache


def _backward(model: EmbeddingModel, cache: _Cache, grad_out: np.ndarray) -> list:
    """Gradients matching ``model.params()`` order."""
    n_head = len(model.head_layers)
    head_grads = [None] * n_head
    g = grad_out
    for k in range(n_head - 1, -1, -1):
        W, _ = model.head_layers[k]
        if k < n_head - 1:
            g = g * (cache.head_pre[k] > 0)
        head_grads[k] = (cache.head_in[k].T @ g, g.sum(axis=0))
        g = g @ W.T
        if k == n_head - 1 and cache.mask is not None:
            g = g * cache.mask
    # mean pooling spreads each instance gradient evenly over its points
    h_grad = (g / cache.counts[:, None])[cache.seg]
    point_grads = [None] * len(model.point_layers)
    for k in range(len(model.point_layers) - 1, -1, -1):
        W, _ = model.point_layers[k]
        h_grad = h_grad * (cache.point_pre[k] > 0)
        point_grads[k] = (cache.point_in[k].T @ h_grad, h_grad.sum(axis=0))
        if k > 0:
            h_grad = h_grad @ W.T
    out = []
    for dW, db in point_grads + head_grads:
        out += [dW, db]
    return out


def _stack_instances(point_sets, semantics):
    feats = np.concatenate([point_features(p, s) for p, s in zip(point_sets, semantics)])
    return feats, np.array([len(p) for p in point_sets])


def embed_batch(model: EmbeddingModel, instances, chunk_points: int = 200_000) -> np.ndarray:
    """Descriptors for many instances (inference, no dropout).

    Instances are pushed through the network in chunks of about
    ``chunk_points`` points to bound memory; results do not depend on it.
    """
    if not instances:
        return np.zeros((0, model.dim))
    out, start, total = [], 0, 0
    for k, inst in enumerate(instances):
        total += len(inst)
        if total >= chunk_points or k == len(instances) - 1:
            part = instances[start:k + 1]
            feats, counts = _stack_instances([normalize_instance(i) for i in part],
                                             [i.semantic for i in part])
            out.append(_forward(model, feats, counts)[0])
            start, total = k + 1, 0
    return np.concatenate(out)


def embed(model: EmbeddingModel, instance) -> np.ndarray:
    return embed_batch(model, [instance])[0]


class LearnedEngine:
    name = "learned"

    def __init__(self, model: EmbeddingModel):
        self.model = model
        self.dim = model.dim

    def describe(self, instances) -> np.ndarray:
        return embed_batch(self.model, list(instances))

    def to_dict(self) -> dict:
        blob = json.dumps(self.model.to_dict(), sort_keys=True).encode()
        return {"engine": self.name, "dim": self.dim,
                "fingerprint": hashlib.sha256(blob).hexdigest()[:16]}


# --------------------------------------------------------------------------
# loss and training

def triplet_loss(a, p, n, margin: float = 1.0) -> float:
    """Hinge on the gap between anchor-positive and anchor-negative distances.

    Accepts single descriptors or (B, D) batches; batches return the mean.
    """
    a, p, n = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise ValueError("descriptor dimensions differ")
    d_ap = np.linalg.norm(a - p, axis=1)
    d_an = np.linalg.norm(a - n, axis=1)
    return float(np.mean(np.maximum(d_ap - d_an + margin, 0.0)))


def _triplet_loss_grad(A, P, N, margin):
    diff_p, diff_n = A - P, A - N
    d_ap = np.linalg.norm(diff_p, axis=1)
    d_an = np.linalg.norm(diff_n, axis=1)
    hinge = d_ap - d_an + margin
    active = (hinge > 0).astype(np.float64)[:, None] / len(A)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_p = np.where(d_ap[:, None] > 0, diff_p / d_ap[:, None], 0.0)
        u_n = np.where(d_an[:, None] > 0, diff_n / d_an[:, None], 0.0)
    loss = float(np.mean(np.maximum(hinge, 0.0)))
    return loss, active * (u_p - u_n), -active * u_p, active * u_n


def triplet_loss_and_grads(model: EmbeddingModel, point_sets, semantics, margin=1.0, mask=None):
    """Mean triplet loss of a batch and its parameter gradients.

    ``point_sets``/``semantics`` list all anchors, then all positives, then all
    negatives. ``mask`` optionally fixes the dropout mask (shape (3B, width)).
    """
    feats, counts = _stack_instances(point_sets, semantics)
    out, cache = _forward(model, feats, counts, mask)
    B = len(point_sets) // 3
    loss, gA, gP, gN = _triplet_loss_grad(out[:B], out[B:2 * B], out[2 * B:], margin)
    return loss, _backward(model, cache, np.concatenate([gA, gP, gN]))


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 64
    point_dropout: float = 0.2
    jitter: float = 0.01
    max_points: int | None = 256  # per-instance subsample during training only
    monitor_size: int = 256  # triplets used for the per-epoch loss history
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.margin > 0 or not self.learning_rate >= 0:
            raise ValueError("margin must be positive and learning rate non-negative")
        if self.epochs < 0 or self.batch_size < 1 or not 0 <= self.point_dropout < 1:
            raise ValueError("invalid epoch, batch or dropout settings")


def _augment(instance, rng, cfg: TrainConfig) -> np.ndarray:
    pts = np.asarray(instance.points, dtype=np.float64)
    n = len(pts)
    keep = max(3, int(round(n * (1.0 - cfg.point_dropout))))
    if cfg.max_points is not None:
        keep = min(keep, cfg.max_points)
    keep = min(keep, n)
    pts = pts[np.sort(rng.choice(n, size=keep, replace=False))]
    centred = pts - pts.mean(axis=0)
    centred = centred @ rot_z(rng.uniform(-math.pi, math.pi)).T
    if cfg.jitter > 0:
        centred = centred + rng.normal(0.0, cfg.jitter, size=centred.shape)
    return centred


def _monitor_loss(model, triplets, margin):
    if not triplets:
        return 0.0
    inst = [t.anchor for t in triplets] + [t.positive for t in triplets] + \
        [t.negative for t in triplets]
    out = embed_batch(model, inst)
    B = len(triplets)
    return triplet_loss(out[:B], out[B:2 * B], out[2 * B:], margin)


@dataclass
class TrainResult:
    model: EmbeddingModel
    loss_history: list  # inference-mode loss on the monitor set, before and after each epoch
    batch_losses: list  # augmented training loss per epoch (mean over batches)


def train(model: EmbeddingModel, triplets, cfg: TrainConfig | None = None) -> TrainResult:
    """Minimise the mean triplet loss with Adam; the input model is not modified."""
    cfg = cfg or TrainConfig()
    if not triplets:
        raise ValueError("training needs at least one triplet")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    monitor_idx = np.sort(rng.permutation(len(triplets))[:cfg.monitor_size])
    monitor = [triplets[i] for i in monitor_idx]
    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    history = [_monitor_loss(model, monitor, cfg.margin)]
    batch_losses = []
    step = 0
    head_width = model.head_layers[-1][0].shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [triplets[i] for i in order[start:start + cfg.batch_size]]
            insts = [t.anchor for t in batch] + [t.positive for t in batch] + \
                [t.negative for t in batch]
            point_sets = [_augment(i, rng, cfg) for i in insts]
            mask = None
            if model.dropout > 0:
                mask = (rng.random((len(insts), head_width)) >= model.dropout) / (1.0 - model.dropout)
            loss, grads = triplet_loss_and_grads(model, point_sets, [i.semantic for i in insts],
                                                 cfg.margin, mask)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, step {step}")
            step += 1
            for k, (p, g) in enumerate(zip(params, grads)):
                m1[k] = cfg.beta1 * m1[k] + (1 - cfg.beta1) * g
                m2[k] = cfg.beta2 * m2[k] + (1 - cfg.beta2) * g * g
                m_hat = m1[k] / (1 - cfg.beta1 ** step)
                v_hat = m2[k] / (1 - cfg.beta2 ** step)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            epoch_losses.append(loss)
        batch_losses.append(float(np.mean(epoch_losses)))
        history.append(_monitor_loss(model, monitor, cfg.margin))
        log.info("epoch %d: train loss %.4f, monitor loss %.4f", epoch, batch_losses[-1], history[-1])
    return TrainResult(model, history, batch_losses)


# --------------------------------------------------------------------------
# evaluation

def triplet_distances(engine, triplets):
    """Anchor-positive and anchor-negative descriptor distances."""
    B = len(triplets)
    desc = engine.describe([t.anchor for t in triplets] + [t.positive for t in triplets]
                           + [t.negative for t in triplets])
    a, p, n = desc[:B], desc[B:2 * B], desc[2 * B:]
    return np.linalg.norm(a - p, axis=1), np.linalg.norm(a - n, axis=1)


def pr_curve_from_distances(pos, neg, thresholds=None):
    """(threshold, precision, recall) rows; a pair is accepted when distance <= threshold.

    With nothing accepted, precision is reported as 1.0.
    """
    pos, neg = np.sort(np.asarray(pos, float)), np.sort(np.asarray(neg, float))
    if thresholds is None:
        thresholds = np.unique(np.concatenate([[0.0], pos, neg, [np.inf]]))
    rows = []
    for t in thresholds:
        tp = int(np.searchsorted(pos, t, side="right"))
        fp = int(np.searchsorted(neg, t, side="right"))
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / len(pos) if len(pos) else 0.0
        rows.append((float(t), precision, recall))
    return rows


def descriptor_pr_curve(engine, triplets, thresholds=None):
    if not triplets:
        raise ValueError("need at least one test triplet")
    pos, neg = triplet_distances(engine, triplets)
    return pr_curve_from_distances(pos, neg, thresholds)


def best_f1_threshold(curve) -> tuple:
    """Row of a PR curve with the highest F1 score."""
    def f1(row):
        _, p, r = row
        return 2 * p * r / (p + r) if p + r else 0.0
    return max(curve, key=f1)


def load_engine(model_path=None, dim: int = DEFAULT_DIM):
    """Learned engine from a model file, or the geometric engine when no path is given."""
    if model_path is None or str(model_path) == "geometric":
        return GeometricEngine(dim)
    return LearnedEngine(EmbeddingModel.load(model_path))
