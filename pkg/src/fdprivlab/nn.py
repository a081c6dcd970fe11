"""Dense classifiers trained with plain SGD or DP-SGD, in numpy.

Weights are stored as ``(in, out)`` matrices so a batch ``x`` of shape
``(B, in)`` maps to ``x @ W + b``. All routines also accept parameters with
one extra leading "stack" axis, ``(K, in, out)``, with inputs ``(K, B, in)``;
this lets many small models of identical shape train in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ShapeError, TrainingError, ValidationError
from .rng import gaussian, stream

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    DISTILL_MAE = "distill_mae"
    DISTILL_KL = "distill_kl"


@dataclass(frozen=True)
class DPConfig:
    """Per-example clipping bound ``C`` and Gaussian noise multiplier ``sigma``.

    ``clip_bound=math.inf`` disables clipping; it is only allowed together
    with ``noise_multiplier=0``.
    """

    clip_bound: float = 10.0
    noise_multiplier: float = 0.0

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValidationError(f"clip_bound must be > 0, got {self.clip_bound}")
        if self.noise_multiplier < 0:
            raise ValidationError("noise_multiplier must be non-negative")
        if math.isinf(self.clip_bound) and self.noise_multiplier > 0:
            raise ValidationError("infinite clip_bound needs noise_multiplier == 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    epochs: int = 1
    batch_size: int = 32
    dp: DPConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


@dataclass
class ModelParams:
    """Weights of an MLP: hidden layers use ``activation``, the last is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    _dims: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix")
        dims = [self.weights[0].shape[-2]]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[-2] != dims[-1]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[-2]} inputs, previous layer gives {dims[-1]}"
                )
            if b.shape[-1] != w.shape[-1] or w.shape[:-2] != b.shape[:-1]:
                raise ShapeError(f"layer {i} bias shape {b.shape} does not match {w.shape}")
            dims.append(w.shape[-1])
        self._dims = dims

    @property
    def layer_dims(self) -> list[int]:
        return list(self._dims)

    @property
    def num_classes(self) -> int:
        return self._dims[-1]

    @property
    def stack_shape(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def unstack(self, k: int) -> "ModelParams":
        """Select model ``k`` from a stacked set."""
        return ModelParams(
            [w[k].copy() for w in self.weights], [b[k].copy() for b in self.biases], self.activation
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases))


def _relu(h):
    return np.maximum(h, 0.0)


def _relu_grad(h):
    return (h > 0).astype(h.dtype)


def _tanh_grad(h):
    t = np.tanh(h)
    return 1.0 - t * t


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


def init_mlp(
    layer_dims: Sequence[int],
    seed: int = 0,
    activation: str = "relu",
    stack: int | None = None,
) -> ModelParams:
    """He-normal (relu) or Xavier-normal (tanh) initialisation, zero biases.

    ``stack`` builds that many independently initialised models along a
    leading axis.
    """
    if len(layer_dims) < 2:
        raise ShapeError("an MLP needs at least input and output widths")
    rng = stream(seed, "init")
    lead = () if stack is None else (int(stack),)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        last = i == len(layer_dims) - 2
        if activation == "relu" and not last:
            scale = math.sqrt(2.0 / fan_in)
        else:
            scale = math.sqrt(2.0 / (fan_in + fan_out))
        weights.append(gaussian(rng, lead + (fan_in, fan_out), scale=scale))
        biases.append(np.zeros(lead + (fan_out,)))
    return ModelParams(weights, biases, activation)


def _forward_cache(params: ModelParams, x: np.ndarray):
    act, _ = _ACTIVATIONS[params.activation]
    inputs, pre = [], []
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        h = a @ w + b[..., None, :]
        if i < last:
            pre.append(h)
            a = act(h)
        else:
            a = h
    return a, (inputs, pre)


def forward(params: ModelParams, x) -> np.ndarray:
    """Raw logits for one feature vector ``(d,)`` or a batch ``(B, d)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.layer_dims[0]:
        raise ShapeError(f"input has {x.shape[-1]} features, model expects {params.layer_dims[0]}")
    single = x.ndim == 1
    logits, _ = _forward_cache(params, x[None, :] if single else x)
    return logits[0] if single else logits


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def predict_proba(params: ModelParams, x) -> np.ndarray:
    return softmax(forward(params, x))


def accuracy(params: ModelParams, x, y) -> float:
    return float(np.mean(np.argmax(forward(params, x), axis=-1) == np.asarray(y)))


def check_simplex(p: np.ndarray, what: str = "soft label") -> None:
    p = np.asarray(p, dtype=float)
    if (p < -SIMPLEX_TOL).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=SIMPLEX_TOL, rtol=0):
        raise ValidationError(f"{what} is not on the probability simplex")


def _loss_terms(kind: LossKind, logits: np.ndarray, target: np.ndarray):
    """Per-example loss and its gradient with respect to the logits."""
    q = softmax(logits)
    if kind is LossKind.CROSS_ENTROPY:
        y = np.asarray(target, dtype=np.int64)
        logp = log_softmax(logits)
        losses = -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]
        grad = q.copy()
        np.put_along_axis(grad, y[..., None], np.take_along_axis(grad, y[..., None], -1) - 1.0, -1)
        return losses, grad
    zt = np.asarray(target, dtype=float)
    if kind is LossKind.DISTILL_KL:
        ratio = np.log(np.maximum(zt, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))
        losses = np.where(zt > 0, zt * ratio, 0.0).sum(axis=-1)
        return losses, q - zt
    if kind is LossKind.DISTILL_MAE:
        m = logits.shape[-1]
        diff = q - zt
        losses = np.abs(diff).mean(axis=-1)
        g = np.sign(diff) / m
        grad = q * (g - (g * q).sum(axis=-1, keepdims=True))
        return losses, grad
    raise ValidationError(f"unknown loss {kind!r}")


def _validate_target(kind: LossKind, target, num_classes: int):
    if kind is LossKind.CROSS_ENTROPY:
        y = np.asarray(target)
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValidationError("label index out of range")
        return
    t = np.asarray(target, dtype=float)
    if t.shape[-1] != num_classes:
        raise ShapeError(f"soft label has length {t.shape[-1]}, expected {num_classes}")
    check_simplex(t)


def loss(kind, prediction, target, from_logits: bool = True) -> float:
    """Loss of one prediction (or the batch mean).

    ``prediction`` is a logit vector by default; pass ``from_logits=False`` to
    hand in probabilities directly. Cross-entropy takes a label index, the
    distillation losses take a soft label on the simplex.
    """
    kind = LossKind(kind)
    pred = np.asarray(prediction, dtype=float)
    _validate_target(kind, target, pred.shape[-1])
    if from_logits:
        losses, _ = _loss_terms(kind, pred, np.asarray(target))
        return float(np.mean(losses))
    check_simplex(pred, "prediction")
    q = np.maximum(pred, PROB_FLOOR)
    tgt = np.asarray(target)
    if kind is LossKind.CROSS_ENTROPY:
        vals = -np.log(np.take_along_axis(q, np.asarray(tgt, dtype=np.int64)[..., None], -1)[..., 0])
    elif kind is LossKind.DISTILL_KL:
        zt = tgt.astype(float)
        vals = np.where(zt > 0, zt * (np.log(np.maximum(zt, PROB_FLOOR)) - np.log(q)), 0.0).sum(-1)
    else:
        vals = np.abs(tgt.astype(float) - pred).mean(-1)
    return float(np.mean(vals))


def _backward_deltas(params: ModelParams, cache, dlogits):
    """Per-example deltas ``dL/dh`` for every layer, output layer last."""
    _, act_grad = _ACTIVATIONS[params.activation]
    inputs, pre = cache
    deltas = [None] * len(params.weights)
    delta = dlogits
    for i in range(len(params.weights) - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            delta = (delta @ np.swapaxes(params.weights[i], -1, -2)) * act_grad(pre[i - 1])
    return inputs, deltas


def gradients(params: ModelParams, x, target, kind) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean loss over the batch and its gradient for each ``(W, b)``."""
    kind = LossKind(kind)
    x = np.asarray(x, dtype=float)
    logits, cache = _forward_cache(params, x)
    losses, dz = _loss_terms(kind, logits, np.asarray(target))
    batch = x.shape[-2]
    inputs, deltas = _backward_deltas(params, cache, dz)
    grads = [(np.swapaxes(a, -1, -2) @ d / batch, d.sum(axis=-2) / batch)
             for a, d in zip(inputs, deltas)]
    return float(np.mean(losses)), grads


def _clip_scales(inputs, deltas, clip_bound: float) -> np.ndarray:
    # ||outer(a, d)||^2 == ||a||^2 * ||d||^2, so norms never need the outer products
    sq = sum((a * a).sum(-1) * (d * d).sum(-1) + (d * d).sum(-1) for a, d in zip(inputs, deltas))
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, clip_bound / np.maximum(norms, 1e-300))


def clipped_per_example_gradients(params: ModelParams, x, target, kind, clip_bound: float):
    """Materialised per-example gradients after L2 clipping (for inspection)."""
    kind = LossKind(kind)
    logits, cache = _forward_cache(params, np.asarray(x, dtype=float))
    _, dz = _loss_terms(kind, logits, np.asarray(target))
    inputs, deltas = _backward_deltas(params, cache, dz)
    scale = _clip_scales(inputs, deltas, clip_bound)
    return [
        (np.einsum("bi,bo->bio", a, d * scale[:, None]), d * scale[:, None])
        for a, d in zip(inputs, deltas)
    ]


def _step(params, grads, lr):
    for i, (gw, gb) in enumerate(grads):
        params.weights[i] -= lr * gw
        params.biases[i] -= lr * gb


def sgd_epoch(
    params: ModelParams,
    x,
    target,
    cfg: TrainConfig,
    kind=LossKind.CROSS_ENTROPY,
    epoch: int = 0,
) -> tuple[ModelParams, float]:
    """One shuffled pass of mini-batch SGD; returns new params and mean loss.

    The shuffle for epoch ``e`` comes from ``stream(cfg.seed, "shuffle", e)``
    and DP noise from a separate stream, so enabling DP with zero noise and no
    clipping reproduces the plain trajectory exactly.
    """
    kind = LossKind(kind)
    x = np.asarray(x, dtype=float)
    target = np.asarray(target)
    n = x.shape[0]
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    if cfg.batch_size > n:
        raise ValidationError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    _validate_target(kind, target, params.num_classes)
    out = params.copy()
    order = stream(cfg.seed, "shuffle", epoch).permutation(n)
    noise_rng = stream(cfg.seed, "dp-noise", epoch) if cfg.dp is not None else None
    total, seen = 0.0, 0
    for bi, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        xb = x[idx]
        logits, cache = _forward_cache(out, xb)
        losses, dz = _loss_terms(kind, logits, target[idx])
        batch_loss = float(losses.sum())
        if not math.isfinite(batch_loss):
            raise TrainingError(f"non-finite loss in batch {bi} of epoch {epoch}")
        total += batch_loss
        seen += len(idx)
        inputs, deltas = _backward_deltas(out, cache, dz)
        if cfg.dp is not None:
            scale = _clip_scales(inputs, deltas, cfg.dp.clip_bound)[:, None]
            deltas = [d * scale for d in deltas]
        grads = []
        for a, d in zip(inputs, deltas):
            gw, gb = a.T @ d, d.sum(axis=0)
            if cfg.dp is not None and cfg.dp.noise_multiplier > 0:
                std = cfg.dp.noise_multiplier * cfg.dp.clip_bound
                gw = gw + gaussian(noise_rng, gw.shape, scale=std)
                gb = gb + gaussian(noise_rng, gb.shape, scale=std)
            grads.append((gw / len(idx), gb / len(idx)))
        _step(out, grads, cfg.learning_rate)
    if not out.is_finite():
        raise TrainingError(f"parameters became non-finite in epoch {epoch}")
    return out, total / seen


def train(params: ModelParams, x, target, cfg: TrainConfig, kind=LossKind.CROSS_ENTROPY):
    """Run ``cfg.epochs`` epochs; returns ``(params, per-epoch mean losses)``."""
    history = []
    for epoch in range(cfg.epochs):
        params, mean_loss = sgd_epoch(params, x, target, cfg, kind, epoch)
        history.append(mean_loss)
    return params, history


def train_stacked(
    params: ModelParams,
    x: np.ndarray,
    target: np.ndarray,
    subsets: np.ndarray,
    cfg: TrainConfig,
    kind=LossKind.DISTILL_KL,
) -> ModelParams:
    """Train ``K`` stacked models, model ``k`` on rows ``subsets[k]`` of ``x``.

    Every model sees its own shuffle (stream ``(cfg.seed, "shuffle", epoch, k)``)
    and the same batch size. No DP support: this is a server-side tool.
    """
    kind = LossKind(kind)
    subsets = np.asarray(subsets)
    k_models, size = subsets.shape
    if params.stack_shape != (k_models,):
        raise ShapeError("parameter stack does not match the number of subsets")
    if cfg.batch_size > size:
        raise ValidationError(f"subset of size {size} is smaller than batch size {cfg.batch_size}")
    out = params.copy()
    rows = np.arange(k_models)[:, None]
    for epoch in range(cfg.epochs):
        orders = np.stack([stream(cfg.seed, "shuffle", epoch, k).permutation(size)
                           for k in range(k_models)])
        for bi, start in enumerate(range(0, size, cfg.batch_size)):
            idx = subsets[rows, orders[:, start:start + cfg.batch_size]]
            logits, cache = _forward_cache(out, x[idx])
            losses, dz = _loss_terms(kind, logits, target[idx])
            if not np.isfinite(losses).all():
                raise TrainingError(f"non-finite loss in batch {bi} of epoch {epoch}")
            inputs, deltas = _backward_deltas(out, cache, dz)
            b = idx.shape[1]
            grads = [(np.swapaxes(a, -1, -2) @ d / b, d.sum(axis=-2) / b)
                     for a, d in zip(inputs, deltas)]
            _step(out, grads, cfg.learning_rate)
    return out
