"""Device-side mini-batch SGD and server-side asynchronous aggregation.

Two loss models are shipped, both with hand-written gradients:

* :class:`QuadraticLoss` -- ``L(w, (x, y)) = 0.5 * ||w - x||^2``.  Its
  gradient is affine in ``w`` and in the data point, so smoothness and data
  variability constants are exactly one.
* :class:`LogisticLoss` -- multinomial logistic regression with a bias
  column, parameters flattened from a ``(features + 1, classes)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset


class LossModel:
    """Per-sample loss with its gradient.

    Subclasses implement the vectorised ``point_losses`` and ``point_grads``;
    ``mean_grad`` may be overridden by a cheaper closed form.
    """

    name = "loss"

    def dim(self, data: LabeledDataset) -> int:
        raise NotImplementedError

    def point_losses(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def point_grads(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean_grad(self, w, x, y) -> np.ndarray:
        return self.point_grads(w, x, y).mean(axis=0)

    def loss_fn(self, w, point) -> float:
        """Loss of a single ``(features, label)`` pair."""
        x, y = point
        return float(self.point_losses(w, np.atleast_2d(x), np.atleast_1d(y))[0])

    def grad_fn(self, w, point) -> np.ndarray:
        """Gradient of :meth:`loss_fn` with respect to ``w``."""
        x, y = point
        return self.point_grads(w, np.atleast_2d(x), np.atleast_1d(y))[0]

    def predict(self, w, x) -> np.ndarray:
        raise NotImplementedError


class QuadraticLoss(LossModel):
    """Half squared distance between the model and the feature vector."""

    name = "quadratic"

    def dim(self, data):
        return data.features.shape[1]

    def point_losses(self, w, x, y):
        return 0.5 * np.sum((w[None, :] - x) ** 2, axis=1)

    def point_grads(self, w, x, y):
        return w[None, :] - x

    def mean_grad(self, w, x, y):
        return w - x.mean(axis=0)

    def predict(self, w, x):
        return np.zeros(len(x), dtype=int)


class LogisticLoss(LossModel):
    """Softmax cross-entropy of a linear model with bias."""

    name = "logistic"

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)

    def dim(self, data):
        return (data.features.shape[1] + 1) * self.num_classes

    def _unpack(self, w, x):
        xb = np.hstack([x, np.ones((x.shape[0], 1))])
        return xb, w.reshape(xb.shape[1], self.num_classes)

    def _probs(self, w, x):
        xb, W = self._unpack(w, x)
        z = xb @ W
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        return xb, p, z

    def point_losses(self, w, x, y):
        _, p, z = self._probs(w, x)
        logz = np.log(np.exp(z).sum(axis=1))
        return logz - z[np.arange(len(y)), y]

    def point_grads(self, w, x, y):
        xb, p, _ = self._probs(w, x)
        p[np.arange(len(y)), y] -= 1.0
        return (xb[:, :, None] * p[:, None, :]).reshape(len(y), -1)

    def mean_grad(self, w, x, y):
        xb, p, _ = self._probs(w, x)
        p[np.arange(len(y)), y] -= 1.0
        return (xb.T @ p).reshape(-1) / len(y)

    def predict(self, w, x):
        xb, W = self._unpack(w, x)
        return np.argmax(xb @ W, axis=1)


def make_loss(name: str, num_classes: int = 2) -> LossModel:
    if name == "quadratic":
        return QuadraticLoss()
    if name == "logistic":
        return LogisticLoss(num_classes)
    raise ValueError(f"unknown loss model {name!r}")


@dataclass(frozen=True)
class ModelState:
    """Parameters of one task's model tagged with the aggregation they derive from."""

    weights: np.ndarray
    task_id: int = 0
    version: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class SgdTrace:
    """Record of one local training run.

    ``weights`` has ``e + 1`` rows, the iterates ``w^0 .. w^e``; ``grads`` has
    ``e`` rows, the stochastic regularised gradients used at each step, so
    ``weights[l + 1] = weights[l] - step * grads[l]`` for every ``l``.
    """

    weights: np.ndarray
    grads: np.ndarray
    batch_indices: tuple[tuple[int, ...], ...]
    step: float

    @property
    def iterations(self) -> int:
        return int(self.grads.shape[0])

    def accumulated_update(self) -> np.ndarray:
        """Step size times the sum of the gradients used, ``w^0 - w^e``."""
        return self.step * self.grads.sum(axis=0)


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite {what}")
    return value


def regularized_loss(w, w0, rho: float, loss: LossModel, data: LabeledDataset) -> float:
    """Mean loss over ``data`` plus ``rho / 2 * ||w - w0||^2``."""
    w = np.asarray(w, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    if w.shape != w0.shape:
        raise ValueError("w and w0 must have the same shape")
    if len(data) == 0:
        raise ValueError("empty dataset")
    val = loss.point_losses(w, data.features, data.labels).mean()
    val += 0.5 * rho * float(np.dot(w - w0, w - w0))
    return float(_check_finite(val, "loss"))


def regularized_gradient(w, w0, rho: float, loss: LossModel, batch: LabeledDataset) -> np.ndarray:
    """Batch-mean gradient of the loss plus ``rho * (w - w0)``."""
    w = np.asarray(w, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    if len(batch) == 0:
        raise ValueError("empty batch")
    g = loss.mean_grad(w, batch.features, batch.labels) + rho * (w - w0)
    return _check_finite(g, "gradient")


def local_train(w0: ModelState, e: int, batch_size: int, eta: float, rho: float,
                loss: LossModel, data: LabeledDataset, rng_seed) -> tuple[ModelState, SgdTrace]:
    """Run ``e`` mini-batch SGD steps on the regularised local loss.

    Each step draws ``batch_size`` points without replacement; draws are
    independent across steps.  The proximal anchor is the received model.
    """
    e = int(e)
    batch_size = int(batch_size)
    if e < 1:
        raise ValueError("need at least one SGD iteration")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if batch_size > len(data):
        raise ValueError("batch exceeds dataset")
    rng = np.random.default_rng(rng_seed)
    anchor = w0.weights
    ws = np.empty((e + 1, anchor.size))
    gs = np.empty((e, anchor.size))
    ws[0] = anchor
    batches = []
    for ell in range(e):
        idx = rng.choice(len(data), size=batch_size, replace=False)
        batches.append(tuple(int(k) for k in idx))
        x, y = data.features[idx], data.labels[idx]
        g = loss.mean_grad(ws[ell], x, y) + rho * (ws[ell] - anchor)
        gs[ell] = _check_finite(g, "gradient")
        ws[ell + 1] = ws[ell] - eta * gs[ell]
    out = ModelState(ws[-1], w0.task_id, w0.version)
    return out, SgdTrace(ws, gs, tuple(batches), float(eta))


def aggregate(w_global: ModelState, w_local: ModelState, alpha: float) -> ModelState:
    """Convex combination ``(1 - alpha) * global + alpha * local``; bumps the version."""
    if w_global.weights.shape != w_local.weights.shape:
        raise ValueError("dimension mismatch between global and local models")
    if w_global.task_id != w_local.task_id:
        raise ValueError("models belong to different tasks")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    w = (1.0 - alpha) * w_global.weights + alpha * w_local.weights
    return ModelState(w, w_global.task_id, w_global.version + 1)


def device_loss(w, loss: LossModel, data: LabeledDataset) -> float:
    """Mean loss of ``w`` over one device's data."""
    if len(data) == 0:
        raise ValueError("empty partition")
    return float(loss.point_losses(np.asarray(w, float), data.features, data.labels).mean())


def global_loss(w: ModelState, partitions, loss: LossModel) -> float:
    """Average over devices of each device's mean loss."""
    if not partitions:
        raise ValueError("no partitions")
    return float(np.mean([device_loss(w.weights, loss, p) for p in partitions]))


def global_gradient(w, partitions, loss: LossModel) -> np.ndarray:
    """Gradient of :func:`global_loss`: the device average of mean gradients."""
    w = np.asarray(w, dtype=float)
    return np.mean([loss.mean_grad(w, p.features, p.labels) for p in partitions], axis=0)
