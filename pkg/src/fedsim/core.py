"""Desk-scale models, losses and gradients over flat float64 parameter vectors.

Parameters are plain ``numpy.ndarray`` vectors of dtype float64.  Each model
kind has a fixed layout:

=========  ==========================================  =====================
kind       layout                                      size
=========  ==========================================  =====================
linreg     w[d], b                                     d + 1
logreg     W[C, d] (row-major), b[C]                   C*d + C
mlp1       W1[h, d], b1[h], W2[C, h], b2[C]            h*d + h + C*h + C
quadratic  x[d]                                        d
=========  ==========================================  =====================

``quadratic`` is the objective used by the distributed QP benchmark: each
sample row stores ``vec(A)`` (row-major, d*d values) followed by ``b`` (d
values) and the per-sample loss is ``0.5 x'Ax + b'x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

KINDS = ("linreg", "logreg", "mlp1", "quadratic")

# Tolerances shared by gradient checks and oracle comparisons.
FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-6


class ShapeError(ValueError):
    """Raised when batch dimensions do not match the model shape."""


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"targets shape {y.shape} does not match {x.shape[0]} rows")
        if x.shape[0] < 1:
            raise ShapeError("batch must contain at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.features[idx], self.targets[idx])


def num_params(kind: str, input_dim: int, num_classes: int = 1, hidden_dim: int = 0) -> int:
    if kind == "linreg":
        return input_dim + 1
    if kind == "logreg":
        return num_classes * input_dim + num_classes
    if kind == "mlp1":
        return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes
    if kind == "quadratic":
        return input_dim
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class Model:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = num_params(self.kind, self.input_dim, self.num_classes, self.hidden_dim)
        if self.params is None:
            p = np.zeros(n)
        else:
            p = np.array(self.params, dtype=np.float64)
        if p.shape != (n,):
            raise ShapeError(f"{self.kind} expects {n} params, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        return self.params.shape[0]

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=params)

    @property
    def feature_width(self) -> int:
        """Number of feature columns a batch must have."""
        if self.kind == "quadratic":
            return self.input_dim * self.input_dim + self.input_dim
        return self.input_dim


def init_model(kind: str, input_dim: int, num_classes: int = 1, hidden_dim: int = 0,
               seed: int = 0) -> Model:
    """Zero init for the convex kinds; scaled normal init for ``mlp1``."""
    n = num_params(kind, input_dim, num_classes, hidden_dim)
    if kind != "mlp1":
        return Model(kind, input_dim, num_classes, hidden_dim, np.zeros(n))
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=hidden_dim * input_dim)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=num_classes * hidden_dim)
    params = np.concatenate([w1, np.zeros(hidden_dim), w2, np.zeros(num_classes)])
    return Model(kind, input_dim, num_classes, hidden_dim, params)


def _check(model: Model, batch: Batch) -> None:
    if batch.features.shape[1] != model.feature_width:
        raise ShapeError(
            f"{model.kind} model expects {model.feature_width} feature columns, "
            f"batch has {batch.features.shape[1]}"
        )
    if model.kind in ("logreg", "mlp1"):
        y = batch.targets
        if np.any(y < 0) or np.any(y >= model.num_classes) or np.any(y != np.floor(y)):
            raise ShapeError(f"class targets must be integers in [0, {model.num_classes})")


def _unpack_mlp(model: Model):
    d, h, c = model.input_dim, model.hidden_dim, model.num_classes
    p = model.params
    o = 0
    w1 = p[o:o + h * d].reshape(h, d); o += h * d
    b1 = p[o:o + h]; o += h
    w2 = p[o:o + c * h].reshape(c, h); o += c * h
    b2 = p[o:o + c]
    return w1, b1, w2, b2


def _split_qp(model: Model, batch: Batch):
    d = model.input_dim
    a = batch.features[:, :d * d].reshape(-1, d, d)
    b = batch.features[:, d * d:]
    return a, b


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    """Real outputs for ``linreg``, logits for the classifiers."""
    x = np.asarray(features, dtype=np.float64)
    p = model.params
    if model.kind == "linreg":
        return x @ p[:-1] + p[-1]
    if model.kind == "logreg":
        c, d = model.num_classes, model.input_dim
        return x @ p[:c * d].reshape(c, d).T + p[c * d:]
    if model.kind == "mlp1":
        w1, b1, w2, b2 = _unpack_mlp(model)
        return np.tanh(x @ w1.T + b1) @ w2.T + b2
    raise ValueError(f"predict is undefined for {model.kind}")


def loss(model: Model, batch: Batch) -> float:
    return _loss_and_grad(model, batch, want_grad=False)[0]


def gradient(model: Model, batch: Batch) -> np.ndarray:
    return _loss_and_grad(model, batch, want_grad=True)[1]


def loss_and_gradient(model: Model, batch: Batch) -> tuple[float, np.ndarray]:
    return _loss_and_grad(model, batch, want_grad=True)


def _loss_and_grad(model: Model, batch: Batch, want_grad: bool):
    _check(model, batch)
    x, y = batch.features, batch.targets
    n = x.shape[0]
    p = model.params
    kind = model.kind

    if kind == "linreg":
        r = x @ p[:-1] + p[-1] - y
        value = float(np.mean(r * r))
        if not want_grad:
            return value, None
        g = 2.0 * r / n
        return value, np.concatenate([x.T @ g, [g.sum()]])

    if kind == "quadratic":
        a, b = _split_qp(model, batch)
        ax = a @ p
        value = float(np.mean(0.5 * ax @ p + b @ p))
        if not want_grad:
            return value, None
        sym = 0.5 * (ax + np.einsum("nji,j->ni", a, p))
        return value, (sym + b).mean(axis=0)

    labels = y.astype(np.int64)
    if kind == "logreg":
        c, d = model.num_classes, model.input_dim
        logits = x @ p[:c * d].reshape(c, d).T + p[c * d:]
        value, dz = _softmax_xent(logits, labels)
        if not want_grad:
            return value, None
        return value, np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])

    if kind == "mlp1":
        w1, b1, w2, b2 = _unpack_mlp(model)
        hid = np.tanh(x @ w1.T + b1)
        value, dz = _softmax_xent(hid @ w2.T + b2, labels)
        if not want_grad:
            return value, None
        dh = (dz @ w2) * (1.0 - hid * hid)
        return value, np.concatenate([
            (dh.T @ x).ravel(), dh.sum(axis=0), (dz.T @ hid).ravel(), dz.sum(axis=0),
        ])

    raise ValueError(f"unknown model kind {kind!r}")


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    if isinstance(rng_seed, (int, np.integer)):
        return np.random.default_rng(int(rng_seed))
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in rng_seed]))


def minibatch_schedule(n: int, steps: int, batch_size: int, rng_seed) -> list[np.ndarray]:
    """Index arrays for ``steps`` minibatches, reshuffling at each epoch start.

    An epoch is ``ceil(n / batch_size)`` batches; the last one may be short.
    """
    rng = _as_rng(rng_seed)
    batch_size = max(1, min(int(batch_size), n))
    out: list[np.ndarray] = []
    order = None
    pos = n
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        out.append(order[pos:pos + batch_size])
        pos += batch_size
    return out


def sgd_steps(model: Model, data: Batch, lr: float, steps: int, batch_size: int, rng_seed,
              prox: tuple[float, np.ndarray] | None = None,
              correction: np.ndarray | None = None) -> Model:
    """Run ``steps`` plain minibatch SGD steps.

    ``prox=(mu, anchor)`` adds ``mu * (w - anchor)`` to every gradient.
    ``correction`` is a constant vector added to every gradient (control
    variates).
    """
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    if steps == 0:
        return model
    _check(model, data)
    w = model.params.copy()
    if correction is not None and correction.shape != w.shape:
        raise ShapeError("correction vector has wrong dimension")
    cur = model
    with np.errstate(over="ignore", invalid="ignore"):
        for idx in minibatch_schedule(len(data), steps, batch_size, rng_seed):
            g = gradient(cur, data.take(idx))
            if prox is not None and prox[0] != 0.0:
                mu, anchor = prox
                g = g + mu * (w - anchor)
            if correction is not None:
                g = g + correction
            w = w - lr * g
            cur = model.with_params(w)
    return cur


