"""Canonical desk-scale CNNs (teacher, student, GAP-headed variant for CAM),
SGD-with-momentum training on softmax cross-entropy, and prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .graph import (
    CONV2D,
    DENSE,
    FLATTEN,
    GLOBAL_AVERAGE_POOL,
    MAXPOOL2D,
    RELU,
    LayerSpec,
    ModelGraph,
    trace,
)

MODEL_NAMES = ("teacher", "student", "gap_cam")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite mid-training."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        # rate 0 is allowed as the degenerate no-op schedule
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _uniform_init(rng, shape, fan_in, fan_out):
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def _conv(rng, out_ch, in_ch, k, stride=1, pad=0):
    w = _uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k, out_ch * k * k)
    return LayerSpec(CONV2D, stride=stride, pad=pad, weight=w, bias=np.zeros(out_ch))


def _dense(rng, out_f, in_f):
    w = _uniform_init(rng, (out_f, in_f), in_f, out_f)
    return LayerSpec(DENSE, weight=w, bias=np.zeros(out_f))


def build_model(name, size=32, num_classes=3, seed=0):
    """teacher: four conv blocks then a dense head; student: two conv blocks
    (strictly fewer parameters); gap_cam: conv stack, global average pool,
    single dense layer whose weight rows are the per-class map weights."""
    rng = np.random.default_rng(seed)
    if name == "teacher":
        q = size // 4
        layers = [
            _conv(rng, 8, 3, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            _conv(rng, 16, 8, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            _conv(rng, 16, 16, 3, pad=1),
            LayerSpec(RELU),
            _conv(rng, 16, 16, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(FLATTEN),
            _dense(rng, num_classes, 16 * q * q),
        ]
        designated = 9
    elif name == "student":
        h = size // 2
        layers = [
            _conv(rng, 8, 3, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            _conv(rng, 12, 8, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            LayerSpec(FLATTEN),
            _dense(rng, num_classes, 12 * (h // 2) * (h // 2)),
        ]
        designated = 4
    elif name == "gap_cam":
        layers = [
            _conv(rng, 8, 3, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            _conv(rng, 16, 8, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(MAXPOOL2D, k=2, stride=2),
            _conv(rng, 16, 16, 3, pad=1),
            LayerSpec(RELU),
            LayerSpec(GLOBAL_AVERAGE_POOL),
            _dense(rng, num_classes, 16),
        ]
        designated = 7
    else:
        raise ValueError(f"unknown model name {name!r}; expected one of {MODEL_NAMES}")
    return ModelGraph(
        layers=layers,
        input_shape=(3, size, size),
        num_classes=num_classes,
        designated_activation_layer=designated,
    )


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of a logits Node against integer labels."""
    logp = E.log_softmax(logits, axis=-1)
    return E.mean(E.neg(E.take_per_row(logp, labels)))


def train(graph, dataset, config):
    """SGD with momentum. dataset is (X [N,C,H,W], y [N]); returns a new
    trained ModelGraph and the per-epoch mean loss trace. The input graph
    is left untouched."""
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if y.min() < 0 or y.max() >= graph.num_classes:
        raise ValueError(f"labels must lie in [0, {graph.num_classes}), got [{y.min()}, {y.max()}]")
    model = graph.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {}
    losses = []
    n = len(X)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tr = trace(model, X[idx], trainable=True)
            loss = cross_entropy(tr.logits, y[idx])
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(
                    f"non-finite loss {lv} at epoch {epoch}, batch starting {start}"
                )
            total += lv * len(idx)
            keys = list(tr.params.keys())
            grads = E.grad(loss, [tr.params[k] for k in keys])
            for key, gnode in zip(keys, grads):
                layer_i, which = key
                v = velocity.get(key)
                if v is None:
                    v = np.zeros_like(gnode.value)
                v = config.momentum * v - config.learning_rate * gnode.value
                velocity[key] = v
                spec = model.layers[layer_i]
                if which == "weight":
                    spec.weight = spec.weight + v
                else:
                    spec.bias = spec.bias + v
        losses.append(total / n)
    return model, losses


def softmax_probs(scores):
    e = np.exp(scores - scores.max())
    p = e / e.sum()
    return p / p.sum()


def predict(graph, image):
    """(argmax class, softmax probabilities) for one image."""
    from .graph import forward

    scores, _ = forward(graph, image)
    probs = softmax_probs(scores)
    return int(np.argmax(scores)), probs
