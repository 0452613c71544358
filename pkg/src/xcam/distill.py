"""Explanation-guided knowledge distillation: the student trains against
cross-entropy plus a penalty on the squared distance between its saliency map
and the frozen teacher's, optionally plus the temperature-softened logit
matching loss.

The interpretability term differentiates through the student's own gradient
computation (the map weights contain dS/dA), so each training step takes a
second-order path through the engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import saliency as SAL
from .graph import trace
from .zoo import TrainConfig, TrainingDiverged, cross_entropy

MAP_NORM_EPS = 1e-12


@dataclass
class DistillConfig:
    lambda_interpret: float = 0.01
    use_kd: bool = False
    kd_temperature: float = 4.0
    saliency_method: str = "grad_cam_pp"
    normalize_maps: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.lambda_interpret < 0:
            raise ValueError("lambda_interpret must be >= 0")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be > 0")
        if self.saliency_method not in ("grad_cam", "grad_cam_pp", "grad_cam_pp_perp"):
            raise ValueError(f"unsupported saliency method {self.saliency_method!r}")


def _np_norm(values):
    lo, hi = values.min(), values.max()
    return (values - lo) / ((hi - lo) + MAP_NORM_EPS)


def _node_norm(node):
    lo = E.min_all(node)
    rng = E.max_all(node) - lo
    return (node - lo) / (rng + MAP_NORM_EPS)


def _map_resolution(graph):
    return graph.output_shapes[graph.designated_activation_layer][1:]


def _teacher_map(teacher, image, class_index, method, target_hw, normalize):
    """Frozen-teacher saliency map, aligned to target_hw, as a plain array."""
    smap, _ = SAL.explain(teacher, image, method, class_index)
    values = smap.values
    if values.shape != tuple(target_hw):
        values = SAL.upsample_bilinear(values, *target_hw)
    return _np_norm(values) if normalize else values


def _student_map_node(student, image, class_index, method, param_nodes):
    """Differentiable student saliency map [h,w] with gradients flowing into
    param_nodes, including through the map weights' dS/dA terms."""
    tr = trace(student, np.asarray(image)[None], param_nodes=param_nodes)
    d = student.designated_activation_layer
    A = tr.layer_outputs[d]
    score = E.sum(E.take_per_row(tr.logits, [class_index]))
    gA, = E.grad(score, [A])
    g2 = gA * gA
    sum_a = E.sum(A, axis=(2, 3), keepdims=True)
    den = g2 * 2.0 + sum_a * (g2 * gA)
    gate = E.constant((np.abs(den.value) > SAL.DENOM_EPS).astype(np.float64))
    alpha = gate * g2 / (den + (1.0 - gate))
    if method == "grad_cam":
        hw = float(A.value.shape[2] * A.value.shape[3])
        w = E.sum(gA, axis=(2, 3)) * (1.0 / hw)
    elif method == "grad_cam_pp":
        w = E.sum(alpha * E.relu(gA), axis=(2, 3))
    else:  # grad_cam_pp_perp
        w = E.sum(alpha * gA, axis=(2, 3))
    weighted = E.reshape(w, (1, -1, 1, 1)) * A
    L = E.relu(E.sum(weighted, axis=1))
    h, wdt = L.value.shape[1:]
    return E.reshape(L, (h, wdt))


def _aligned_student_map(student, image, class_index, method, target_hw, normalize, param_nodes):
    node = _student_map_node(student, image, class_index, method, param_nodes)
    if node.value.shape != tuple(target_hw):
        node = E.resize_bilinear(node, target_hw)
    return _node_norm(node) if normalize else node


def _common_resolution(student, teacher):
    hs, ws = _map_resolution(student)
    ht, wt = _map_resolution(teacher)
    return (max(hs, ht), max(ws, wt))


def _interpret_node(student, teacher_map, image, class_index, method, target_hw,
                    normalize, param_nodes):
    s_node = _aligned_student_map(
        student, image, class_index, method, target_hw, normalize, param_nodes
    )
    diff = s_node - E.constant(teacher_map)
    return E.sum(diff * diff)


def map_mismatch(student_map, teacher_map):
    """Squared L2 distance between two already-aligned maps."""
    s = np.asarray(student_map, dtype=np.float64)
    t = np.asarray(teacher_map, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"map shapes differ: {s.shape} vs {t.shape}")
    diff = s - t
    return float((diff * diff).sum())


def interpret_loss(student, teacher, image, class_index, method="grad_cam_pp",
                   normalize=True):
    """Squared L2 distance between the two models' saliency maps for one
    class, after aligning resolutions (the smaller map is upsampled)."""
    if not 0 <= class_index < student.num_classes:
        raise ValueError(f"class_index {class_index} out of range for student")
    if not 0 <= class_index < teacher.num_classes:
        raise ValueError(f"class_index {class_index} out of range for teacher")
    target_hw = _common_resolution(student, teacher)
    t_map = _teacher_map(teacher, image, class_index, method, target_hw, normalize)
    s_smap, _ = SAL.explain(student, image, method, class_index)
    s_map = s_smap.values
    if s_map.shape != tuple(target_hw):
        s_map = SAL.upsample_bilinear(s_map, *target_hw)
    if normalize:
        s_map = _np_norm(s_map)
    return map_mismatch(s_map, t_map)


def kd_loss(student_logits, teacher_logits, temperature):
    """T^2-scaled KL divergence from the student's softened distribution to
    the teacher's. Accepts 1-D arrays (returns float) or a student Node."""
    t = np.asarray(
        teacher_logits.value if isinstance(teacher_logits, E.Node) else teacher_logits,
        dtype=np.float64,
    )
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    s_is_node = isinstance(student_logits, E.Node)
    s_shape = student_logits.value.shape if s_is_node else np.shape(student_logits)
    if s_shape[-1] != t.shape[-1]:
        raise ValueError(f"class count mismatch: student {s_shape[-1]}, teacher {t.shape[-1]}")
    t2 = np.atleast_2d(t) / temperature
    zt = t2 - t2.max(axis=-1, keepdims=True)
    pt = np.exp(zt)
    pt /= pt.sum(axis=-1, keepdims=True)
    log_pt = zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))
    if not s_is_node:
        s_node = E.constant(np.atleast_2d(np.asarray(student_logits, dtype=np.float64)))
    else:
        s_node = student_logits if student_logits.value.ndim == 2 else E.reshape(student_logits, (1, -1))
    log_ps = E.log_softmax(s_node * (1.0 / temperature), axis=-1)
    kl_rows = E.sum(E.constant(pt) * (E.constant(log_pt) - log_ps), axis=-1)
    loss = E.mean(kl_rows) * (temperature * temperature)
    return loss if s_is_node else float(loss.value)


def _batch_loss(model, teacher_maps, teacher_logits, X, y, idx, config):
    """One batch's total loss node plus its components and the param leaves."""
    params = {}
    tr = trace(model, X[idx], param_nodes=params)
    ce = cross_entropy(tr.logits, y[idx])
    total = ce
    parts = {"cross_entropy": float(ce.value), "interpret": 0.0, "kd": 0.0}
    if config.lambda_interpret > 0:
        target_hw = teacher_maps[idx[0]].shape
        terms = []
        for i in idx:
            terms.append(
                _interpret_node(
                    model, teacher_maps[i], X[i], int(y[i]), config.saliency_method,
                    target_hw, config.normalize_maps, params,
                )
            )
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        interp = acc * (1.0 / len(terms))
        parts["interpret"] = float(interp.value)
        total = total + interp * config.lambda_interpret
    if config.use_kd:
        kd = kd_loss(tr.logits, teacher_logits[idx], config.kd_temperature)
        parts["kd"] = float(kd.value)
        total = total + kd
    parts["total"] = float(total.value)
    return total, parts, params


def exp_student_loss(batch, student, teacher, config):
    """Combined loss on one batch: cross-entropy, plus the weighted map
    penalty, plus the softened-logit loss when enabled. Returns a float."""
    X, y = batch
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = np.arange(len(X))
    teacher_maps = None
    if config.lambda_interpret > 0:
        target_hw = _common_resolution(student, teacher)
        teacher_maps = [
            _teacher_map(teacher, X[i], int(y[i]), config.saliency_method, target_hw,
                         config.normalize_maps)
            for i in idx
        ]
    teacher_logits = None
    if config.use_kd:
        from .graph import forward

        teacher_logits = np.stack([forward(teacher, X[i])[0] for i in idx])
    total, _, _ = _batch_loss(student, teacher_maps, teacher_logits, X, y, idx, config)
    return float(total.value)


def distill_train(student, teacher, dataset, config):
    """Train a copy of the student against the frozen teacher. Returns the
    trained model and per-epoch traces {total, cross_entropy, interpret, kd}.
    """
    from .graph import forward

    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if student.param_count() >= teacher.param_count():
        raise ValueError("student must have fewer parameters than the teacher")
    model = student.copy()
    tcfg = config.train
    rng = np.random.default_rng(tcfg.seed)
    n = len(X)
    teacher_maps = None
    if config.lambda_interpret > 0:
        target_hw = _common_resolution(student, teacher)
        teacher_maps = [
            _teacher_map(teacher, X[i], int(y[i]), config.saliency_method, target_hw,
                         config.normalize_maps)
            for i in range(n)
        ]
    teacher_logits = None
    if config.use_kd:
        teacher_logits = np.stack([forward(teacher, X[i])[0] for i in range(n)])
    velocity = {}
    traces = {"total": [], "cross_entropy": [], "interpret": [], "kd": []}
    for epoch in range(tcfg.epochs):
        perm = rng.permutation(n)
        sums = {k: 0.0 for k in traces}
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            total, parts, params = _batch_loss(
                model, teacher_maps, teacher_logits, X, y, idx, config
            )
            if not np.isfinite(parts["total"]):
                raise TrainingDiverged(
                    f"non-finite loss {parts['total']} at epoch {epoch}, batch starting {start}"
                )
            for k in traces:
                sums[k] += parts[k] * len(idx)
            keys = list(params.keys())
            grads = E.grad(total, [params[k] for k in keys])
            for key, gnode in zip(keys, grads):
                layer_i, which = key
                v = velocity.get(key)
                if v is None:
                    v = np.zeros_like(gnode.value)
                v = tcfg.momentum * v - tcfg.learning_rate * gnode.value
                velocity[key] = v
                spec = model.layers[layer_i]
                if which == "weight":
                    spec.weight = spec.weight + v
                else:
                    spec.bias = spec.bias + v
        for k in traces:
            traces[k].append(sums[k] / n)
    return model, traces
