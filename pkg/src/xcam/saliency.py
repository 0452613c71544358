"""Class-conditional saliency maps over the designated activation layer.

Methods: cam (GAP-headed models only), grad_cam (mean gradient weights),
grad_cam_pp (alpha-weighted positive gradients), and grad_cam_pp_perp (the
ablation admitting negative gradients). Plus upsampling, normalization,
explanation maps, and guided fusion.

All gradient-derived quantities work on g = dS/dA directly. For the
exponential readout Y = exp(S), the higher derivatives share the positive
factor exp(S) which cancels inside alpha and only scales the map, so it is
dropped; normalization removes per-image scale anyway.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .graph import DENSE, GLOBAL_AVERAGE_POOL, backward, forward
from .pnm import write_image
from .zoo import softmax_probs

METHODS = ("cam", "grad_cam", "grad_cam_pp", "grad_cam_pp_perp")

DENOM_EPS = 1e-12


@dataclass
class SaliencyMap:
    values: np.ndarray  # [H_f, W_f], feature-map resolution
    class_index: int
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class AlphaMap:
    """Pixel-wise gradient weighting coefficients, plus the gradient of the
    readout Y^c they were derived from (used for the positive-gradient gate)."""

    values: np.ndarray  # [K, H, W]
    grad_y: np.ndarray  # [K, H, W]


def _alpha_core(g2, den):
    mask = np.abs(den) > DENOM_EPS
    return np.where(mask, g2 / np.where(mask, den, 1.0), 0.0)


def alpha_exponential(tape, activations):
    """Alpha under the exponential readout: g^2 / (2 g^2 + (sum A) g^3),
    with alpha forced to 0 wherever the denominator is within 1e-12 of 0."""
    d = tape.designated_layer
    if d not in tape.gradients:
        raise ValueError("tape has no gradients; run backward first")
    g = tape.gradients[d]
    activations = np.asarray(activations, dtype=np.float64)
    if g.shape != activations.shape:
        raise ValueError(f"gradient shape {g.shape} != activation shape {activations.shape}")
    sum_a = activations.sum(axis=(1, 2), keepdims=True)
    g2 = g * g
    den = 2.0 * g2 + sum_a * (g2 * g)
    return AlphaMap(values=_alpha_core(g2, den), grad_y=g)


def exponential_readout_derivatives(scores, gradients, class_index):
    """First three diagonal derivatives of exp(S^c) w.r.t. each activation
    pixel: exp(S^c) * g, * g^2, * g^3 (S is locally linear in relu nets)."""
    es = np.exp(np.asarray(scores, dtype=np.float64)[class_index])
    g = np.asarray(gradients, dtype=np.float64)
    return es * g, es * g * g, es * g * g * g


def softmax_readout_derivatives(scores, class_gradients, class_index):
    """First three diagonal derivatives of softmax(S)[c] w.r.t. each
    activation pixel, from per-class score gradients (second derivatives of
    the scores themselves vanish for relu/linear nets).

    scores: [C]; class_gradients: [C, K, H, W]. Returns (dY, d2Y, d3Y)."""
    p = softmax_probs(np.asarray(scores, dtype=np.float64))
    G = np.asarray(class_gradients, dtype=np.float64)
    pc = p[class_index]
    gc = G[class_index]
    pcol = p[:, None, None, None]
    m1 = np.tensordot(p, G, axes=(0, 0))  # sum_k Y^k g_k
    dY_all = pcol * (G - m1)
    m2 = (dY_all * G).sum(axis=0)  # sum_k dY^k g_k
    d2Y_all = dY_all * (G - m1) - pcol * m2
    m3 = (d2Y_all * G).sum(axis=0)  # sum_k d2Y^k g_k
    dY = dY_all[class_index]
    d2Y = d2Y_all[class_index]
    d3Y = d2Y * (gc - m1) - 2.0 * dY * m2 - pc * m3
    return dY, d2Y, d3Y


def alpha_softmax(tape, activations):
    """Alpha under the softmax readout: d2Y / (2 d2Y + (sum A) d3Y)."""
    all_g = getattr(tape, "all_class_gradients", None)
    if all_g is None:
        raise ValueError("tape has no per-class gradients; run backward_all_classes first")
    if tape.target_class is None:
        raise ValueError("tape has no target class; run backward first")
    activations = np.asarray(activations, dtype=np.float64)
    if all_g.shape[1:] != activations.shape:
        raise ValueError(
            f"gradient shape {all_g.shape[1:]} != activation shape {activations.shape}"
        )
    dY, d2Y, d3Y = softmax_readout_derivatives(
        tape.penultimate_scores, all_g, tape.target_class
    )
    sum_a = activations.sum(axis=(1, 2), keepdims=True)
    den = 2.0 * d2Y + sum_a * d3Y
    return AlphaMap(values=_alpha_core(d2Y, den), grad_y=dY)


def feature_weights(mode, gradients=None, activations=None, alpha=None, dense_weights=None,
                    class_index=None):
    """Per-feature-map weights w^c_k.

    gradients is dY^c/dA (up to a positive scale) as [K,H,W]; alpha is an
    AlphaMap or raw [K,H,W] array for the ++ modes; dense_weights [C,K] and
    class_index select the row for cam."""
    if mode == "cam":
        if dense_weights is None or class_index is None:
            raise ValueError("cam mode needs dense_weights and class_index")
        return np.asarray(dense_weights, dtype=np.float64)[class_index].copy()
    if gradients is None:
        raise ValueError(f"{mode} mode needs gradients")
    g = np.asarray(gradients, dtype=np.float64)
    if mode == "grad_cam":
        return g.mean(axis=(1, 2))
    if mode in ("grad_cam_pp", "grad_cam_pp_perp"):
        if alpha is None:
            raise ValueError(f"{mode} mode needs alpha")
        avals = alpha.values if isinstance(alpha, AlphaMap) else np.asarray(alpha, dtype=np.float64)
        if avals.shape != g.shape:
            raise ValueError(f"alpha shape {avals.shape} != gradient shape {g.shape}")
        if mode == "grad_cam_pp":
            return (avals * np.maximum(g, 0.0)).sum(axis=(1, 2))
        return (avals * g).sum(axis=(1, 2))
    raise ValueError(f"unknown mode {mode!r}")


def saliency(weights, activations, class_index=0, method="grad_cam_pp"):
    """L_ij = relu(sum_k w_k A^k_ij) at feature-map resolution."""
    weights = np.asarray(weights, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    if weights.shape != (activations.shape[0],):
        raise ValueError(
            f"{weights.shape[0] if weights.ndim else 0} weights for {activations.shape[0]} maps"
        )
    values = np.maximum(np.tensordot(weights, activations, axes=(0, 0)), 0.0)
    return SaliencyMap(values=values, class_index=class_index, method=method)


def upsample_bilinear(smap, target_h, target_w):
    """Corner-aligned bilinear upsampling to [target_h, target_w]."""
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    h, w = values.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} smaller than source {h}x{w}")
    return E._resize_value(values, (target_h, target_w))


def normalize_threshold(values, delta):
    """Min-max normalize to [0,1], then push everything above delta to 1.0.
    A constant map normalizes to all zeros."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta {delta} outside [0,1]")
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    out = (values - lo) / (hi - lo)
    out[out > delta] = 1.0
    return out


def normalize01(values):
    """Min-max normalize only (threshold at 1.0 never fires)."""
    return normalize_threshold(values, 1.0)


@dataclass
class ExplanationMap:
    values: np.ndarray
    source_saliency: SaliencyMap | None = None
    threshold: float | None = None


def explanation_map(upsampled, image, source=None, threshold=None):
    """E = L (broadcast over channels) * I, pointwise."""
    L = np.asarray(upsampled, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if L.shape != image.shape[-2:]:
        raise ValueError(f"map {L.shape} does not align with image {image.shape}")
    values = L[None, :, :] * image if image.ndim == 3 else L * image
    return ExplanationMap(values=values, source_saliency=source, threshold=threshold)


def guided_fuse(guided_map, upsampled):
    """Guided visualization masked by the (broadcast) saliency map."""
    gmap = np.asarray(guided_map, dtype=np.float64)
    L = np.asarray(upsampled, dtype=np.float64)
    if L.shape != gmap.shape[-2:]:
        raise ValueError(f"map {L.shape} does not align with guided map {gmap.shape}")
    return gmap * L[None, :, :] if gmap.ndim == 3 else gmap * L


def _cam_dense_weights(graph):
    """CAM needs designated -> global-average-pool -> dense and nothing else."""
    d = graph.designated_activation_layer
    tail = [s.kind for s in graph.layers[d + 1 :]]
    if tail != [GLOBAL_AVERAGE_POOL, DENSE]:
        raise ValueError(
            "cam requires a model whose designated layer feeds global-average-pool "
            "then a single dense layer"
        )
    return graph.layers[-1].weight


def saliency_for(graph, tape, method, class_index=None, uniform_alpha=False):
    """Full per-image pipeline from a taped forward pass to a SaliencyMap.

    class_index defaults to the predicted argmax. uniform_alpha is a debug
    switch that collapses grad_cam_pp to the grad_cam weight path (alpha
    1/Z, no positive-gradient gate)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if class_index is None:
        class_index = int(np.argmax(tape.penultimate_scores))
    d = graph.designated_activation_layer
    A = tape.activations[d]
    if method == "cam":
        w = feature_weights(
            "cam", dense_weights=_cam_dense_weights(graph), class_index=class_index
        )
        return saliency(w, A, class_index, method)
    if tape.target_class != class_index or d not in tape.gradients:
        backward(graph, tape, class_index)
    g = tape.gradients[d]
    if method == "grad_cam" or (method == "grad_cam_pp" and uniform_alpha):
        w = feature_weights("grad_cam", g, A)
        return saliency(w, A, class_index, method)
    alpha = alpha_exponential(tape, A)
    w = feature_weights(method, alpha.grad_y, A, alpha=alpha)
    return saliency(w, A, class_index, method)


def explain(graph, image, method, class_index=None, uniform_alpha=False):
    """forward + saliency_for in one call; returns (SaliencyMap, tape)."""
    _, tape = forward(graph, image)
    smap = saliency_for(graph, tape, method, class_index, uniform_alpha)
    return smap, tape


def save_saliency_p5(path, smap):
    write_image(path, normalize01(smap.values))


def save_saliency_json(path, smap):
    payload = {
        "class_index": smap.class_index,
        "method": smap.method,
        "shape": list(smap.values.shape),
        "values": [[float(v) for v in row] for row in smap.values],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ": "), indent=2)
        f.write("\n")
