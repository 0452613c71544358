"""Shared test fixtures and independent oracles.

The finite-difference helpers here recompute network scores by replaying
the layers after a chosen activation with perturbed values, so they share
no code with the closed-form derivative paths they check.
"""

import numpy as np
import pytest

import xcam.graph as G
import xcam.zoo as ZOO
from xcam.graph import LayerSpec, ModelGraph


def naive_conv2d(x, w, stride=1, pad=0):
    """Nested-loop convolution oracle. x [N,C,H,W], w [O,C,kh,kw]."""
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hh = (x.shape[2] - kh) // stride + 1
    ww = (x.shape[3] - kw) // stride + 1
    out = np.zeros((n, o, hh, ww))
    for ni in range(n):
        for oi in range(o):
            for yi in range(hh):
                for xi in range(ww):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (x[ni, ci, yi * stride + u, xi * stride + v]
                                        * w[oi, ci, u, v])
                    out[ni, oi, yi, xi] = acc
    return out


def make_tiny_net(seed=0, num_classes=3, size=12, channels=(4, 6)):
    """Small random conv net with a designated relu layer at index 4."""
    rng = np.random.default_rng(seed)

    def w(shape, scale=0.4):
        return scale * rng.standard_normal(shape)

    c1, c2 = channels
    half = size // 2
    layers = [
        LayerSpec("conv2d", stride=1, pad=1, weight=w((c1, 3, 3, 3)), bias=w((c1,))),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", k=2, stride=2),
        LayerSpec("conv2d", stride=1, pad=1, weight=w((c2, c1, 3, 3)), bias=w((c2,))),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", weight=w((num_classes, c2 * half * half), 0.2),
                  bias=w((num_classes,))),
    ]
    return ModelGraph(layers=layers, input_shape=(3, size, size),
                      num_classes=num_classes, designated_activation_layer=4)


def strongest_pixels(gradients, count, floor=1e-6):
    """Flat indices of the largest-|g| activation pixels, skipping dead ones."""
    flat = np.abs(gradients).ravel()
    order = np.argsort(-flat)
    picked = [int(i) for i in order if flat[i] > floor]
    return picked[:count]


def fd_readout_derivatives(graph, activation, flat_index, scores, grad_pixel,
                           class_index):
    """Central-difference 2nd/3rd derivatives of both readouts of the class
    score with respect to one activation pixel.

    Returns (d2_exp, d3_exp, d2_soft, d3_soft, ok) where ok is False when the
    stencil crossed a relu/pool boundary (the score response stopped being
    locally linear, detectable because the plain scores' second difference
    leaves the noise floor).

    Inside one relu cell the class scores respond exactly linearly to the
    pixel, so two replays pin down the whole local segment; the stencils then
    evaluate the readout on that segment in extended precision, which keeps
    the tiny softmax third derivative above the float64 roundoff floor.
    """
    layer = graph.designated_activation_layer
    g = abs(grad_pixel)
    h0 = min(1e-2, max(1e-6, 1e-3 / max(g, 1e-12)))

    def scores_at(delta):
        bumped = activation.copy()
        bumped.ravel()[flat_index] += delta
        return G.replay_scores(graph, layer, bumped[None])[0]

    s0 = np.asarray(scores, dtype=np.float64)
    sp, sm = scores_at(h0), scores_at(-h0)
    sp2, sm2 = scores_at(2 * h0), scores_at(-2 * h0)

    scale = max(1.0, float(np.max(np.abs(s0))))
    lin = np.max(np.abs(sp + sm - 2.0 * s0))
    lin2 = np.max(np.abs(sp2 + sm2 - 2.0 * s0))
    if lin > 1e-7 * scale or lin2 > 4e-7 * scale:
        return 0.0, 0.0, 0.0, 0.0, False

    c = int(class_index)
    s0l = s0.astype(np.longdouble)
    v = (sp.astype(np.longdouble) - sm.astype(np.longdouble)) / np.longdouble(2.0 * h0)

    def stencil(f, h):
        h = np.longdouble(h)
        f0, fp, fm = f(np.longdouble(0.0)), f(h), f(-h)
        fp2, fm2 = f(2.0 * h), f(-2.0 * h)
        d2 = (fp - 2.0 * f0 + fm) / (h * h)
        d3 = (fp2 - 2.0 * fp + 2.0 * fm - fm2) / (2.0 * h ** 3)
        return float(d2), float(d3)

    def f_exp(d):
        return np.exp(d * v[c])  # exp(S_c + d v_c) / exp(S_c)

    def f_soft(d):
        s = s0l + d * v
        e = np.exp(s - s.max())
        return (e / e.sum())[c]

    d2e, d3e = stencil(f_exp, h0)
    # Richardson extrapolation cancels the h^2 truncation term, which
    # dominates the softmax stencils at strong-gradient pixels; keep the
    # plain stencil when the measured h^2 correction sits inside the
    # extrapolation's own roundoff band (tiny derivatives)
    eps_ld = float(np.finfo(np.longdouble).eps)
    d2s_a, d3s_a = stencil(f_soft, h0)
    d2s_b, d3s_b = stencil(f_soft, h0 / 2.0)
    d2r = (4.0 * d2s_b - d2s_a) / 3.0
    d3r = (4.0 * d3s_b - d3s_a) / 3.0
    d2s = d2r if abs(d2r - d2s_a) > 10.0 * eps_ld / (h0 / 2.0) ** 2 else d2s_a
    d3s = d3r if abs(d3r - d3s_a) > 10.0 * eps_ld / (h0 / 2.0) ** 3 else d3s_a
    rescale = float(np.exp(s0[c]))
    return d2e * rescale, d3e * rescale, d2s, d3s, True


def _softmax(s):
    e = np.exp(s - np.max(s))
    return e / e.sum()


def build_toy_maps():
    """Three disjoint 8x10 binary activation maps with 15, 4 and 2 active
    pixels; the class-score gradient equals each map itself."""
    maps = np.zeros((3, 8, 10))
    maps[0, 0:3, 0:5] = 1.0
    maps[1, 4:6, 0:2] = 1.0
    maps[2, 6:8, 8:9] = 1.0
    assert [int(m.sum()) for m in maps] == [15, 4, 2]
    grads = maps.copy()
    return maps, grads


def make_separable_dataset(n=40, size=8, seed=0):
    """Two-class toy set: class 0 lights the left half, class 1 the right."""
    rng = np.random.default_rng(seed)
    X = np.zeros((n, 3, size, size))
    y = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % 2
        img = 0.05 * rng.random((3, size, size))
        cols = slice(0, size // 2) if label == 0 else slice(size // 2, size)
        img[:, :, cols] += 0.8
        X[i] = np.clip(img, 0.0, 1.0)
        y[i] = label
    return X, y


@pytest.fixture(scope="session")
def tiny_net():
    return make_tiny_net(seed=3)


@pytest.fixture(scope="session")
def trained_toy_model():
    """Small 2-class model trained on the separable toy set."""
    X, y = make_separable_dataset()
    model = ZOO.build_model("student", size=8, num_classes=2, seed=1)
    cfg = ZOO.TrainConfig(learning_rate=0.05, momentum=0.9, epochs=20,
                          batch_size=8, seed=1)
    trained, losses = ZOO.train(model, (X, y), cfg)
    return trained, (X, y), losses
