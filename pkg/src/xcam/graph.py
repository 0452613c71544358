"""Static sequential CNN graphs: layer specs, shape inference, taped forward
and reverse passes, guided backpropagation, and finite-difference probes.

A model is an ordered list of layers with one designated activation layer
whose channel maps are the A^k that saliency methods weight and combine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import kernels as K

CONV2D = "conv2d"
RELU = "relu"
MAXPOOL2D = "maxpool2d"
GLOBAL_AVERAGE_POOL = "global-average-pool"
DENSE = "dense"
FLATTEN = "flatten"
SOFTMAX = "softmax"

LAYER_KINDS = (CONV2D, RELU, MAXPOOL2D, GLOBAL_AVERAGE_POOL, DENSE, FLATTEN, SOFTMAX)


class LayerShapeError(ValueError):
    """Shape inconsistency at a specific layer."""

    def __init__(self, layer_index, message):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


@dataclass
class LayerSpec:
    """One layer. weight/bias are float64 arrays for conv2d and dense;
    conv weight is [out_ch, in_ch, kh, kw], dense weight is [out, in]."""

    kind: str
    stride: int = 1
    pad: int = 0
    k: int = 2
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)

    def param_count(self):
        n = 0
        if self.weight is not None:
            n += self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


def _infer_layer_shape(i, spec, shape):
    """Output shape of layer i given input shape (without batch dim)."""
    if spec.kind == CONV2D:
        if spec.weight is None or spec.weight.ndim != 4:
            raise LayerShapeError(i, "conv2d requires a 4-D weight [out, in, kh, kw]")
        if len(shape) != 3:
            raise LayerShapeError(i, f"conv2d expects [C,H,W] input, got {shape}")
        out_ch, in_ch, kh, kw = spec.weight.shape
        if in_ch != shape[0]:
            raise LayerShapeError(i, f"conv2d weight expects {in_ch} channels, input has {shape[0]}")
        if spec.bias is not None and spec.bias.shape != (out_ch,):
            raise LayerShapeError(i, f"conv2d bias shape {spec.bias.shape} != ({out_ch},)")
        oh = (shape[1] + 2 * spec.pad - kh) // spec.stride + 1
        ow = (shape[2] + 2 * spec.pad - kw) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise LayerShapeError(i, f"conv2d kernel {kh}x{kw} does not fit input {shape[1]}x{shape[2]}")
        return (out_ch, oh, ow)
    if spec.kind == MAXPOOL2D:
        if len(shape) != 3:
            raise LayerShapeError(i, f"maxpool2d expects [C,H,W] input, got {shape}")
        oh = (shape[1] - spec.k) // spec.stride + 1
        ow = (shape[2] - spec.k) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise LayerShapeError(i, f"maxpool2d window {spec.k} does not fit input {shape[1]}x{shape[2]}")
        return (shape[0], oh, ow)
    if spec.kind == GLOBAL_AVERAGE_POOL:
        if len(shape) != 3:
            raise LayerShapeError(i, f"global-average-pool expects [C,H,W] input, got {shape}")
        return (shape[0],)
    if spec.kind == DENSE:
        if spec.weight is None or spec.weight.ndim != 2:
            raise LayerShapeError(i, "dense requires a 2-D weight [out, in]")
        out_f, in_f = spec.weight.shape
        if len(shape) != 1 or shape[0] != in_f:
            raise LayerShapeError(i, f"dense weight expects {in_f} features, input shape is {shape}")
        if spec.bias is not None and spec.bias.shape != (out_f,):
            raise LayerShapeError(i, f"dense bias shape {spec.bias.shape} != ({out_f},)")
        return (out_f,)
    if spec.kind == FLATTEN:
        return (int(np.prod(shape)),)
    # relu and softmax preserve shape
    return shape


@dataclass
class ModelGraph:
    """Immutable-after-construction sequential model."""

    layers: list[LayerSpec]
    input_shape: tuple
    num_classes: int
    designated_activation_layer: int
    output_shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = []
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            shape = _infer_layer_shape(i, spec, shape)
            shapes.append(shape)
        self.output_shapes = shapes
        if shape != (self.num_classes,):
            raise ValueError(
                f"final layer emits shape {shape}, expected ({self.num_classes},) class scores"
            )
        d = self.designated_activation_layer
        if d is not None:  # models without one cannot feed the saliency ops
            if not 0 <= d < len(self.layers):
                raise ValueError(f"designated_activation_layer {d} out of range")
            kind = self.layers[d].kind
            if kind == RELU:
                if d == 0 or self.layers[d - 1].kind != CONV2D:
                    raise ValueError("designated relu layer must directly follow a conv2d layer")
            elif kind != CONV2D:
                raise ValueError(f"designated layer must be conv2d or relu-after-conv2d, got {kind}")
            ds = shapes[d]
            if len(ds) != 3 or ds[1] < 2 or ds[2] < 2:
                raise ValueError(f"designated layer spatial extent {ds} is smaller than 2x2")

    def param_count(self):
        return sum(s.param_count() for s in self.layers)

    def copy(self):
        layers = [
            LayerSpec(
                kind=s.kind,
                stride=s.stride,
                pad=s.pad,
                k=s.k,
                weight=None if s.weight is None else s.weight.copy(),
                bias=None if s.bias is None else s.bias.copy(),
            )
            for s in self.layers
        ]
        return ModelGraph(
            layers=layers,
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            designated_activation_layer=self.designated_activation_layer,
        )


class GradientTape:
    """Per-inference record: activations from forward, gradients from
    backward, both keyed by layer index (-1 is the input)."""

    def __init__(self):
        self.activations = {}
        self.gradients = {}
        self.target_class = None
        self.penultimate_scores = None
        self.designated_layer = None
        self.all_class_gradients = None
        self._nodes = {}
        self._scores_node = None


def _layer_forward(spec, x, weight_node=None, bias_node=None):
    """Apply one layer to a batched Node. weight/bias nodes override the
    spec's arrays (used to make parameters differentiation roots)."""
    if spec.kind == CONV2D:
        w = weight_node if weight_node is not None else E.constant(spec.weight)
        y = E.conv2d(x, w, stride=spec.stride, pad=spec.pad)
        if spec.bias is not None or bias_node is not None:
            b = bias_node if bias_node is not None else E.constant(spec.bias)
            y = y + E.reshape(b, (1, -1, 1, 1))
        return y
    if spec.kind == RELU:
        return E.relu(x)
    if spec.kind == MAXPOOL2D:
        return E.maxpool2d(x, spec.k, spec.stride)
    if spec.kind == GLOBAL_AVERAGE_POOL:
        return E.mean(x, axis=(2, 3))
    if spec.kind == DENSE:
        w = weight_node if weight_node is not None else E.constant(spec.weight)
        y = E.matmul(x, E.transpose(w))
        if spec.bias is not None or bias_node is not None:
            b = bias_node if bias_node is not None else E.constant(spec.bias)
            y = y + E.reshape(b, (1, -1))
        return y
    if spec.kind == FLATTEN:
        return E.reshape(x, (x.value.shape[0], -1))
    if spec.kind == SOFTMAX:
        return E.softmax(x, axis=-1)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


class Trace:
    """Differentiable forward over a batch: nodes for the input, every layer
    output, and any trainable parameters."""

    __slots__ = ("input", "layer_outputs", "logits", "params")

    def __init__(self, input_node, layer_outputs, params):
        self.input = input_node
        self.layer_outputs = layer_outputs
        self.logits = layer_outputs[-1]
        self.params = params


def trace(graph, batch, trainable=False, input_as_leaf=False, param_nodes=None):
    """Run a batched forward pass building the autodiff graph.

    batch: [B, *input_shape] array. trainable=True makes every weight/bias a
    differentiation root (params dict keys are (layer_index, "weight"|"bias")).
    Passing param_nodes reuses existing leaf nodes so several traces share
    the same differentiation roots.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != graph.input_shape:
        raise LayerShapeError(-1, f"input shape {batch.shape[1:]} != {graph.input_shape}")
    if param_nodes is not None:
        trainable = True
    x = E.leaf(batch) if input_as_leaf else E.constant(batch)
    input_node = x
    params = {} if param_nodes is None else param_nodes
    outputs = []
    for i, spec in enumerate(graph.layers):
        wn = bn = None
        if trainable and spec.weight is not None:
            wn = params.get((i, "weight"))
            if wn is None:
                wn = E.leaf(spec.weight)
                params[(i, "weight")] = wn
        if trainable and spec.bias is not None:
            bn = params.get((i, "bias"))
            if bn is None:
                bn = E.leaf(spec.bias)
                params[(i, "bias")] = bn
        try:
            x = _layer_forward(spec, x, wn, bn)
        except ValueError as err:
            if isinstance(err, LayerShapeError):
                raise
            raise LayerShapeError(i, str(err)) from err
        outputs.append(x)
    return Trace(input_node, outputs, params)


def forward(graph, image):
    """Forward one image [C,H,W]. Returns (scores [num_classes], tape)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != graph.input_shape:
        raise LayerShapeError(-1, f"input shape {image.shape} != {graph.input_shape}")
    tr = trace(graph, image[None], trainable=False, input_as_leaf=True)
    tape = GradientTape()
    tape.designated_layer = graph.designated_activation_layer
    tape._nodes[-1] = tr.input
    tape.activations[-1] = image
    for i, node in enumerate(tr.layer_outputs):
        tape._nodes[i] = node
        tape.activations[i] = node.value[0]
    tape._scores_node = tr.logits
    tape.penultimate_scores = tr.logits.value[0].copy()
    return tape.penultimate_scores, tape


def backward(graph, tape, class_index):
    """Populate tape.gradients[l] = d S^c / d activation(l) for every layer
    (and the input at key -1), seeding one-hot on class_index."""
    if tape._scores_node is None:
        raise ValueError("backward requires a forward pass first")
    if not 0 <= class_index < graph.num_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {graph.num_classes})")
    seed = np.zeros((1, graph.num_classes))
    seed[0, class_index] = 1.0
    keys = sorted(tape._nodes.keys())
    wrt = [tape._nodes[k] for k in keys]
    grads = E.grad(tape._scores_node, wrt, seed=E.constant(seed))
    for key, g in zip(keys, grads):
        tape.gradients[key] = g.value[0]
    tape.target_class = class_index
    return tape


def backward_all_classes(graph, tape):
    """Gradients of every class score w.r.t. the designated activation maps.

    Returns [num_classes, K, H, W]: one backward pass per class.
    """
    if tape._scores_node is None:
        raise ValueError("backward_all_classes requires a forward pass first")
    d = graph.designated_activation_layer
    target = tape._nodes[d]
    out = np.empty((graph.num_classes,) + tape.activations[d].shape)
    for c in range(graph.num_classes):
        seed = np.zeros((1, graph.num_classes))
        seed[0, c] = 1.0
        g, = E.grad(tape._scores_node, [target], seed=E.constant(seed))
        out[c] = g.value[0]
    tape.all_class_gradients = out
    return out


def guided_backward(graph, tape, class_index):
    """Input-space gradient with the guided rule: at every relu, the flowing
    gradient is kept only where the forward pre-activation is positive AND
    the incoming gradient is positive. Returns a [C,H,W] map."""
    if tape._scores_node is None:
        raise ValueError("guided_backward requires a forward pass first")
    if not 0 <= class_index < graph.num_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {graph.num_classes})")
    g = np.zeros((1, graph.num_classes))
    g[0, class_index] = 1.0
    for i in reversed(range(len(graph.layers))):
        spec = graph.layers[i]
        x_in = tape._nodes[i - 1].value if i > 0 else tape._nodes[-1].value
        if spec.kind == CONV2D:
            g = K.conv2d_backward_data(spec.weight, g, x_in.shape[2:], spec.stride, spec.pad)
        elif spec.kind == RELU:
            g = g * (x_in > 0.0) * (g > 0.0)
        elif spec.kind == MAXPOOL2D:
            _, idx = K.maxpool2d_forward(x_in, spec.k, spec.stride)
            g = K.maxpool2d_backward(g, idx, x_in.shape[2:])
        elif spec.kind == GLOBAL_AVERAGE_POOL:
            hw = x_in.shape[2] * x_in.shape[3]
            g = np.broadcast_to(g[:, :, None, None] / hw, x_in.shape).copy()
        elif spec.kind == DENSE:
            g = g @ spec.weight
        elif spec.kind == FLATTEN:
            g = g.reshape(x_in.shape)
        elif spec.kind == SOFTMAX:
            s = tape._nodes[i].value
            g = s * (g - (g * s).sum(axis=-1, keepdims=True))
    return g[0]


def replay_scores(graph, layer_index, activation):
    """Class scores from replaying layers after layer_index on a substituted
    activation (batched). layer_index -1 replays the whole graph."""
    x = E.constant(np.asarray(activation, dtype=np.float64))
    for i in range(layer_index + 1, len(graph.layers)):
        x = _layer_forward(graph.layers[i], x)
    return x.value


def central_difference(f, a, h):
    """(f(a+h) - f(a-h)) / 2h elementwise for scalar-argument f."""
    return (f(a + h) - f(a - h)) / (2.0 * h)


def finite_difference(graph, image, class_index, layer_index, h=1e-4):
    """Central-difference gradient of S^c w.r.t. one layer's activation,
    by perturb-and-replay. layer_index -1 probes the input itself."""
    if h <= 0:
        raise ValueError("h must be positive")
    _, tape = forward(graph, image)
    base = tape._nodes[layer_index].value
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    base_flat = base.reshape(-1)
    for j in range(base_flat.size):
        orig = base_flat[j]
        base_flat[j] = orig + h
        sp = replay_scores(graph, layer_index, base)[0, class_index]
        base_flat[j] = orig - h
        sm = replay_scores(graph, layer_index, base)[0, class_index]
        base_flat[j] = orig
        flat[j] = (sp - sm) / (2.0 * h)
    return out[0]
