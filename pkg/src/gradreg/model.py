"""Softmax regression and sigmoid MLPs with input-gradient backprop.

Weights are stored as ``(fan_out, fan_in)`` matrices, so for softmax
regression the pre-softmax Jacobian is the weight matrix itself. Every
function accepts a single input vector ``(d,)`` or a batch ``(N, d)``.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numcore import ShapeError

SIGMOID = "sigmoid"
IDENTITY = "identity"
_ACT_TAGS = {IDENTITY: 0, SIGMOID: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}

LOG_FLOOR = 1e-300
MODEL_MAGIC = b"GRMP"
MODEL_VERSION = 1

_clamp_events = 0


def log_clamp_count():
    """Number of times a zero probability was clamped inside the loss."""
    return _clamp_events


def reset_log_clamp_count():
    global _clamp_events
    _clamp_events = 0


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = SIGMOID

    @property
    def fan_in(self):
        return self.weight.shape[1]

    @property
    def fan_out(self):
        return self.weight.shape[0]


@dataclass
class MlpModel:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(
                    f"layer dims do not chain: {prev.fan_out} -> {nxt.fan_in}")
        for layer in self.layers:
            if layer.activation not in _ACT_TAGS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.fan_out,):
                raise ShapeError("bias length must equal layer fan-out")

    @property
    def in_dim(self):
        return self.layers[0].fan_in

    @property
    def num_classes(self):
        return self.layers[-1].fan_out

    def copy(self):
        return MlpModel([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])

    def parameters(self):
        """Flat list of parameter arrays: W0, b0, W1, b1, ..."""
        return [a for l in self.layers for a in (l.weight, l.bias)]


def init_mlp(sizes, rng, activation=SIGMOID):
    """Glorot-uniform weights, zero biases.

    ``sizes`` is ``[d, h1, ..., K]``; ``[d, K]`` gives softmax regression.
    Hidden layers use ``activation``; the last layer is linear and feeds
    the softmax head.
    """
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        act = IDENTITY if i == len(sizes) - 2 else activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(layers)


def softmax(o):
    z = o - o.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardTrace:
    pre_activations: list  # (N, width) per layer
    activations: list  # activations[0] is the input batch
    y: np.ndarray  # (N, K) softmax output
    batched: bool = True

    @property
    def o(self):
        return self.activations[-1]

    def probs(self):
        return self.y if self.batched else self.y[0]

    def logits(self):
        return self.o if self.batched else self.o[0]


def _as_batch(x, model):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    x2 = x if batched else x[None, :]
    if x2.ndim != 2 or x2.shape[1] != model.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.in_dim}")
    return x2, batched


def forward(model, x):
    x2, batched = _as_batch(x, model)
    pre, acts = [], [x2]
    a = x2
    for layer in model.layers:
        z = a @ layer.weight.T + layer.bias
        a = _sigmoid(z) if layer.activation == SIGMOID else z
        pre.append(z)
        acts.append(a)
    return ForwardTrace(pre, acts, softmax(a), batched)


def logits_from_first_preactivation(model, z):
    """Softmax inputs given the first layer's pre-activation ``W0 x + b0``."""
    for i, layer in enumerate(model.layers):
        if i:
            z = a @ layer.weight.T + layer.bias
        a = _sigmoid(z) if layer.activation == SIGMOID else z
    return a


def predict(model, x):
    """Argmax class; ties go to the lowest index."""
    return np.argmax(forward(model, x).probs(), axis=-1)


def weight_penalty(model):
    return sum(float(np.sum(l.weight * l.weight)) for l in model.layers)


def example_losses(trace, t):
    """Per-example cross entropy -log y_l, clamped at LOG_FLOOR."""
    global _clamp_events
    t2 = np.atleast_2d(t)
    yl = np.sum(trace.y * t2, axis=1)
    small = yl < LOG_FLOOR
    if small.any():
        _clamp_events += int(small.sum())
        warnings.warn("probability of the target class underflowed; clamped",
                      RuntimeWarning, stacklevel=2)
        yl = np.maximum(yl, LOG_FLOOR)
    return -np.log(yl)


def loss_xent(trace, t, model, weight_decay=0.0):
    """Mean cross entropy plus ``weight_decay * sum(W**2)`` (biases excluded)."""
    loss = float(np.mean(example_losses(trace, t)))
    if weight_decay:
        loss += weight_decay * weight_penalty(model)
    return loss


@dataclass
class GradBundle:
    """Loss and gradients from one backward pass.

    For a batch, ``loss`` and ``grad_params`` refer to the mean loss while
    row ``n`` of ``grad_input`` is the gradient of example ``n``'s own loss.
    """
    loss: float
    grad_input: np.ndarray
    grad_params: list = field(default_factory=list)  # [(dW, db), ...]
    losses: np.ndarray = None


def _backward(model, trace, delta, weight_decay=0.0, mean=True):
    """Propagate d(loss)/d(o) = ``delta`` down to the inputs."""
    n = delta.shape[0]
    scale = 1.0 / n if mean else 1.0
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dw = scale * (delta.T @ trace.activations[i])
        if weight_decay:
            dw = dw + 2.0 * weight_decay * layer.weight
        grads[i] = (dw, scale * delta.sum(axis=0))
        delta = delta @ layer.weight
        if i > 0 and model.layers[i - 1].activation == SIGMOID:
            a = trace.activations[i]
            delta = delta * a * (1.0 - a)
    return delta, grads


def backprop(model, x, t, weight_decay=0.0, trace=None):
    if trace is None:
        trace = forward(model, x)
    t2 = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if t2.shape != trace.y.shape:
        raise ShapeError(f"target shape {np.shape(t)} does not match output {trace.y.shape}")
    losses = example_losses(trace, t2)
    loss = float(losses.mean())
    if weight_decay:
        loss += weight_decay * weight_penalty(model)
    grad_x, grads = _backward(model, trace, trace.y - t2, weight_decay)
    if not trace.batched:
        grad_x = grad_x[0]
    return GradBundle(loss, grad_x, grads, losses)


def input_gradient(model, x, t):
    """Per-example gradient of the (undecayed) loss w.r.t. the inputs."""
    return backprop(model, x, t).grad_input


def presoftmax_jacobian(model, x):
    """K x d Jacobian of the softmax inputs ``o`` w.r.t. a single input ``x``.

    Runs one backward pass per output unit, batched as K copies of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("presoftmax_jacobian takes a single input vector")
    k = model.num_classes
    trace = forward(model, np.repeat(x[None, :], k, axis=0))
    jac, _ = _backward(model, trace, np.eye(k), mean=False)
    return jac


def max_norm_project(model, c):
    """Cap the L2 norm of every hidden unit's incoming weights at ``c``."""
    if c <= 0:
        raise ValueError("max-norm bound must be positive")
    out = model.copy()
    for layer in out.layers[:-1]:
        norms = np.sqrt(np.sum(layer.weight ** 2, axis=1))
        over = norms > c
        layer.weight[over] *= (c / norms[over])[:, None]
    return out


def gn_identity_residual(y, label):
    """Max |grad grad^T - Hessian| of -log y_label w.r.t. the probabilities y.

    Both sides are built analytically; for a one-hot target they coincide.
    The Hessian entry t_l / y_l^2 is evaluated as (t_l / y_l)^2 (t_l is 0
    or 1), so an exact identity is not blurred by reciprocal rounding.
    """
    y = np.asarray(y, dtype=np.float64)
    t = np.zeros_like(y)
    t[label] = 1.0
    grad = -t / y
    outer = np.outer(grad, grad)
    hess = np.diag((t / y) ** 2)
    return float(np.max(np.abs(outer - hess)))


def save_model(model, path):
    """Write the binary model file described in the README."""
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(model.layers))]
    for l in model.layers:
        parts.append(struct.pack("<III", l.fan_in, l.fan_out, _ACT_TAGS[l.activation]))
    for l in model.layers:
        parts.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_model(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (magic {raw[:4]!r})")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 12
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<III", raw, off))
        off += 12
    layers = []
    for fan_in, fan_out, tag in dims:
        nw = fan_in * fan_out
        w = np.frombuffer(raw, dtype="<f8", count=nw, offset=off).reshape(fan_out, fan_in)
        off += 8 * nw
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), _TAG_ACTS[tag]))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return MlpModel(layers)
