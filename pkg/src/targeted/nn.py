"""A small float64 neural-network kernel: dense/conv/max-pool layers,
ReLU, squared-error and softmax cross-entropy heads, reverse-mode
gradients and plain SGD.

Parameters live in one flat vector ``theta``; each layer reads its slice.
Image tensors use (batch, channels, height, width) layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .streams import make_rng

SQUARED_ERROR = "squared-error"
SOFTMAX_CROSS_ENTROPY = "softmax-cross-entropy"
HEADS = (SQUARED_ERROR, SOFTMAX_CROSS_ENTROPY)

CHECKPOINT_MAGIC = b"TDLNET"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Layer:
    """Base class. ``forward`` returns ``(output, cache)``; ``backward``
    returns ``(grad_input, grad_params)`` with ``grad_params`` flat."""

    kind = "layer"

    def param_count(self) -> int:
        return 0

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, rng: np.random.Generator, last: bool = False) -> np.ndarray:
        return np.zeros(0)

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, grad, cache, params):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int):
        if n_in < 1 or n_out < 1:
            raise ValueError("dense widths must be at least 1")
        self.n_in, self.n_out = int(n_in), int(n_out)

    def param_count(self):
        return self.n_in * self.n_out + self.n_out

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"dense layer expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def init_params(self, rng, last=False):
        gain = 1.0 if last else 2.0  # He scaling ahead of ReLU, LeCun for the output
        w = rng.standard_normal((self.n_in, self.n_out)) * np.sqrt(gain / self.n_in)
        return np.concatenate([w.ravel(), np.zeros(self.n_out)])

    def _split(self, params):
        k = self.n_in * self.n_out
        return params[:k].reshape(self.n_in, self.n_out), params[k:]

    def forward(self, x, params):
        w, b = self._split(params)
        return x @ w + b, x

    def backward(self, grad, cache, params):
        w, _ = self._split(params)
        dw = cache.T @ grad
        db = grad.sum(axis=0)
        return grad @ w.T, np.concatenate([dw.ravel(), db])

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache, params):
        return grad * cache, np.zeros(0)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache, params):
        return grad.reshape(cache), np.zeros(0)


class Conv2d(Layer):
    """Valid (no padding), stride-1 cross-correlation."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        if min(in_channels, out_channels, kernel_size) < 1:
            raise ValueError("conv sizes must be at least 1")
        self.cin, self.cout, self.k = int(in_channels), int(out_channels), int(kernel_size)

    def param_count(self):
        return self.cout * self.cin * self.k * self.k + self.cout

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise ShapeError(f"conv layer expects ({self.cin}, H, W), got {in_shape}")
        _, h, w = in_shape
        if h < self.k or w < self.k:
            raise ShapeError(f"kernel {self.k} larger than spatial extent {h}x{w}")
        return (self.cout, h - self.k + 1, w - self.k + 1)

    def init_params(self, rng, last=False):
        fan_in = self.cin * self.k * self.k
        w = rng.standard_normal((self.cout, fan_in)) * np.sqrt(2.0 / fan_in)
        return np.concatenate([w.ravel(), np.zeros(self.cout)])

    def _split(self, params):
        m = self.cout * self.cin * self.k * self.k
        return params[:m].reshape(self.cout, self.cin * self.k * self.k), params[m:]

    def forward(self, x, params):
        w, b = self._split(params)
        bsz, _, h, wd = x.shape
        ho, wo = h - self.k + 1, wd - self.k + 1
        # (B, C, Ho, Wo, k, k) -> rows of C*k*k patches
        cols = sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, -1)
        out = cols @ w.T + b
        out = out.reshape(bsz, ho, wo, self.cout).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, grad, cache, params, need_input_grad=True):
        cols, in_shape = cache
        w, _ = self._split(params)
        bsz, cin, h, wd = in_shape
        ho, wo = h - self.k + 1, wd - self.k + 1
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.cout)
        dw = g.T @ cols
        db = g.sum(axis=0)
        grads = np.concatenate([dw.ravel(), db])
        if not need_input_grad:
            return None, grads
        dcols = (g @ w).reshape(bsz, ho, wo, cin, self.k, self.k)
        dcols = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))
        dx = np.zeros(in_shape)
        for i in range(self.k):
            for j in range(self.k):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        return dx, grads

    def describe(self):
        return {"kind": self.kind, "in_channels": self.cin, "out_channels": self.cout,
                "kernel_size": self.k}


class MaxPool2d(Layer):
    """Max over ``window x window`` patches; trailing rows/columns that do
    not fill a window are dropped (floor)."""

    kind = "maxpool2d"

    def __init__(self, window: int = 2, stride: Optional[int] = None):
        self.window = int(window)
        self.stride = int(stride if stride is not None else window)
        if self.window < 1 or self.stride < 1:
            raise ValueError("pool window and stride must be at least 1")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"max-pool expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ShapeError(f"pool window {self.window} larger than spatial extent {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def forward(self, x, params):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, grad, cache, params):
        arg, in_shape = cache
        k, s = self.window, self.stride
        ho, wo = arg.shape[2], arg.shape[3]
        dx = np.zeros(in_shape)
        for di in range(k):
            for dj in range(k):
                hit = arg == di * k + dj
                if hit.any():
                    dx[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s] += grad * hit
        return dx, np.zeros(0)

    def describe(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Flatten, Conv2d, MaxPool2d)}


def layer_from_description(desc: dict) -> Layer:
    kind = desc["kind"]
    if kind == "dense":
        return Dense(desc["in"], desc["out"])
    if kind == "conv2d":
        return Conv2d(desc["in_channels"], desc["out_channels"], desc["kernel_size"])
    if kind == "maxpool2d":
        return MaxPool2d(desc["window"], desc["stride"])
    if kind in LAYER_TYPES:
        return LAYER_TYPES[kind]()
    raise ValueError(f"unknown layer kind {kind!r}")


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple
    input_shape: tuple
    head: str
    theta: np.ndarray

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        shape = tuple(self.input_shape)
        offsets = [0]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            offsets.append(offsets[-1] + layer.param_count())
        if len(shape) != 1:
            raise ShapeError(f"network must end in a flat output, ends in {shape}")
        if self.head == SQUARED_ERROR and shape != (1,):
            raise ShapeError("squared-error head needs a single output")
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (offsets[-1],):
            raise ShapeError(f"expected {offsets[-1]} parameters, got {theta.shape}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "_offsets", tuple(offsets))
        object.__setattr__(self, "output_dim", shape[0])

    @property
    def param_count(self) -> int:
        return len(self.theta)

    def layer_params(self, i: int) -> np.ndarray:
        return self.theta[self._offsets[i]:self._offsets[i + 1]]

    def with_parameters(self, theta) -> "Network":
        return Network(self.layers, self.input_shape, self.head, theta)

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "head": self.head,
                "layers": [layer.describe() for layer in self.layers]}


def _init_network(layers: Sequence[Layer], input_shape: tuple, head: str,
                  rng: np.random.Generator) -> Network:
    weighted = [i for i, layer in enumerate(layers) if layer.param_count()]
    chunks = [layer.init_params(rng, last=(i == weighted[-1])) for i, layer in enumerate(layers)]
    theta = np.concatenate(chunks) if chunks else np.zeros(0)
    return Network(tuple(layers), tuple(input_shape), head, theta)


def build_mlp(p: int, hidden: Sequence[int], head: str, rng: np.random.Generator,
              n_classes: Optional[int] = None) -> Network:
    """Dense-ReLU stack ending in a linear layer feeding ``head``."""
    if p < 1 or any(h < 1 for h in hidden):
        raise ValueError("input dimension and widths must be at least 1")
    out = 1 if head == SQUARED_ERROR else int(n_classes)
    layers, width = [], p
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers.append(Dense(width, out))
    return _init_network(layers, (p,), head, rng)


def build_convnet(image_shape: tuple = (1, 28, 28), kernel_sizes: Sequence[int] = (3, 5),
                  channels: Sequence[int] = (16, 32), n_classes: int = 10,
                  rng: Optional[np.random.Generator] = None, pool: int = 2) -> Network:
    """Conv-ReLU-MaxPool blocks, then Flatten and a dense layer to the logits."""
    rng = rng if rng is not None else make_rng()
    if len(kernel_sizes) != len(channels):
        raise ValueError("one channel count per kernel size")
    shape = tuple(image_shape)
    layers = []
    for k, c in zip(kernel_sizes, channels):
        block = [Conv2d(shape[0], c, k), ReLU(), MaxPool2d(pool, pool)]
        for layer in block:
            shape = layer.output_shape(shape)
        layers += block
    layers += [Flatten(), Dense(int(np.prod(shape)), n_classes)]
    return _init_network(layers, tuple(image_shape), SOFTMAX_CROSS_ENTROPY, rng)


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    size = int(np.prod(net.input_shape))
    if x.ndim == len(net.input_shape):
        x = x[None]
    if x.shape[1:] == tuple(net.input_shape):
        return x
    if x.ndim == 2 and x.shape[1] == size:
        return x.reshape((x.shape[0],) + tuple(net.input_shape))
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def _forward_cached(net: Network, x):
    caches = []
    for i, layer in enumerate(net.layers):
        x, cache = layer.forward(x, net.layer_params(i))
        caches.append(cache)
    return x, caches


def forward(net: Network, inputs) -> np.ndarray:
    """Predictions of shape (batch, outputs); logits for classification."""
    out, _ = _forward_cached(net, _as_input(net, inputs))
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def head_loss(head: str, out: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient with respect to ``out``."""
    bsz = out.shape[0]
    if head == SQUARED_ERROR:
        resid = out[:, 0] - np.asarray(labels, dtype=np.float64)
        return float(np.mean(resid ** 2)), (2.0 * resid / bsz)[:, None]
    y = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(out)
    loss = -float(np.mean(logp[np.arange(bsz), y]))
    grad = np.exp(logp)
    grad[np.arange(bsz), y] -= 1.0
    return loss, grad / bsz


def loss_and_gradient(net: Network, inputs, labels) -> tuple[float, np.ndarray]:
    x = _as_input(net, inputs)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    if len(labels) != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {len(labels)} labels")
    out, caches = _forward_cached(net, x)
    loss, grad = head_loss(net.head, out, labels)
    pieces = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, 0, -1):
        grad, pieces[i] = net.layers[i].backward(grad, caches[i], net.layer_params(i))
    first = net.layers[0]
    if isinstance(first, Conv2d):
        _, pieces[0] = first.backward(grad, caches[0], net.layer_params(0), need_input_grad=False)
    else:
        _, pieces[0] = first.backward(grad, caches[0], net.layer_params(0))
    return loss, np.concatenate(pieces)


def sgd_step(net: Network, gradient, learning_rate: float) -> Network:
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != net.theta.shape:
        raise ShapeError(f"gradient length {gradient.shape} != parameter count {net.param_count}")
    return net.with_parameters(net.theta - learning_rate * gradient)


METRICS = ("squared-error", "cross-entropy", "zero-one", "accuracy")


def evaluate(net: Network, inputs, labels, metric: str, batch_size: int = 2048) -> float:
    """Mean squared error, mean cross-entropy, zero-one error or accuracy."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    x = _as_input(net, inputs)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {len(labels)} labels")
    out = np.concatenate([forward(net, x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])
    if metric == "squared-error":
        return float(np.mean((out[:, 0] - labels) ** 2))
    if metric == "cross-entropy":
        logp = log_softmax(out)
        return -float(np.mean(logp[np.arange(len(labels)), labels.astype(np.int64)]))
    wrong = float(np.mean(out.argmax(axis=1) != labels))
    return wrong if metric == "zero-one" else 1.0 - wrong


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, net: Network) -> None:
    """``MAGIC | u32 version | u32 header length | JSON header | <f8 theta``."""
    from .io import atomic_write

    header = json.dumps(net.describe(), sort_keys=True).encode("utf-8")
    with atomic_write(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(net.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = len(CHECKPOINT_MAGIC)
    if raw[:m] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack("<II", raw[m:m + 8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[m + 8:m + 8 + hlen].decode("utf-8"))
    theta = np.frombuffer(raw[m + 8 + hlen:], dtype="<f8").astype(np.float64)
    layers = tuple(layer_from_description(d) for d in header["layers"])
    return Network(layers, tuple(header["input_shape"]), header["head"], theta)
