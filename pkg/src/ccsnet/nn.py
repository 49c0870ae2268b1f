"""Feedforward networks in numpy: inference, input gradients, Hessian-vector
products and SGD training.

Every layer works on a batch ``(B, ...)`` and implements four passes:

* ``forward``           primal values, caching what later passes need
* ``backward``          reverse mode: output cotangent -> input cotangent
* ``tangent_forward``   forward mode along an input direction
* ``tangent_backward``  forward-over-reverse: the directional derivative of
                        ``backward`` along the tangents from ``tangent_forward``

Running the last two after a backward pass seeded with ``e_k`` gives
``H_k v`` exactly (no finite differences). Kinks follow the lower-branch
convention: ReLU'(0) = 0 and max-pooling routes to the first maximal entry
in row-major window order.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ccsnet.errors import FormatError, LengthError, ShapeError

ACTIVATIONS = ("identity", "sigmoid", "relu")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_KIND_CODES = {"dense": 0, "conv2d": 1, "maxpool2d": 2}

NNC_MAGIC = b"NNC1"
NNC_VERSION = 1


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(name: str, z):
    """Return (phi(z), phi'(z), phi''(z))."""
    if name == "identity":
        zero = np.zeros_like(z)
        return z, np.ones_like(z), zero
    if name == "sigmoid":
        s = sigmoid(z)
        d1 = s * (1.0 - s)
        return s, d1, d1 * (1.0 - 2.0 * s)
    if name == "relu":
        on = z > 0
        return np.where(on, z, 0.0), on.astype(z.dtype), np.zeros_like(z)
    raise ValueError(f"unknown activation {name!r}")


class Dense:
    kind = "dense"

    def __init__(self, weights, biases, activation="identity"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    @property
    def in_size(self):
        return self.weights.shape[1]

    @property
    def out_size(self):
        return self.weights.shape[0]

    def params(self):
        return [self.weights, self.biases]

    def forward(self, a, cache):
        z = a @ self.weights.T + self.biases
        out, d1, d2 = activate(self.activation, z)
        cache.update(a=a, d1=d1, d2=d2)
        return out

    def backward(self, g, cache):
        gz = g * cache["d1"]
        cache.update(g=g, gz=gz)
        return gz @ self.weights

    def param_grads(self, cache):
        gz = cache["gz"]
        return [gz.T @ cache["a"], gz.sum(axis=0)]

    def tangent_forward(self, da, cache):
        dz = da @ self.weights.T
        cache["dz"] = dz
        return cache["d1"] * dz

    def tangent_backward(self, dg, cache):
        dgz = cache["d2"] * cache["dz"] * cache["g"] + cache["d1"] * dg
        return dgz @ self.weights


def _windows(x, k):
    # (B, C, H, W) padded -> (B, C, H', W', k, k) strided view
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


class Conv2d:
    """5x5 convolution, stride 1, zero padding 2 (spatial size preserved)."""

    kind = "conv2d"
    kernel = 5
    padding = 2

    def __init__(self, weights, biases, height, width, activation="identity"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        out_c, in_c, kh, kw = self.weights.shape
        if (kh, kw) != (self.kernel, self.kernel) or self.biases.shape != (out_c,):
            raise ShapeError(
                f"conv weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.height, self.width = int(height), int(width)
        self.activation = activation

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_size(self):
        return self.in_channels * self.height * self.width

    @property
    def out_size(self):
        return self.out_channels * self.height * self.width

    def params(self):
        return [self.weights, self.biases]

    def _pad(self, x):
        p = self.padding
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _conv(self, x, w):
        # x (B, C, H, W), w (O, C, k, k) -> (B, O, H, W)
        win = _windows(self._pad(x), self.kernel)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)

    def _conv_t(self, g):
        # adjoint of _conv with self.weights
        flipped = self.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        return self._conv(g, flipped)

    def _shape(self, a):
        return a.reshape(a.shape[0], self.in_channels, self.height, self.width)

    def forward(self, a, cache):
        x = self._shape(a)
        z = self._conv(x, self.weights) + self.biases[None, :, None, None]
        out, d1, d2 = activate(self.activation, z)
        cache.update(x=x, d1=d1, d2=d2)
        return out.reshape(a.shape[0], -1)

    def backward(self, g, cache):
        g = g.reshape(cache["d1"].shape)
        gz = g * cache["d1"]
        cache.update(g=g, gz=gz)
        return self._conv_t(gz).reshape(g.shape[0], -1)

    def param_grads(self, cache):
        gz = cache["gz"]
        win = _windows(self._pad(cache["x"]), self.kernel)
        gw = np.tensordot(gz, win, axes=([0, 2, 3], [0, 2, 3]))
        return [gw, gz.sum(axis=(0, 2, 3))]

    def tangent_forward(self, da, cache):
        dz = self._conv(self._shape(da), self.weights)
        cache["dz"] = dz
        return (cache["d1"] * dz).reshape(da.shape[0], -1)

    def tangent_backward(self, dg, cache):
        dg = dg.reshape(cache["d1"].shape)
        dgz = cache["d2"] * cache["dz"] * cache["g"] + cache["d1"] * dg
        return self._conv_t(dgz).reshape(dg.shape[0], -1)


class MaxPool2d:
    """2x2 max pooling, stride 2; ties go to the first entry in row-major order."""

    kind = "maxpool2d"
    kernel = 2
    activation = "identity"

    def __init__(self, channels, height, width):
        if height % 2 or width % 2:
            raise ShapeError(f"pooling needs even spatial dims, got {height}x{width}")
        self.channels, self.height, self.width = int(channels), int(height), int(width)

    @property
    def in_size(self):
        return self.channels * self.height * self.width

    @property
    def out_size(self):
        return self.in_size // 4

    def params(self):
        return []

    def _blocks(self, a):
        b = a.shape[0]
        c, h, w = self.channels, self.height // 2, self.width // 2
        x = a.reshape(b, c, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5)
        return x.reshape(b, c, h, w, 4)

    def _scatter(self, g, idx):
        b = g.shape[0]
        c, h, w = self.channels, self.height // 2, self.width // 2
        full = np.zeros((b, c, h, w, 4))
        np.put_along_axis(full, idx[..., None], g.reshape(b, c, h, w, 1), axis=-1)
        full = full.reshape(b, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return full.reshape(b, -1)

    def forward(self, a, cache):
        blocks = self._blocks(a)
        idx = blocks.argmax(axis=-1)
        cache["idx"] = idx
        return np.take_along_axis(blocks, idx[..., None], axis=-1).reshape(a.shape[0], -1)

    def backward(self, g, cache):
        return self._scatter(g, cache["idx"])

    def param_grads(self, cache):
        return []

    def tangent_forward(self, da, cache):
        blocks = self._blocks(da)
        return np.take_along_axis(blocks, cache["idx"][..., None], axis=-1).reshape(
            da.shape[0], -1
        )

    def tangent_backward(self, dg, cache):
        return self._scatter(dg, cache["idx"])


@dataclass
class Network:
    layers: list
    input_dim: int = field(init=False)
    output_dim: int = field(init=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ShapeError(
                    f"layer sizes do not chain: {prev.out_size} -> {nxt.in_size}"
                )
        self.input_dim = self.layers[0].in_size
        self.output_dim = self.layers[-1].out_size

    @property
    def activations(self):
        return {layer.activation for layer in self.layers if layer.params()}

    @property
    def uses_relu(self):
        """ReLU nets have no usable Hessian, so c must be supplied."""
        return "relu" in self.activations

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def init_mlp(input_dim, hidden, output_dim, activation="sigmoid", seed=0) -> Network:
    """Dense network with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, output_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = activation if i < len(sizes) - 2 else "identity"
        layers.append(Dense(w, b, act))
    return Network(layers)


def init_cnn(
    side=28, channels=(16, 32), hidden=200, output_dim=10, activation="sigmoid", seed=0
) -> Network:
    """Two conv(5x5)+pool blocks followed by one hidden dense layer."""
    rng = np.random.default_rng(seed)
    layers = []
    in_c, h = 1, side
    for out_c in channels:
        bound = 1.0 / np.sqrt(in_c * 25)
        w = rng.uniform(-bound, bound, size=(out_c, in_c, 5, 5))
        b = rng.uniform(-bound, bound, size=out_c)
        layers.append(Conv2d(w, b, h, h, activation))
        layers.append(MaxPool2d(out_c, h, h))
        in_c, h = out_c, h // 2
    flat = in_c * h * h
    for fan_in, fan_out, act in ((flat, hidden, activation), (hidden, output_dim, "identity")):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            Dense(
                rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                rng.uniform(-bound, bound, size=fan_out),
                act,
            )
        )
    return Network(layers)


def _as_batch(net: Network, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ShapeError(f"expected inputs of length {net.input_dim}, got shape {x.shape}")
    return xb, single


def _run_forward(net, xb, caches=None, dropout=0.0, rng=None):
    a = xb
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        cache = {} if caches is None else caches[i]
        a = layer.forward(a, cache)
        if dropout and i < last and layer.kind == "dense":
            keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            cache["keep"] = keep
            a = a * keep
    return a


def forward(net: Network, x):
    """Logits for one input (d,) or a batch (B, d); dropout is never applied."""
    xb, single = _as_batch(net, x)
    out = _run_forward(net, xb)
    return out[0] if single else out


def _check_output(net, k):
    if not 0 <= k < net.output_dim:
        raise IndexError(f"output index {k} out of range for {net.output_dim} outputs")


def _backward(net, caches, seed):
    g = seed
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        if "keep" in cache:
            g = g * cache["keep"]
        g = layer.backward(g, cache)
    return g


def input_gradient(net: Network, x, k: int):
    """Reverse-mode gradient of logit ``k`` with respect to the input."""
    _check_output(net, k)
    xb, single = _as_batch(net, x)
    caches = [{} for _ in net.layers]
    out = _run_forward(net, xb, caches)
    seed = np.zeros_like(out)
    seed[:, k] = 1.0
    g = _backward(net, caches, seed)
    return g[0] if single else g


def value_and_gradients(net: Network, x):
    """Logits (B, K) and input gradients of every logit (K, B, d)."""
    xb, _ = _as_batch(net, x)
    caches = [{} for _ in net.layers]
    out = _run_forward(net, xb, caches)
    grads = np.empty((net.output_dim, *xb.shape))
    for k in range(net.output_dim):
        seed = np.zeros_like(out)
        seed[:, k] = 1.0
        grads[k] = _backward(net, caches, seed)
    return out, grads


class HessianOperator:
    """``v -> H_k(x) v`` for a fixed batch of points.

    The primal forward and reverse passes are computed once; each call runs
    only the two tangent passes. Row ``i`` of the argument is the direction
    for point ``i``.
    """

    def __init__(self, net: Network, x, k: int):
        _check_output(net, k)
        xb, self._single = _as_batch(net, x)
        self.net = net
        self.k = k
        self.caches = [{} for _ in net.layers]
        out = _run_forward(net, xb, self.caches)
        seed = np.zeros_like(out)
        seed[:, k] = 1.0
        self.gradient = _backward(net, self.caches, seed)
        self.shape = xb.shape

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        vb = v[None, :] if v.ndim == 1 else v
        if vb.shape != self.shape:
            raise ShapeError(f"direction shape {v.shape} does not match points {self.shape}")
        dg = vb
        for layer, cache in zip(self.net.layers, self.caches):
            dg = layer.tangent_forward(dg, cache)
        dg = np.zeros_like(dg)  # the output seed e_k is constant
        for layer, cache in zip(reversed(self.net.layers), reversed(self.caches)):
            dg = layer.tangent_backward(dg, cache)
        return dg[0] if v.ndim == 1 else dg


def hvp(net: Network, x, k: int, v):
    """Hessian-vector product of logit ``k`` at ``x`` along ``v``."""
    return HessianOperator(net, x, k)(v)


def predict(net: Network, data_inputs, batch=2048):
    out = [forward(net, data_inputs[i : i + batch]) for i in range(0, len(data_inputs), batch)]
    return np.concatenate(out) if out else np.empty((0, net.output_dim))


def accuracy(net: Network, data) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) is the label."""
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(net, data.inputs).argmax(axis=1) == data.labels))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    momentum: float = 0.9
    dropout: float = 0.5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train(net: Network, train_set, cfg: TrainConfig, callback=None) -> Network:
    """SGD with momentum, inverted dropout on hidden dense outputs.

    Works on a copy; ``callback(epoch, mean_loss, net)`` runs after each epoch.
    A learning rate of zero is allowed and leaves the weights untouched.
    """
    if len(train_set) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train_set.labels.max() >= net.output_dim:
        raise ValueError("labels exceed the number of network outputs")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            caches = [{} for _ in net.layers]
            logits = _run_forward(net, train_set.inputs[idx], caches, cfg.dropout, rng)
            loss, g = softmax_cross_entropy(logits, train_set.labels[idx])
            total += loss * idx.size
            _backward(net, caches, g)
            grads = [gp for layer, c in zip(net.layers, caches) for gp in layer.param_grads(c)]
            for p, v, gp in zip(params, velocity, grads):
                v *= cfg.momentum
                v += gp
                p -= cfg.learning_rate * v
        if callback is not None:
            callback(epoch, total / n, net)
    return net


# ---------------------------------------------------------------- serialization
#
# NNC1 layout (little-endian):
#   b"NNC1", u32 version, u32 layer_count, u32 input_dim, u32 output_dim
#   per layer: u8 kind, u8 activation, then
#     dense:     u32 in, u32 out
#     conv2d:    u32 in_c, u32 out_c, u32 height, u32 width, u32 kernel
#     maxpool2d: u32 channels, u32 height, u32 width, u32 kernel
#   then, for each parametric layer in order, float64 weights (row-major)
#   followed by float64 biases.


def save_network(net: Network, path) -> None:
    head = [NNC_MAGIC, struct.pack("<IIII", NNC_VERSION, len(net.layers), net.input_dim, net.output_dim)]
    body = []
    for layer in net.layers:
        head.append(struct.pack("<BB", _KIND_CODES[layer.kind], _ACT_CODES[layer.activation]))
        if layer.kind == "dense":
            head.append(struct.pack("<II", layer.in_size, layer.out_size))
        elif layer.kind == "conv2d":
            head.append(
                struct.pack(
                    "<5I", layer.in_channels, layer.out_channels, layer.height, layer.width, layer.kernel
                )
            )
        else:
            head.append(struct.pack("<4I", layer.channels, layer.height, layer.width, layer.kernel))
        for p in layer.params():
            body.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(head + body))


class _Reader:
    def __init__(self, raw, name):
        self.raw, self.pos, self.name = raw, 0, name

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise LengthError(f"{self.name}: truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def floats(self, shape):
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.raw):
            raise LengthError(f"{self.name}: truncated float payload at byte {self.pos}")
        arr = np.frombuffer(self.raw, dtype="<f8", count=count, offset=self.pos)
        self.pos += 8 * count
        return arr.reshape(shape).astype(np.float64)


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != NNC_MAGIC:
        raise FormatError(f"{path}: expected magic {NNC_MAGIC!r}, got {raw[:4]!r}")
    r = _Reader(raw, str(path))
    r.pos = 4
    version, n_layers, input_dim, output_dim = r.unpack("<IIII")
    if version != NNC_VERSION:
        raise FormatError(f"{path}: unsupported NNC version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    specs = []
    for _ in range(n_layers):
        kind_code, act_code = r.unpack("<BB")
        if kind_code not in kinds or act_code >= len(ACTIVATIONS):
            raise FormatError(f"{path}: bad layer tag ({kind_code}, {act_code})")
        kind = kinds[kind_code]
        dims = r.unpack({"dense": "<II", "conv2d": "<5I", "maxpool2d": "<4I"}[kind])
        specs.append((kind, ACTIVATIONS[act_code], dims))
    layers = []
    for kind, act, dims in specs:
        if kind == "dense":
            n_in, n_out = dims
            layers.append(Dense(r.floats((n_out, n_in)), r.floats((n_out,)), act))
        elif kind == "conv2d":
            in_c, out_c, h, w, k = dims
            layers.append(Conv2d(r.floats((out_c, in_c, k, k)), r.floats((out_c,)), h, w, act))
        else:
            c, h, w, _ = dims
            layers.append(MaxPool2d(c, h, w))
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    net = Network(layers)
    if (net.input_dim, net.output_dim) != (input_dim, output_dim):
        raise FormatError(f"{path}: header dims do not match layer dims")
    return net
