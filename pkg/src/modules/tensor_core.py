"""
Dense tensor kernels with reverse-mode gradients, the layer chain used by every
network role, the ADAM optimizer and the FBPOSE-W1 weights container.

Images are laid out N×C×H×W, vectors N×D. The public kernels (``conv2d``,
``maxpool``, ``unpool2x``, ``dense``) also accept a single unbatched sample.
"""
from dataclasses import dataclass, field, asdict, replace
import json
import logging
import struct

import numpy as np

from src.modules.utils import ShapeMismatchError, TrainingFault, FormatError

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"FBPOSE-W1"
LAYER_KINDS = ("conv", "strided-conv", "dense", "maxpool", "unpool2x", "dropout",
               "activation", "flatten", "reshape")
ACTIVATIONS = ("relu", "tanh", "linear")


# ---------------------------------------------------------------------------
# Functional kernels
# ---------------------------------------------------------------------------

def conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def im2col(x, kernel, stride, padding):
    """
    Image to column transformation.

    Returns
    -------
    cols : (N, C*k*k, H_out*W_out), C-contiguous
    """
    n, c, h, w = x.shape
    h_out = conv_output_extent(h, kernel, stride, padding)
    w_out = conv_output_extent(w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    s_n, s_c, s_h, s_w = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kernel, kernel, h_out, w_out),
        strides=(s_n, s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return patches.reshape(n, c * kernel * kernel, h_out * w_out)


def col2im(cols, x_shape, kernel, stride, padding):
    """Scatter columns back to an image, summing overlapping contributions."""
    n, c, h, w = x_shape
    h_out = conv_output_extent(h, kernel, stride, padding)
    w_out = conv_output_extent(w, kernel, stride, padding)
    cols = cols.reshape(n, c, kernel, kernel, h_out, w_out)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


def _batched(x, sample_ndim):
    x = np.asarray(x)
    if x.ndim == sample_ndim:
        return x[None], True
    return x, False


def conv2d(input, kernels, stride=1, padding=0, bias=None):
    """
    2D cross-correlation.

    Args:
        input: C×H×W or N×C×H×W array.
        kernels: F×C×k×k filters.
        stride: Step between output samples, at least 1.
        padding: Zero padding on every side.
        bias: Optional length-F offsets.

    Returns:
        F×H'×W' (or N×F×H'×W') array with H' = floor((H + 2·pad − k)/stride) + 1.
    """
    x, single = _batched(input, 3)
    kernels = np.asarray(kernels)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernels.ndim != 4 or x.ndim != 4 or kernels.shape[1] != x.shape[1] \
            or kernels.shape[2] != kernels.shape[3]:
        raise ShapeMismatchError("conv2d input and kernels do not conform", x.shape, kernels.shape)
    k = kernels.shape[2]
    h_out = conv_output_extent(x.shape[2], k, stride, padding)
    w_out = conv_output_extent(x.shape[3], k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeMismatchError("conv2d kernel larger than padded input", x.shape, kernels.shape)
    cols = im2col(x, k, stride, padding)
    out = np.matmul(kernels.reshape(kernels.shape[0], -1), cols)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None]
    out = out.reshape(x.shape[0], kernels.shape[0], h_out, w_out)
    return out[0] if single else out


def unpool2x(input):
    """Doubles both spatial axes; the input lands on even coordinates, zeros elsewhere."""
    x, single = _batched(input, 3)
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = x
    return out[0] if single else out


def maxpool(input, window):
    x, single = _batched(input, 3)
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeMismatchError(f"maxpool window {window} does not divide the spatial extent", x.shape)
    out = x.reshape(n, c, h // window, window, w // window, window).max(axis=(3, 5))
    return out[0] if single else out


def _maxpool_backward(grad, x, window):
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    blocks = x.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, window * window)
    # ties go to the first maximum in row-major window order
    winner = blocks.argmax(axis=-1)
    routed = np.zeros_like(blocks)
    np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
    routed = routed.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
    return routed.reshape(n, c, h, w)


def dense(input, weights, bias):
    """Affine map ``W x + b`` with W of shape (out, in)."""
    x, single = _batched(input, 1)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeMismatchError("dense input, weights and bias do not conform",
                                 x.shape, weights.shape, bias.shape)
    out = x @ weights.T + bias
    return out[0] if single else out


def activate(x, fn):
    if fn == "relu":
        return np.maximum(x, 0)
    if fn == "tanh":
        return np.tanh(x)
    if fn == "linear":
        return x
    raise ValueError(f"unknown activation {fn!r}")


def activation_backward(grad, x, y, fn):
    if fn == "relu":
        # subgradient 0 at x == 0
        return grad * (x > 0)
    if fn == "tanh":
        return grad * (1.0 - y * y)
    return grad


# ---------------------------------------------------------------------------
# Layer specs and layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    extent: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 2
    units: int = 0
    rate: float = 0.0
    activation: str = "linear"
    shape: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind in ("conv", "strided-conv") and (self.filters < 1 or self.extent < 1 or self.stride < 1):
            raise ValueError(f"invalid convolution spec {self}")

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["shape"] = tuple(d.get("shape", ()))
        return cls(**d)


def conv(filters, extent, padding=None):
    return LayerSpec("conv", filters=filters, extent=extent, stride=1,
                     padding=extent // 2 if padding is None else padding)


def strided_conv(filters, extent, stride=2, padding=None):
    return LayerSpec("strided-conv", filters=filters, extent=extent, stride=stride,
                     padding=extent // 2 if padding is None else padding)


def fc(units):
    return LayerSpec("dense", units=units)


def pool(window):
    return LayerSpec("maxpool", window=window)


def up():
    return LayerSpec("unpool2x")


def drop(rate):
    return LayerSpec("dropout", rate=rate)


def act(fn):
    return LayerSpec("activation", activation=fn)


def flatten():
    return LayerSpec("flatten")


def reshape(*shape):
    return LayerSpec("reshape", shape=tuple(shape))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def __init__(self, spec, input_shape):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.output_shape = self.input_shape
        self.params = []
        self.grads = []
        self._cache = None

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class ConvLayer(Layer):
    def __init__(self, spec, input_shape, rng, dtype):
        super().__init__(spec, input_shape)
        if len(self.input_shape) != 3:
            raise ShapeMismatchError("convolution needs C×H×W input", self.input_shape)
        c, h, w = self.input_shape
        k, s, p = spec.extent, spec.stride, spec.padding
        h_out, w_out = conv_output_extent(h, k, s, p), conv_output_extent(w, k, s, p)
        if h_out < 1 or w_out < 1:
            raise ShapeMismatchError("convolution kernel larger than its input", self.input_shape, (k, k))
        self.output_shape = (spec.filters, h_out, w_out)
        kernels = glorot_uniform(rng, (spec.filters, c, k, k), c * k * k, spec.filters * k * k, dtype)
        self.params = [kernels, np.zeros(spec.filters, dtype=dtype)]

    def forward(self, x, training, rng):
        kernels, bias = self.params
        cols = im2col(x, self.spec.extent, self.spec.stride, self.spec.padding)
        self._cache = (cols, x.shape)
        out = np.matmul(kernels.reshape(kernels.shape[0], -1), cols) + bias[None, :, None]
        return out.reshape((x.shape[0],) + self.output_shape)

    def backward(self, grad):
        kernels, _ = self.params
        cols, x_shape = self._cache
        g = grad.reshape(grad.shape[0], grad.shape[1], -1)
        w2 = kernels.reshape(kernels.shape[0], -1)
        d_kernels = np.einsum("nfl,nkl->fk", g, cols).reshape(kernels.shape)
        d_bias = g.sum(axis=(0, 2))
        d_cols = np.matmul(w2.T, g)
        self.grads = [d_kernels, d_bias]
        return col2im(d_cols, x_shape, self.spec.extent, self.spec.stride, self.spec.padding)


class DenseLayer(Layer):
    def __init__(self, spec, input_shape, rng, dtype):
        super().__init__(spec, input_shape)
        if len(self.input_shape) != 1:
            raise ShapeMismatchError("dense layer needs a flat input", self.input_shape)
        n_in = self.input_shape[0]
        self.output_shape = (spec.units,)
        self.params = [glorot_uniform(rng, (spec.units, n_in), n_in, spec.units, dtype),
                       np.zeros(spec.units, dtype=dtype)]

    def forward(self, x, training, rng):
        self._cache = x
        return x @ self.params[0].T + self.params[1]

    def backward(self, grad):
        x = self._cache
        self.grads = [grad.T @ x, grad.sum(axis=0)]
        return grad @ self.params[0]


class MaxPoolLayer(Layer):
    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        c, h, w = self.input_shape
        if h % spec.window or w % spec.window:
            raise ShapeMismatchError(f"maxpool window {spec.window} does not divide the spatial extent",
                                     self.input_shape)
        self.output_shape = (c, h // spec.window, w // spec.window)

    def forward(self, x, training, rng):
        self._cache = x
        return maxpool(x, self.spec.window)

    def backward(self, grad):
        return _maxpool_backward(grad, self._cache, self.spec.window)


class UnpoolLayer(Layer):
    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        c, h, w = self.input_shape
        self.output_shape = (c, 2 * h, 2 * w)

    def forward(self, x, training, rng):
        return unpool2x(x)

    def backward(self, grad):
        return grad[:, :, ::2, ::2]


class DropoutLayer(Layer):
    def forward(self, x, training, rng):
        if not training or self.spec.rate == 0.0:
            self._cache = None
            return x
        keep = 1.0 - self.spec.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


class ActivationLayer(Layer):
    def forward(self, x, training, rng):
        y = activate(x, self.spec.activation)
        self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cache
        return activation_backward(grad, x, y, self.spec.activation)


class ReshapeLayer(Layer):
    def __init__(self, spec, input_shape):
        super().__init__(spec, input_shape)
        size = int(np.prod(self.input_shape))
        target = (size,) if spec.kind == "flatten" else tuple(spec.shape)
        if int(np.prod(target)) != size:
            raise ShapeMismatchError("reshape changes the element count", self.input_shape, target)
        self.output_shape = target

    def forward(self, x, training, rng):
        return x.reshape((x.shape[0],) + self.output_shape)

    def backward(self, grad):
        return grad.reshape((grad.shape[0],) + self.input_shape)


def make_layer(spec, input_shape, rng, dtype):
    if spec.kind in ("conv", "strided-conv"):
        return ConvLayer(spec, input_shape, rng, dtype)
    if spec.kind == "dense":
        return DenseLayer(spec, input_shape, rng, dtype)
    if spec.kind == "maxpool":
        return MaxPoolLayer(spec, input_shape)
    if spec.kind == "unpool2x":
        return UnpoolLayer(spec, input_shape)
    if spec.kind == "dropout":
        return DropoutLayer(spec, input_shape)
    if spec.kind == "activation":
        return ActivationLayer(spec, input_shape)
    return ReshapeLayer(spec, input_shape)


class Network:
    """
    A directed chain of layers with retained intermediates.

    ``forward`` keeps what each layer needs for ``backward``; ``backward`` fills
    ``grads`` (same order and shapes as ``params``) and returns the gradient with
    respect to the network input.
    """

    def __init__(self, specs, input_shape, seed=0, dtype=np.float64):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        init_rng = np.random.default_rng([self.seed, 0])
        self.dropout_rng = np.random.default_rng([self.seed, 1])
        self.layers = []
        shape = self.input_shape
        for spec in self.specs:
            layer = make_layer(spec, shape, init_rng, self.dtype)
            self.layers.append(layer)
            shape = layer.output_shape
        self.output_shape = shape
        self._forwarded = False

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @params.setter
    def params(self, values):
        values = list(values)
        i = 0
        for layer in self.layers:
            n = len(layer.params)
            for j in range(n):
                if values[i + j].shape != layer.params[j].shape:
                    raise ShapeMismatchError("parameter shape changed", values[i + j].shape,
                                             layer.params[j].shape)
            layer.params = [np.asarray(v, dtype=self.dtype) for v in values[i:i + n]]
            i += n
        if i != len(values):
            raise ShapeMismatchError("wrong number of parameter arrays", (len(values),), (i,))

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def parameter_names(self):
        names = []
        for i, layer in enumerate(self.layers):
            names.extend(f"{i}.{name}" for name in ("W", "b")[:len(layer.params)])
        return names

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatchError("network input shape", x.shape[1:], self.input_shape)
        for layer in self.layers:
            x = layer.forward(x, training, self.dropout_rng)
        self._forwarded = True
        return x

    def backward(self, grad):
        if not self._forwarded:
            raise RuntimeError("backward called before forward")
        grad = np.asarray(grad, dtype=self.dtype)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            grad = layer.backward(grad)
            if not np.all(np.isfinite(grad)) or any(not np.all(np.isfinite(g)) for g in layer.grads):
                raise TrainingFault("non-finite gradient", layer=index)
        return grad

    def __call__(self, x):
        return self.forward(x, training=False)

    def copy_prefix_from(self, other, n_layers):
        """Take the parameters of the first ``n_layers`` layers from ``other``."""
        for mine, theirs in zip(self.layers[:n_layers], other.layers[:n_layers]):
            if mine.spec != theirs.spec or mine.input_shape != theirs.input_shape:
                raise ShapeMismatchError("layer prefix differs", mine.input_shape, theirs.input_shape)
            mine.params = [p.copy() for p in theirs.params]


def backprop(network, grad_output):
    """
    Gradients of all parameters and of the input for the last forward pass.

    Returns:
        tuple: (list of parameter gradients, input gradient)
    """
    grad_input = network.backward(grad_output)
    return network.grads, grad_input


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    learning_rate: float = 1e-3
    initial_rate: float = 1e-3
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params, learning_rate=1e-3, decay=0.95):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, initial_rate=learning_rate, decay=decay)


def start_epoch(state, epoch):
    """Learning rate for ``epoch`` (0-based) under per-epoch multiplicative decay."""
    return replace(state, learning_rate=state.initial_rate * state.decay ** epoch)


def adam_step(params, grads, state):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("adam parameter lists differ in length",
                                 (len(params),), (len(grads),), (len(state.m),))
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError("gradient does not match its parameter", g.shape, p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params.append((p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------------------
# FBPOSE-W1 container
# ---------------------------------------------------------------------------

@dataclass
class NetworkWeights:
    """A loaded weights file: the network plus named attachments and metadata."""
    network: Network
    attachments: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_weights(path, network, attachments=None, meta=None):
    attachments = {k: np.asarray(v, dtype=np.float64) for k, v in (attachments or {}).items()}
    dtype = network.dtype.newbyteorder("<")
    header = {
        "architecture": [s.to_dict() for s in network.specs],
        "input_shape": list(network.input_shape),
        "dtype": dtype.str,
        "seed": network.seed,
        "params": [{"name": n, "shape": list(p.shape)}
                   for n, p in zip(network.parameter_names(), network.params)],
        "attachments": [{"name": k, "shape": list(v.shape)} for k, v in sorted(attachments.items())],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in network.params:
            f.write(np.ascontiguousarray(p, dtype=dtype).tobytes())
        for k in sorted(attachments):
            f.write(np.ascontiguousarray(attachments[k], dtype="<f8").tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(WEIGHTS_MAGIC):
        raise FormatError(f"{path} is not an FBPOSE-W1 file")
    offset = len(WEIGHTS_MAGIC)
    try:
        (length,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    offset += length
    dtype = np.dtype(header["dtype"])
    network = Network([LayerSpec.from_dict(s) for s in header["architecture"]],
                      header["input_shape"], seed=header["seed"], dtype=dtype.newbyteorder("="))

    def take(shape, dt):
        nonlocal offset
        count = int(np.prod(shape))
        if offset + count * dt.itemsize > len(data):
            raise FormatError(f"{path} is truncated")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape)
        offset += count * dt.itemsize
        return arr.astype(dt.newbyteorder("="))

    network.params = [take(tuple(p["shape"]), dtype) for p in header["params"]]
    attachments = {a["name"]: take(tuple(a["shape"]), np.dtype("<f8")) for a in header["attachments"]}
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return NetworkWeights(network, attachments, header["meta"])
