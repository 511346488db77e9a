"""Feedforward networks with hand-written backpropagation.

A network is an ordered list of dense and/or convolutional layers sharing a
componentwise activation.  Convolutional layers, when present, must precede
the dense layers; the interface flattens channel-major.  All learnable
parameters can be viewed as one flat vector whose segment order is all
weight blocks (by layer) followed by all bias blocks (by layer); momentum
vectors reuse the same layout.
"""

from dataclasses import dataclass

import numpy as np

from .conv import ConvLayer, ConvShapeError, conv_backward_batch, conv_forward_batch


class NetworkShapeError(ValueError):
    """Layer dimension chaining violation, naming the offending layer."""


class ParamLayoutError(ValueError):
    """Flat parameter vector does not match the network's layout."""


@dataclass
class DenseLayer:
    """Affine layer: weights (n_out, n_in), bias (n_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise NetworkShapeError(f"weights must be 2-d, got shape {self.weights.shape}")
        if min(self.weights.shape) < 1:
            raise NetworkShapeError(f"weights must be nonempty, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise NetworkShapeError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} rows"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("dense layer parameters must be finite")

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class LossValue:
    """Mean squared error and worst componentwise absolute error."""

    l2: float
    linf: float


@dataclass
class Minibatch:
    """Paired sample arrays: inputs (B, d_in), targets (B, d_out)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] == 0:
            raise ValueError("minibatch must be nonempty")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"inputs hold {self.inputs.shape[0]} samples, targets {self.targets.shape[0]}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _flat_size(desc) -> int:
    if desc[0] == "flat":
        return desc[1]
    _, c, h, w = desc
    return c * h * w


class Network:
    """Layer stack with a shared activation.

    ``output_activation`` controls whether the activation is also applied to
    the final layer; regression setups normally keep a linear output head.
    ``input_shape`` is an int for flat inputs or (channels, height, width)
    when the first layer is convolutional.
    """

    def __init__(
        self,
        layers,
        activation: str = "relu",
        leak: float = 0.01,
        output_activation: bool = False,
        input_shape=None,
    ):
        if len(layers) < 1:
            raise NetworkShapeError("a network needs at least one layer")
        if activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = list(layers)
        self.activation = activation
        self.leak = float(leak)
        self.output_activation = bool(output_activation)
        if input_shape is None:
            first = self.layers[0]
            if isinstance(first, ConvLayer):
                raise NetworkShapeError(
                    "input_shape=(channels, height, width) is required for a conv first layer"
                )
            input_shape = first.n_in
        if isinstance(input_shape, (tuple, list)):
            self.input_shape = tuple(int(v) for v in input_shape)
        else:
            self.input_shape = int(input_shape)
        self.interfaces = self._trace_shapes()

    def _trace_shapes(self):
        """Per-interface descriptors ('flat', n) or ('chan', c, h, w)."""
        if isinstance(self.input_shape, tuple):
            if len(self.input_shape) != 3:
                raise NetworkShapeError(
                    f"channel input shape must be (C, H, W), got {self.input_shape}"
                )
            desc = ("chan",) + self.input_shape
        else:
            desc = ("flat", self.input_shape)
        descs = [desc]
        seen_dense = False
        for k, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                if seen_dense or desc[0] != "chan":
                    raise NetworkShapeError(
                        f"layer {k} (conv): convolutional layers must precede dense layers"
                    )
                if desc[1] != layer.in_channels:
                    raise NetworkShapeError(
                        f"layer {k} (conv): expects {layer.in_channels} input channels, "
                        f"interface provides {desc[1]}"
                    )
                try:
                    oh, ow = layer.out_spatial(desc[2], desc[3])
                except ConvShapeError as e:
                    raise NetworkShapeError(f"layer {k} (conv): {e}") from e
                desc = ("chan", layer.out_channels, oh, ow)
            elif isinstance(layer, DenseLayer):
                seen_dense = True
                if _flat_size(desc) != layer.n_in:
                    raise NetworkShapeError(
                        f"layer {k} (dense): expects input size {layer.n_in}, "
                        f"interface provides {_flat_size(desc)}"
                    )
                desc = ("flat", layer.n_out)
            else:
                raise TypeError(f"layer {k}: unsupported layer type {type(layer).__name__}")
            descs.append(desc)
        return descs

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_size(self) -> int:
        return _flat_size(self.interfaces[0])

    @property
    def output_size(self) -> int:
        return _flat_size(self.interfaces[-1])

    def unit_counts(self) -> list[int]:
        """Neuron/channel count at every interface (len n_layers + 1)."""
        counts = []
        for desc in self.interfaces:
            counts.append(desc[1])
        return counts

    def interface_spatial(self, k: int) -> int:
        """Spatial multiplicity at interface k (1 for flat interfaces)."""
        desc = self.interfaces[k]
        if desc[0] == "flat":
            return 1
        return desc[2] * desc[3]

    def param_count(self) -> int:
        total = 0
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                total += layer.kernels.size + layer.bias.size
            else:
                total += layer.weights.size + layer.bias.size
        return total

    def copy(self) -> "Network":
        layers = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                layers.append(
                    ConvLayer(layer.kernels.copy(), layer.bias.copy(), layer.stride, layer.padding)
                )
            else:
                layers.append(DenseLayer(layer.weights.copy(), layer.bias.copy()))
        return Network(
            layers,
            activation=self.activation,
            leak=self.leak,
            output_activation=self.output_activation,
            input_shape=self.input_shape,
        )


def _act(net: Network, z: np.ndarray) -> np.ndarray:
    if net.activation == "relu":
        return np.maximum(z, 0.0)
    return np.where(z > 0.0, z, net.leak * z)


def _act_grad(net: Network, z: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken on the inactive branch
    if net.activation == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    return np.where(z > 0.0, 1.0, net.leak)


def _forward_cached(net: Network, x: np.ndarray):
    """Batched forward pass keeping per-layer (input, pre-activation) caches."""
    a = x
    caches = []
    n_last = net.n_layers - 1
    for k, layer in enumerate(net.layers):
        desc = net.interfaces[k]
        if isinstance(layer, ConvLayer):
            a = a.reshape(a.shape[0], desc[1], desc[2], desc[3])
            z = conv_forward_batch(layer, a)
        else:
            a = a.reshape(a.shape[0], -1)
            z = a @ layer.weights.T + layer.bias
        caches.append((a, z))
        if k < n_last or net.output_activation:
            a = _act(net, z)
        else:
            a = z
    return a.reshape(a.shape[0], -1), caches


def forward_batch(net: Network, x) -> np.ndarray:
    """Evaluate the network on rows of x; returns (B, output_size)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.input_size:
        raise NetworkShapeError(
            f"input size {x.shape[1]} does not match network input {net.input_size}"
        )
    out, _ = _forward_cached(net, x)
    return out


def forward(net: Network, y_in) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    y_in = np.asarray(y_in, dtype=np.float64).ravel()
    return forward_batch(net, y_in[None])[0]


def loss(net: Network, batch: Minibatch) -> LossValue:
    """Mean squared error over the batch plus the worst absolute error."""
    preds = forward_batch(net, batch.inputs)
    if preds.shape[1] != batch.targets.shape[1]:
        raise NetworkShapeError(
            f"network output size {preds.shape[1]} != target size {batch.targets.shape[1]}"
        )
    err = preds - batch.targets
    l2 = float(np.mean(np.sum(err * err, axis=1)))
    linf = float(np.max(np.abs(err)))
    return LossValue(l2=l2, linf=linf)


def backward(net: Network, batch: Minibatch) -> "ParamVector":
    """Gradient of the batch-mean squared loss, as a flat parameter vector."""
    x = np.atleast_2d(np.asarray(batch.inputs, dtype=np.float64))
    if x.shape[1] != net.input_size:
        raise NetworkShapeError(
            f"input size {x.shape[1]} does not match network input {net.input_size}"
        )
    preds, caches = _forward_cached(net, x)
    b = x.shape[0]
    g = (2.0 / b) * (preds - batch.targets)

    grads = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        layer = net.layers[k]
        a_k, z_k = caches[k]
        if k < net.n_layers - 1 or net.output_activation:
            dz = g.reshape(z_k.shape) * _act_grad(net, z_k)
        else:
            dz = g.reshape(z_k.shape)
        if isinstance(layer, ConvLayer):
            gk, gb, g = conv_backward_batch(layer, a_k, dz)
            grads[k] = (gk, gb)
        else:
            grads[k] = (dz.T @ a_k, dz.sum(axis=0))
            if k > 0:
                g = dz @ layer.weights

    out = ParamVector.zeros(param_layout(net))
    for k, (gw, gb) in enumerate(grads):
        out.view(k, "weight")[...] = gw
        out.view(k, "bias")[...] = gb
    return out


@dataclass(frozen=True)
class Segment:
    """One contiguous block of the flat parameter vector."""

    layer: int
    kind: str  # "weight" | "bias"
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat float64 view of all learnable parameters (or momentum).

    Segment order is the unroll order: every layer's weight block first,
    then every layer's bias block.
    """

    __slots__ = ("data", "segments", "_index")

    def __init__(self, data: np.ndarray, segments: tuple[Segment, ...]):
        self.data = np.asarray(data, dtype=np.float64).ravel()
        self.segments = tuple(segments)
        expected = sum(s.size for s in self.segments)
        if self.data.size != expected:
            raise ParamLayoutError(
                f"data length {self.data.size} != layout total {expected}"
            )
        self._index = {(s.layer, s.kind): s for s in self.segments}

    @property
    def total_len(self) -> int:
        return self.data.size

    def view(self, layer: int, kind: str) -> np.ndarray:
        seg = self._index[(layer, kind)]
        return self.data[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.segments)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.segments)

    @classmethod
    def zeros(cls, segments) -> "ParamVector":
        total = sum(s.size for s in segments)
        return cls(np.zeros(total), segments)


def param_layout(net: Network) -> tuple[Segment, ...]:
    """Segment layout for a network: weight blocks by layer, then biases."""
    segments = []
    offset = 0
    for k, layer in enumerate(net.layers):
        shape = layer.kernels.shape if isinstance(layer, ConvLayer) else layer.weights.shape
        seg = Segment(layer=k, kind="weight", offset=offset, shape=shape)
        segments.append(seg)
        offset += seg.size
    for k, layer in enumerate(net.layers):
        seg = Segment(layer=k, kind="bias", offset=offset, shape=layer.bias.shape)
        segments.append(seg)
        offset += seg.size
    return tuple(segments)


def flatten(net: Network) -> ParamVector:
    """Copy all parameters into one flat vector in unroll order."""
    pv = ParamVector.zeros(param_layout(net))
    for k, layer in enumerate(net.layers):
        w = layer.kernels if isinstance(layer, ConvLayer) else layer.weights
        pv.view(k, "weight")[...] = w
        pv.view(k, "bias")[...] = layer.bias
    return pv


def unflatten(net: Network, x: ParamVector) -> None:
    """Install the flat vector's values back into the network's layers."""
    expected = param_layout(net)
    if x.segments != expected:
        raise ParamLayoutError(
            f"parameter vector layout (total {x.total_len}) does not match "
            f"network layout (total {sum(s.size for s in expected)})"
        )
    for k, layer in enumerate(net.layers):
        w = layer.kernels if isinstance(layer, ConvLayer) else layer.weights
        w[...] = x.view(k, "weight")
        layer.bias[...] = x.view(k, "bias")


def axpy_params(x: ParamVector, alpha: float, d: ParamVector) -> ParamVector:
    """Elementwise x + alpha * d over matching layouts."""
    if x.segments != d.segments:
        raise ParamLayoutError("parameter vectors have different layouts")
    return ParamVector(x.data + alpha * d.data, x.segments)


def uniform_init(net: Network, rng: np.random.Generator) -> Network:
    """Seeded fan-in uniform init: entries in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
            bound = 1.0 / np.sqrt(fan_in)
            layer.kernels[...] = rng.uniform(-bound, bound, size=layer.kernels.shape)
        else:
            bound = 1.0 / np.sqrt(layer.n_in)
            layer.weights[...] = rng.uniform(-bound, bound, size=layer.weights.shape)
        layer.bias[...] = rng.uniform(-bound, bound, size=layer.bias.shape)
    return net


def dense_network(
    sizes,
    activation: str = "relu",
    output_activation: bool = False,
    rng: np.random.Generator | None = None,
) -> Network:
    """Fully-connected network through the given interface sizes."""
    if len(sizes) < 2:
        raise NetworkShapeError("need at least an input and an output size")
    layers = [
        DenseLayer(np.zeros((sizes[k + 1], sizes[k])), np.zeros(sizes[k + 1]))
        for k in range(len(sizes) - 1)
    ]
    net = Network(layers, activation=activation, output_activation=output_activation)
    if rng is not None:
        uniform_init(net, rng)
    return net
