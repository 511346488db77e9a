"""Shared random-instance builders for the test suite."""

import numpy as np

from mlfas.conv import ConvLayer
from mlfas.nets import DenseLayer, Network, dense_network, uniform_init


def random_dense_net(rng, n_hidden=None, widths=(4, 64), io=(3, 12), **kwargs):
    """Random fully-connected net with 1-3 hidden layers."""
    if n_hidden is None:
        n_hidden = int(rng.integers(1, 4))
    sizes = [int(rng.integers(io[0], io[1] + 1))]
    sizes += [int(rng.integers(widths[0], widths[1] + 1)) for _ in range(n_hidden)]
    sizes.append(int(rng.integers(io[0], io[1] + 1)))
    return dense_network(sizes, rng=rng, **kwargs)


def random_conv_net(rng, max_channels=8, spatial=6, **kwargs):
    """Random conv+dense net: 1-2 conv layers then 1-2 dense layers."""
    c_in = int(rng.integers(1, 4))
    h = w = spatial
    layers = []
    shape = (c_in, h, w)
    for _ in range(int(rng.integers(1, 3))):
        out_c = int(rng.integers(2, max_channels + 1))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        if (shape[1] + 2 * pad - k) // stride + 1 < 1:
            k, stride, pad = 1, 1, 0
        layer = ConvLayer(
            np.zeros((out_c, shape[0], k, k)), np.zeros(out_c),
            stride=(stride, stride), padding=(pad, pad),
        )
        oh = (shape[1] + 2 * pad - k) // stride + 1
        ow = (shape[2] + 2 * pad - k) // stride + 1
        layers.append(layer)
        shape = (out_c, oh, ow)
    flat = shape[0] * shape[1] * shape[2]
    hidden = int(rng.integers(4, 17))
    layers.append(DenseLayer(np.zeros((hidden, flat)), np.zeros(hidden)))
    out = int(rng.integers(2, 7))
    layers.append(DenseLayer(np.zeros((out, hidden)), np.zeros(out)))
    net = Network(layers, input_shape=(c_in, h, w), **kwargs)
    return uniform_init(net, rng)


def random_batch(rng, net, size=5):
    from mlfas.nets import Minibatch

    return Minibatch(
        rng.normal(size=(size, net.input_size)),
        rng.normal(size=(size, net.output_size)),
    )


def explicit_transfer_matrices(t, segments):
    """Assemble full restriction/interpolation matrices from the layer ops.

    Independent assembly route (kron + block-diag over the segment order)
    used as an oracle against the blockwise implementation.  Row-major vec
    of A X B is (A kron B^T) vec(X); conv kernels carry an extra identity
    over the kernel taps.
    """
    import scipy.sparse as sp

    pi_blocks, p_blocks = [], []
    for seg in segments:
        k = seg.layer
        out_op = t.interfaces[k + 1].op
        if seg.kind == "bias":
            pi_blocks.append(out_op.pi)
            p_blocks.append(out_op.p)
        elif len(seg.shape) == 4:
            taps = sp.identity(seg.shape[2] * seg.shape[3])
            in_op = t.interfaces[k].op
            pi_blocks.append(sp.kron(out_op.pi, sp.kron(in_op.p.T, taps)))
            p_blocks.append(sp.kron(out_op.p, sp.kron(in_op.pi.T, taps)))
        else:
            in_op = t.interfaces[k].input_op
            pi_blocks.append(sp.kron(out_op.pi, in_op.p.T))
            p_blocks.append(sp.kron(out_op.p, in_op.pi.T))
    big_pi = sp.block_diag(pi_blocks, format="csr")
    big_p = sp.block_diag(p_blocks, format="csr")
    return big_pi, big_p, big_p.T.tocsr()
