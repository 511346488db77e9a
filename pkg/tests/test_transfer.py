"""Network-level restriction, prolongation, and coarse-grid corrections."""

import numpy as np
import pytest

from _builders import explicit_transfer_matrices, random_conv_net, random_dense_net
from mlfas.coarsening import Matching, build_transfer, identity_transfer
from mlfas.conv import ConvLayer
from mlfas.nets import (
    DenseLayer,
    Network,
    dense_network,
    flatten,
    forward,
    unflatten,
)
from mlfas.transfer import (
    InterfaceTransfer,
    TransferLevel,
    coarse_grid_correction,
    coarsen_network,
    prolong_params,
    refresh_weights,
    restrict_gradient,
    restrict_network,
    restrict_params,
)


def identity_level(net):
    counts = net.unit_counts()
    interfaces = [
        InterfaceTransfer(op=identity_transfer(c), input_op=identity_transfer(c))
        for c in counts
    ]
    # dense layers reading a flattened channel tensor need the expanded size
    for k, layer in enumerate(net.layers):
        if not isinstance(layer, ConvLayer):
            interfaces[k].input_op = identity_transfer(layer.n_in)
    kinds = ["conv" if isinstance(l, ConvLayer) else "dense" for l in net.layers]
    return TransferLevel(interfaces, kinds)


def random_coarsened(rng, conv=False):
    net = random_conv_net(rng) if conv else random_dense_net(rng, widths=(4, 20))
    t = coarsen_network(net, theta=-1.0, weighted=bool(rng.integers(0, 2)))
    return net, t


def random_coarse_vec(rng, t, x):
    xc = restrict_params(t, x)
    return type(xc)(rng.normal(size=xc.total_len), xc.segments)


class TestRestrict:
    def test_identity_ops_leave_params(self):
        rng = np.random.default_rng(3)
        net = random_dense_net(rng)
        x = flatten(net)
        out = restrict_params(identity_level(net), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_example_duplicated_neurons(self):
        w0 = np.array([[1.0, 0.0], [1.0, 0.0]])
        w1 = np.array([[2.0, 3.0]])
        net = Network([DenseLayer(w0, np.zeros(2)), DenseLayer(w1, np.zeros(1))])
        pair = Matching(partner=np.array([1, 0]), aggregate=np.array([0, 0]),
                        num_aggregates=1)
        interfaces = [
            InterfaceTransfer(op=identity_transfer(2), input_op=identity_transfer(2)),
            InterfaceTransfer(op=build_transfer(pair), input_op=build_transfer(pair),
                              matching=pair),
            InterfaceTransfer(op=identity_transfer(1), input_op=identity_transfer(1)),
        ]
        t = TransferLevel(interfaces, ["dense", "dense"])
        xc = restrict_params(t, flatten(net))
        np.testing.assert_allclose(xc.view(0, "weight"), [[1.0, 0.0]], atol=0)
        np.testing.assert_allclose(xc.view(1, "weight"), [[5.0]], atol=0)  # columns summed

    @pytest.mark.parametrize("conv", [False, True])
    def test_pi_p_identity_on_coarse_space(self, conv):
        rng = np.random.default_rng(7 + conv)
        for _ in range(10):
            net, t = random_coarsened(rng, conv=conv)
            xc = random_coarse_vec(rng, t, flatten(net))
            back = restrict_params(t, prolong_params(t, xc))
            assert np.abs(back.data - xc.data).max() < 1e-12

    def test_restriction_of_prolonged_fixed_point(self):
        rng = np.random.default_rng(11)
        net, t = random_coarsened(rng)
        x = flatten(net)
        xc = restrict_params(t, x)
        np.testing.assert_allclose(
            restrict_params(t, prolong_params(t, xc)).data, xc.data, atol=1e-13
        )


class TestProlong:
    def test_identity_ops(self):
        rng = np.random.default_rng(13)
        net = random_dense_net(rng)
        x = flatten(net)
        np.testing.assert_array_equal(prolong_params(identity_level(net), x).data, x.data)

    @pytest.mark.parametrize("conv", [False, True])
    def test_against_explicit_sparse_oracle(self, conv):
        rng = np.random.default_rng(17 + conv)
        net, t = random_coarsened(rng, conv=conv)
        x = flatten(net)
        xc = random_coarse_vec(rng, t, x)
        _, big_p, _ = explicit_transfer_matrices(t, x.segments)
        ref = big_p @ xc.data
        got = prolong_params(t, xc).data
        assert np.abs(got - ref).max() < 1e-13 * max(1.0, np.abs(ref).max())


class TestRestrictGradient:
    @pytest.mark.parametrize("conv", [False, True])
    def test_adjoint_identity(self, conv):
        rng = np.random.default_rng(19 + conv)
        for _ in range(10):
            net, t = random_coarsened(rng, conv=conv)
            x = flatten(net)
            xc = random_coarse_vec(rng, t, x)
            y = type(x)(rng.normal(size=x.total_len), x.segments)
            lhs = prolong_params(t, xc).data @ y.data
            rhs = xc.data @ restrict_gradient(t, y).data
            assert abs(lhs - rhs) < 1e-12 * (1.0 + abs(lhs))

    def test_identity_ops(self):
        rng = np.random.default_rng(23)
        net = random_dense_net(rng)
        g = flatten(net)
        np.testing.assert_array_equal(restrict_gradient(identity_level(net), g).data, g.data)

    def test_explicit_matrix_oracle(self):
        rng = np.random.default_rng(29)
        net, t = random_coarsened(rng, conv=True)
        g = flatten(net)
        _, _, big_r = explicit_transfer_matrices(t, g.segments)
        ref = big_r @ g.data
        got = restrict_gradient(t, g).data
        assert np.abs(got - ref).max() < 1e-12 * max(1.0, np.abs(ref).max())

    def test_bias_blocks_use_output_side_transpose(self):
        # the adjoint of bias prolongation p_{k+1} b_c is p_{k+1}^T b
        rng = np.random.default_rng(31)
        net, t = random_coarsened(rng)
        g = flatten(net)
        out = restrict_gradient(t, g)
        for k in range(net.n_layers):
            ref = t.interfaces[k + 1].op.p.T @ g.view(k, "bias")
            np.testing.assert_allclose(out.view(k, "bias"), ref, atol=1e-14)


class TestCoarseGridCorrection:
    def test_zero_coarse_movement(self):
        rng = np.random.default_rng(37)
        net, t = random_coarsened(rng)
        x = flatten(net)
        xc = restrict_params(t, x)
        out = coarse_grid_correction(x, xc, t, alpha=0.7)
        np.testing.assert_array_equal(out.data, x.data)

    def test_alpha_zero(self):
        rng = np.random.default_rng(41)
        net, t = random_coarsened(rng)
        x = flatten(net)
        xc = random_coarse_vec(rng, t, x)
        out = coarse_grid_correction(x, xc, t, alpha=0.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_identity_transfers_alpha_one(self):
        rng = np.random.default_rng(43)
        net = random_dense_net(rng)
        t = identity_level(net)
        x = flatten(net)
        xc = type(x)(rng.normal(size=x.total_len), x.segments)
        out = coarse_grid_correction(x, xc, t, alpha=1.0)
        np.testing.assert_allclose(out.data, xc.data, atol=1e-15)


class TestRestrictNetwork:
    def test_identity_transfer_copies_structure(self):
        rng = np.random.default_rng(47)
        net = random_dense_net(rng)
        coarse = restrict_network(net, identity_level(net))
        assert coarse.unit_counts() == net.unit_counts()
        np.testing.assert_array_equal(flatten(coarse).data, flatten(net).data)

    @pytest.mark.parametrize("weighted", [False, True])
    def test_forward_exact_on_duplicated_hidden_neurons(self, weighted):
        rng = np.random.default_rng(53)
        w0 = rng.normal(size=(6, 4))
        w0[3:] = w0[:3]
        b0 = rng.normal(size=6)
        b0[3:] = b0[:3]
        w1 = rng.normal(size=(2, 6))
        net = Network([DenseLayer(w0, b0), DenseLayer(w1, rng.normal(size=2))])
        t = coarsen_network(net, theta=0.999, weighted=weighted)
        coarse = restrict_network(net, t)
        assert coarse.unit_counts()[1] == 3
        for _ in range(5):
            y = rng.normal(size=4)
            fine_out = forward(net, y)
            np.testing.assert_allclose(forward(coarse, y), fine_out,
                                       atol=1e-12 * max(1.0, np.abs(fine_out).max()))

    def test_coarse_has_fewer_params_when_any_pair_matched(self):
        rng = np.random.default_rng(59)
        net, t = random_coarsened(rng)
        coarse = restrict_network(net, t)
        matched_pairs = any(
            i.matching is not None and i.matching.num_aggregates < i.matching.n
            for i in t.interfaces
        )
        assert matched_pairs
        assert coarse.param_count() < net.param_count()

    def test_conv_structure_preserved(self):
        rng = np.random.default_rng(61)
        net, t = random_coarsened(rng, conv=True)
        coarse = restrict_network(net, t)
        for fine_l, coarse_l in zip(net.layers, coarse.layers):
            assert type(fine_l) is type(coarse_l)
            if isinstance(fine_l, ConvLayer):
                assert fine_l.stride == coarse_l.stride
                assert fine_l.padding == coarse_l.padding
                assert fine_l.kernel_size == coarse_l.kernel_size


class TestLevelProperties:
    @pytest.mark.parametrize("conv", [False, True])
    def test_q_idempotent_on_parameter_space(self, conv):
        rng = np.random.default_rng(67 + conv)
        net, t = random_coarsened(rng, conv=conv)
        x = flatten(net)
        v = type(x)(rng.normal(size=x.total_len), x.segments)
        q1 = prolong_params(t, restrict_params(t, v))
        q2 = prolong_params(t, restrict_params(t, q1))
        assert np.abs(q2.data - q1.data).max() < 1e-12 * max(1.0, np.abs(q1.data).max())

    def test_momentum_correction_is_same_operation(self):
        # the momentum update reuses coarse_grid_correction verbatim
        rng = np.random.default_rng(71)
        net, t = random_coarsened(rng)
        x = flatten(net)
        m = type(x)(rng.normal(size=x.total_len), x.segments)
        mc = random_coarse_vec(rng, t, x)
        np.testing.assert_array_equal(
            coarse_grid_correction(m, mc, t, alpha=0.2).data,
            coarse_grid_correction(m, mc, t, alpha=0.2).data,
        )

    def test_refresh_weights_keeps_matchings_and_projection(self):
        rng = np.random.default_rng(73)
        net, t = random_coarsened(rng)
        for layer in net.layers:
            layer.weights += rng.normal(size=layer.weights.shape) * 0.1
        t2 = refresh_weights(t, net, weighted=True)
        for a, b in zip(t.interfaces, t2.interfaces):
            if a.matching is not None:
                np.testing.assert_array_equal(a.matching.partner, b.matching.partner)
        x = flatten(net)
        xc = random_coarse_vec(rng, t2, x)
        back = restrict_params(t2, prolong_params(t2, xc))
        assert np.abs(back.data - xc.data).max() < 1e-12
