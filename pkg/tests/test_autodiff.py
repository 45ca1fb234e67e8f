import numpy as np
import pytest

import freerea.autodiff as ad
from freerea.autodiff import LayerNode, Network, finite_diff_check
from freerea.errors import NoForwardCache, ShapeMismatch
from freerea.netbuilder import MacroSkeleton, build_network
from freerea.searchspace import NatsGenotype, Op

from naive_ops import ref_avgpool3, ref_conv, ref_maxpool3


def small_plan():
    """input -> conv3x3 s1 -> relu -> avgpool s1 -> maxpool s2 -> bn -> gap -> linear."""
    return [
        LayerNode("input", c_out=2),
        LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
        LayerNode("relu", (1,)),
        LayerNode("avgpool", (2,), c_in=3, c_out=3, stride=1),
        LayerNode("maxpool", (3,), c_in=3, c_out=3, stride=2),
        LayerNode("bn", (4,), c_in=3, c_out=3),
        LayerNode("gap", (5,), c_out=3),
        LayerNode("linear", (6,), c_in=3, c_out=2),
    ]


class TestForward:
    def test_matches_scalar_loop_reference(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        x = rng.standard_normal((3, 2, 6, 6))
        got = net.forward(x)

        w_conv = net.params[1][0].values
        scale, shift = (p.values for p in net.params[5])
        w_fc, b_fc = (p.values for p in net.params[7])
        h = ref_conv(x, w_conv, 1)
        h = np.maximum(h, 0.0)
        h = ref_avgpool3(h, 1)
        h = ref_maxpool3(h, 2)
        h = h * scale[None, :, None, None] + shift[None, :, None, None]
        h = h.mean(axis=(2, 3))
        want = h @ w_fc.T + b_fc
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_stride2_conv_matches_reference(self, rng):
        plan = [
            LayerNode("input", c_out=2),
            LayerNode("conv", (0,), c_in=2, c_out=4, kernel=3, stride=2),
            LayerNode("gap", (1,), c_out=4),
            LayerNode("linear", (2,), c_in=4, c_out=2),
        ]
        net = Network(plan, (2, 7, 7), 2, rng)
        x = rng.standard_normal((2, 2, 7, 7))
        net.forward(x)
        got = net._cache[1]
        want = ref_conv(x, net.params[1][0].values, 2)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_conv1x1_matches_reference(self, rng):
        plan = [
            LayerNode("input", c_out=3),
            LayerNode("conv", (0,), c_in=3, c_out=2, kernel=1, stride=1),
            LayerNode("gap", (1,), c_out=2),
            LayerNode("linear", (2,), c_in=2, c_out=2),
        ]
        net = Network(plan, (3, 5, 5), 2, rng)
        x = rng.standard_normal((2, 3, 5, 5))
        net.forward(x)
        np.testing.assert_allclose(net._cache[1],
                                   ref_conv(x, net.params[1][0].values, 1),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_input_zero_bias_gives_zero_logits(self, rng, desk_skeleton):
        g = NatsGenotype(ops=(Op.CONV3X3, Op.SKIP, Op.AVGPOOL3X3,
                              Op.CONV1X1, Op.ZERO, Op.CONV3X3))
        net = build_network(g, desk_skeleton, rng)
        y = net.forward(np.zeros((2, 3, 32, 32)))
        np.testing.assert_array_equal(y, 0.0)

    def test_identity_cell_scales_stem_output(self, rng):
        # all-skip cell: node3 = 4x cell input; single stage, so no reductions
        sk = MacroSkeleton(input_shape=(3, 8, 8), stages=((1, 4),), num_classes=2)
        g = NatsGenotype(ops=(Op.SKIP,) * 6)
        net = build_network(g, sk, rng)
        x = rng.standard_normal((2, 3, 8, 8))
        y = net.forward(x)
        stem_out = net._cache[2]  # input, stem.conv, stem.bn
        w_fc, b_fc = (p.values for p in net.params[max(net.params)])
        want = (4.0 * stem_out).mean(axis=(2, 3)) @ w_fc.T + b_fc
        np.testing.assert_allclose(y, want, rtol=1e-12, atol=1e-12)

    def test_forward_deterministic(self, rng, desk_skeleton):
        g = NatsGenotype(ops=(Op.CONV3X3,) * 6)
        x = rng.standard_normal((1, 3, 32, 32))
        a = build_network(g, desk_skeleton, np.random.default_rng(5)).forward(x)
        b = build_network(g, desk_skeleton, np.random.default_rng(5)).forward(x)
        np.testing.assert_array_equal(a, b)

    def test_input_shape_mismatch(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        with pytest.raises(ShapeMismatch):
            net.forward(np.zeros((1, 3, 6, 6)))

    def test_retain_false_frees_cache(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        net.forward(np.zeros((1, 2, 6, 6)), retain=False)
        with pytest.raises(NoForwardCache):
            net.backward(np.zeros((1, 2)))


class TestBackward:
    def test_linear_closed_form(self, rng):
        # toy: input (3,1,1) -> gap (identity here) -> linear
        plan = [
            LayerNode("input", c_out=3),
            LayerNode("gap", (0,), c_out=3),
            LayerNode("linear", (1,), c_in=3, c_out=2),
        ]
        net = Network(plan, (3, 1, 1), 2, rng)
        x = rng.standard_normal((4, 3, 1, 1))
        net.forward(x)
        g = rng.standard_normal((4, 2))
        net.zero_grad()
        net.backward(g)
        w, b = net.params[2]
        np.testing.assert_allclose(w.grad, g.T @ x[:, :, 0, 0], rtol=1e-12)
        np.testing.assert_allclose(b.grad, g.sum(axis=0), rtol=1e-12)

    def test_gradients_accumulate(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        x = rng.standard_normal((2, 2, 6, 6))
        g = rng.standard_normal((2, 2))
        net.forward(x)
        net.zero_grad()
        net.backward(g)
        once = [p.grad.copy() for p in net.parameters()]
        net.backward(g)
        for p, ref in zip(net.parameters(), once):
            np.testing.assert_allclose(p.grad, 2.0 * ref, rtol=1e-12, atol=0)

    def test_backward_without_forward(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        with pytest.raises(NoForwardCache):
            net.backward(np.zeros((1, 2)))

    @pytest.mark.parametrize("kind_plan", [
        ("conv3", [LayerNode("input", c_out=2),
                   LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
                   LayerNode("gap", (1,), c_out=3),
                   LayerNode("linear", (2,), c_in=3, c_out=2)]),
        ("conv1s2", [LayerNode("input", c_out=2),
                     LayerNode("conv", (0,), c_in=2, c_out=3, kernel=1, stride=2),
                     LayerNode("gap", (1,), c_out=3),
                     LayerNode("linear", (2,), c_in=3, c_out=2)]),
        ("bn", [LayerNode("input", c_out=2),
                LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
                LayerNode("bn", (1,), c_in=3, c_out=3),
                LayerNode("gap", (2,), c_out=3),
                LayerNode("linear", (3,), c_in=3, c_out=2)]),
        ("relu", [LayerNode("input", c_out=2),
                  LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
                  LayerNode("relu", (1,)),
                  LayerNode("gap", (2,), c_out=3),
                  LayerNode("linear", (3,), c_in=3, c_out=2)]),
        ("avgpool", [LayerNode("input", c_out=2),
                     LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
                     LayerNode("avgpool", (1,), c_in=3, c_out=3, stride=2),
                     LayerNode("gap", (2,), c_out=3),
                     LayerNode("linear", (3,), c_in=3, c_out=2)]),
        ("maxpool", [LayerNode("input", c_out=2),
                     LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
                     LayerNode("maxpool", (1,), c_in=3, c_out=3, stride=1),
                     LayerNode("gap", (2,), c_out=3),
                     LayerNode("linear", (3,), c_in=3, c_out=2)]),
        ("sum", [LayerNode("input", c_out=2),
                 LayerNode("conv", (0,), c_in=2, c_out=2, kernel=3, stride=1),
                 LayerNode("sum", (0, 1), c_out=2),
                 LayerNode("gap", (2,), c_out=2),
                 LayerNode("linear", (3,), c_in=2, c_out=2)]),
    ])
    def test_each_op_kind_against_finite_differences(self, kind_plan, rng):
        name, plan = kind_plan
        net = Network(plan, (2, 6, 6), 2, rng)
        x = rng.standard_normal((2, 2, 6, 6))
        report = finite_diff_check(net, x, rng=np.random.default_rng(17), max_coords=200)
        assert report.max_rel_dev < 1e-4, (name, report)


class TestFiniteDiffCheck:
    def test_random_nats_cell_net(self, rng, desk_skeleton):
        from freerea.searchspace import NATS_SPACE, random_genotype
        g = random_genotype(NATS_SPACE, rng)
        net = build_network(g, desk_skeleton, rng)
        x = rng.standard_normal((1, 3, 32, 32))
        report = finite_diff_check(net, x, rng=np.random.default_rng(3), max_coords=60)
        assert report.max_rel_dev < 1e-4

    def test_all_zero_weights_consistent(self, rng):
        net = Network(small_plan(), (2, 6, 6), 2, rng)
        for p in net.parameters():
            p.values[:] = 0.0
        x = rng.standard_normal((1, 2, 6, 6))
        report = finite_diff_check(net, x, rng=np.random.default_rng(4))
        assert report.max_rel_dev < 1e-4

    def test_corrupted_conv_backward_detected(self, rng, monkeypatch):
        original = ad._conv2d_backward

        def corrupted(x, w, stride, gy):
            gx, gw = original(x, w, stride, gy)
            return gx * 1.05, gw

        plan = [
            LayerNode("input", c_out=2),
            LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
            LayerNode("relu", (1,)),
            LayerNode("conv", (2,), c_in=3, c_out=3, kernel=3, stride=1),
            LayerNode("gap", (3,), c_out=3),
            LayerNode("linear", (4,), c_in=3, c_out=2),
        ]
        net = Network(plan, (2, 6, 6), 2, rng)
        x = rng.standard_normal((1, 2, 6, 6))
        monkeypatch.setattr(ad, "_conv2d_backward", corrupted)
        report = finite_diff_check(net, x, rng=np.random.default_rng(5), max_coords=300)
        assert report.max_rel_dev > 1e-2


class TestBNSuppression:
    def test_outputs_independent_of_bn_params(self, rng, desk_skeleton):
        g = NatsGenotype(ops=(Op.CONV3X3, Op.CONV1X1, Op.SKIP,
                              Op.AVGPOOL3X3, Op.CONV3X3, Op.SKIP))
        net = build_network(g, desk_skeleton, rng)
        x = rng.standard_normal((1, 3, 32, 32))
        base = net.forward(x, suppress_bn=True)
        for nid, node in enumerate(net.nodes):
            if node.kind == "bn":
                for p in net.params[nid]:
                    p.values += rng.standard_normal(p.values.shape)
        perturbed = net.forward(x, suppress_bn=True)
        np.testing.assert_array_equal(base, perturbed)

    def test_suppressed_bn_params_get_zero_grad(self, rng):
        plan = [
            LayerNode("input", c_out=2),
            LayerNode("conv", (0,), c_in=2, c_out=3, kernel=3, stride=1),
            LayerNode("bn", (1,), c_in=3, c_out=3),
            LayerNode("gap", (2,), c_out=3),
            LayerNode("linear", (3,), c_in=3, c_out=2),
        ]
        net = Network(plan, (2, 6, 6), 2, rng)
        net.forward(np.ones((1, 2, 6, 6)), suppress_bn=True)
        net.zero_grad()
        net.backward(np.ones((1, 2)))
        for p in net.params[2]:
            np.testing.assert_array_equal(p.grad, 0.0)
