import numpy as np
import pytest

from fighter.analytic_grad import compare, fd_gradient
from fighter.gcn import (
    GcnConfig,
    gcn_forward,
    gcn_forward_single_hop,
    gcn_two_layer_grads,
    init_gcn_params,
)
from fighter.tensor import DomainError, ShapeError, relu


def stochastic(rng, n):
    a = rng.uniform(size=(n, n))
    return a / a.sum(axis=1, keepdims=True)


def hop_sum_oracle(x, a, cfg, params):
    # explicit sum over hops with per-hop weight blocks
    for l in range(1, cfg.n_layers + 1):
        k, h = cfg.hop_list[l - 1], x.shape[1]
        w = params[f"w{l}"]
        z = sum(np.linalg.matrix_power(a, i) @ x @ w[i * h:(i + 1) * h] for i in range(k))
        x = z if l == cfg.n_layers else np.maximum(z, 0)
    return x


class TestConfig:
    def test_weight_shapes(self):
        cfg = GcnConfig((4, 3, 2), (3, 2))
        assert cfg.weight_shape(1) == (12, 3)
        assert cfg.weight_shape(2) == (6, 2)
        assert cfg.weight_shape(2, single_hop=True) == (3, 2)

    @pytest.mark.parametrize("widths,hops", [((4,), ()), ((4, 2), (1, 1)), ((4, 0), (1,)), ((4, 2), (0,))])
    def test_invalid(self, widths, hops):
        with pytest.raises(DomainError):
            GcnConfig(widths, hops)

    def test_unknown_activation(self):
        with pytest.raises(DomainError):
            GcnConfig((2, 1), (1,), "gelu")


class TestForward:
    @pytest.mark.parametrize("hops", [(1, 1), (2, 3), (3, 1)])
    def test_matches_hop_sum(self, hops):
        rng = np.random.default_rng(0)
        cfg = GcnConfig((3, 4, 2), hops)
        params = init_gcn_params(cfg, rng)
        x, a = rng.normal(size=(5, 3)), stochastic(rng, 5)
        out, trace = gcn_forward(x, a, cfg, params)
        np.testing.assert_allclose(out, hop_sum_oracle(x, a, cfg, params), atol=1e-12)
        assert len(trace.pre_activations) == 2

    def test_per_layer_adjacency(self):
        rng = np.random.default_rng(1)
        cfg = GcnConfig((2, 2, 1), (2, 2))
        params = init_gcn_params(cfg, rng)
        x, a1, a2 = rng.normal(size=(4, 2)), stochastic(rng, 4), stochastic(rng, 4)
        out, _ = gcn_forward(x, [a1, a2], cfg, params)
        h = relu(np.hstack([x, a1 @ x]) @ params["w1"])
        np.testing.assert_allclose(out, np.hstack([h, a2 @ h]) @ params["w2"], atol=1e-13)

    def test_single_hop(self):
        rng = np.random.default_rng(2)
        cfg = GcnConfig((3, 2, 1), (1, 1))
        params = init_gcn_params(cfg, rng, single_hop=True)
        x, a = rng.normal(size=(4, 3)), stochastic(rng, 4)
        out, _ = gcn_forward_single_hop(x, a, cfg, params)
        np.testing.assert_allclose(out, relu(a @ x @ params["w1"]) @ params["w2"], atol=1e-14)

    def test_kappa_one_ignores_adjacency(self):
        rng = np.random.default_rng(3)
        cfg = GcnConfig((2, 1), (1,))
        params = init_gcn_params(cfg, rng)
        x = rng.normal(size=(3, 2))
        out1, _ = gcn_forward(x, stochastic(rng, 3), cfg, params)
        out2, _ = gcn_forward(x, np.eye(3), cfg, params)
        np.testing.assert_array_equal(out1, out2)

    def test_shape_errors(self):
        rng = np.random.default_rng(4)
        cfg = GcnConfig((2, 1), (2,))
        params = init_gcn_params(cfg, rng)
        with pytest.raises(ShapeError):
            gcn_forward(np.ones((3, 3)), np.eye(3), cfg, params)
        with pytest.raises(ShapeError):
            gcn_forward(np.ones((3, 2)), np.eye(4), cfg, params)
        with pytest.raises(ShapeError):
            gcn_forward(np.ones((3, 2)), np.eye(3), cfg, {"w1": np.ones((3, 1))})


class TestTwoLayerGrads:
    @pytest.mark.parametrize("k1,k2", [(1, 1), (1, 3), (2, 2), (3, 1)])
    @pytest.mark.parametrize("act", ["relu", "identity"])
    def test_multi_hop_against_fd(self, k1, k2, act):
        rng = np.random.default_rng([k1, k2, act == "relu"])
        cfg = GcnConfig((3, 2, 1), (k1, k2), act)
        params = {k: 2 * v for k, v in init_gcn_params(cfg, rng).items()}
        x, a = rng.normal(size=(5, 3)), stochastic(rng, 5)
        dw2, dw1 = gcn_two_layer_grads(x, a, params, k1, k2, act)
        fd = fd_gradient(lambda q: gcn_forward(x, a, cfg, q)[0][:, 0], params)
        assert compare(dw2, fd["w2"][..., 0])[1] < 1e-7
        assert compare(np.stack(dw1, axis=-1), fd["w1"])[1] < 1e-7

    def test_single_hop_against_fd(self):
        rng = np.random.default_rng(9)
        cfg = GcnConfig((3, 2, 1), (1, 1))
        params = init_gcn_params(cfg, rng, single_hop=True)
        x, a = rng.normal(size=(4, 3)), stochastic(rng, 4)
        dw2, dw1 = gcn_two_layer_grads(x, a, params, 1, 1, single_hop=True)
        fd = fd_gradient(lambda q: gcn_forward_single_hop(x, a, cfg, q)[0][:, 0], params)
        assert compare(dw2, fd["w2"][..., 0])[1] < 1e-7
        assert compare(np.stack(dw1, axis=-1), fd["w1"])[1] < 1e-7

    def test_w2_gradient_identity_activation_is_aggregated_features(self):
        rng = np.random.default_rng(5)
        x, a = rng.normal(size=(3, 2)), stochastic(rng, 3)
        params = {"w1": rng.normal(size=(2, 2)), "w2": rng.normal(size=(2, 1))}
        dw2, _ = gcn_two_layer_grads(x, a, params, 1, 1, "identity")
        np.testing.assert_allclose(dw2, x @ params["w1"], atol=1e-14)

    def test_vector_output_rejected(self):
        params = {"w1": np.ones((2, 2)), "w2": np.ones((2, 2))}
        with pytest.raises(DomainError, match="h2"):
            gcn_two_layer_grads(np.ones((3, 2)), np.eye(3), params, 1, 1)
