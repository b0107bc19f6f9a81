import math

import numpy as np
import pytest

from fedsplitsim import nn
from fedsplitsim.errors import ConfigError, DimensionError, NumericError, ProtocolError


def rel_close(analytic, numeric, rtol=1e-5, floor=1e-10):
    """True when |a - n| <= rtol * max(|a|, |n|), with an absolute floor for zeros."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all((diff <= rtol * scale) | (diff <= floor)))


class TestInitModel:
    def test_layer_layout_and_zero_biases(self):
        model = nn.init_model([8, 4, 14], seed=7)
        kinds = [type(l).__name__ for l in model.layers]
        assert kinds == ["Dense", "ReLU", "Dense", "Sigmoid"]
        assert np.all(model.layers[0].bias == 0.0)
        assert np.all(model.layers[2].bias == 0.0)
        assert model.input_dim == 8
        assert model.output_dim == 14

    def test_same_seed_is_bitwise_identical(self):
        a = nn.init_model([8, 4, 14], seed=7)
        b = nn.init_model([8, 4, 14], seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_different_seed_differs(self):
        a = nn.init_model([8, 4, 14], seed=7)
        b = nn.init_model([8, 4, 14], seed=8)
        assert any(not np.array_equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_weights_within_fan_in_bound(self):
        model = nn.init_model([8, 4, 14], seed=3)
        w0 = model.layers[0].weight
        assert np.all(np.abs(w0) <= math.sqrt(6.0 / 8))

    @pytest.mark.parametrize("dims", [[], [14], [8, 0, 14], [8, 4, 13]])
    def test_bad_dims_rejected(self, dims):
        with pytest.raises(ConfigError):
            nn.init_model(dims, seed=1)


class TestForward:
    def test_identity_dense(self):
        model = nn.SequentialModel([nn.Dense(np.eye(2), np.zeros(2))])
        y, _ = nn.forward(model, [[3.0, 5.0]])
        assert np.array_equal(y, [[3.0, 5.0]])

    def test_sigmoid_at_zero(self):
        model = nn.SequentialModel([nn.Sigmoid()])
        y, _ = nn.forward(model, [[0.0]])
        assert y[0, 0] == 0.5

    def test_affine_by_hand(self):
        model = nn.SequentialModel([nn.Dense([[2.0]], [1.0])])
        y, _ = nn.forward(model, [[3.0]])
        assert y[0, 0] == 7.0

    def test_sigmoid_head_stays_open_interval(self):
        model = nn.init_model([8, 4, 14], seed=5)
        x = np.random.default_rng(0).normal(size=(6, 8))
        y, cache = nn.forward(model, x)
        assert y.shape == (6, 14)
        assert np.all((y > 0.0) & (y < 1.0))
        assert len(cache.inputs) == len(model.layers)

    def test_shape_mismatch(self):
        model = nn.init_model([8, 4, 14], seed=5)
        with pytest.raises(DimensionError):
            nn.forward(model, np.zeros((3, 9)))

    def test_non_finite_input_rejected(self):
        model = nn.SequentialModel([nn.Dense(np.eye(2), np.zeros(2))])
        with pytest.raises(NumericError):
            nn.forward(model, [[np.inf, 0.0]])


class TestBceLoss:
    def test_perfect_prediction(self):
        t = np.array([[0.0, 1.0, 1.0, 0.0]])
        loss, _ = nn.bce_loss(t, t)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_half_everywhere(self):
        y = np.full((3, 4), 0.5)
        t = np.array([[0.0, 1.0, 0.0, 1.0]] * 3)
        loss, _ = nn.bce_loss(y, t)
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)

    def test_single_element_by_hand(self):
        loss, _ = nn.bce_loss([[0.8]], [[1.0]])
        assert loss == pytest.approx(-math.log(0.8), rel=1e-12)

    def test_loss_nonnegative_random(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            y = rng.uniform(1e-9, 1 - 1e-9, size=(4, 14))
            t = rng.uniform(0, 1, size=(4, 14))
            loss, grad = nn.bce_loss(y, t)
            assert loss >= 0.0
            assert grad.shape == y.shape

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.bce_loss(np.full((2, 3), 0.5), np.zeros((2, 4)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = nn.init_model([8, 4, 14], seed=2)
        x = np.random.default_rng(1).normal(size=(5, 8))
        y, cache = nn.forward(model, x)
        grads = nn.backward(model, cache, np.zeros_like(y))
        assert all(np.all(g == 0.0) for g in grads.param_grads)
        assert np.all(grads.input_grad == 0.0)

    def test_dense_chain_rule_by_hand(self):
        model = nn.SequentialModel([nn.Dense([[2.0]], [0.0])])
        y, cache = nn.forward(model, [[3.0]])
        grads = nn.backward(model, cache, [[1.0]])
        dW, db = grads.param_grads
        assert dW[0, 0] == 3.0
        assert db[0] == 1.0
        assert grads.input_grad[0, 0] == 2.0

    def test_stale_cache_rejected(self):
        a = nn.init_model([8, 4, 14], seed=2)
        b = nn.init_model([8, 4, 14], seed=2)
        x = np.zeros((1, 8))
        y, cache = nn.forward(a, x)
        with pytest.raises(ProtocolError):
            nn.backward(b, cache, np.zeros_like(y))

    def test_gradient_shape_mismatch(self):
        model = nn.init_model([8, 4, 14], seed=2)
        y, cache = nn.forward(model, np.zeros((1, 8)))
        with pytest.raises(DimensionError):
            nn.backward(model, cache, np.zeros((2, 14)))

    def test_matches_finite_differences(self):
        # Smoke version of the full 100-pair acceptance run.
        for seed in range(10):
            rng = np.random.default_rng(1000 + seed)
            model = nn.init_model([6, 5, 14], seed=seed)
            x = rng.normal(size=(4, 6))
            target = rng.integers(0, 2, size=(4, 14)).astype(float)
            y, cache = nn.forward(model, x)
            loss, dloss = nn.bce_loss(y, target)
            analytic = nn.backward(model, cache, dloss)
            numeric = nn.finite_diff_grad(model, x, target, step=1e-5)
            for a, f in zip(analytic.param_grads, numeric.param_grads):
                assert rel_close(a, f)

    def test_backward_does_not_mutate_params(self):
        model = nn.init_model([6, 5, 14], seed=3)
        before = [p.copy() for p in model.parameters()]
        x = np.random.default_rng(4).normal(size=(3, 6))
        y, cache = nn.forward(model, x)
        _, dloss = nn.bce_loss(y, np.zeros_like(y))
        nn.backward(model, cache, dloss)
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p, b)


class TestSgdStep:
    def test_zero_gradient_is_fixed_point(self):
        model = nn.init_model([8, 4, 14], seed=9)
        before = [p.copy() for p in model.parameters()]
        grads = nn.GradientSet([np.zeros_like(p) for p in model.parameters()], None)
        nn.sgd_step(model, grads, lr=0.5)
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p, b)

    def test_update_rule_by_hand(self):
        model = nn.SequentialModel([nn.Dense([[1.0]], [0.0])])
        grads = nn.GradientSet([np.array([[4.0]]), np.array([0.0])], None)
        nn.sgd_step(model, grads, lr=0.1)
        assert model.layers[0].weight[0, 0] == pytest.approx(0.6, rel=1e-15)

    def test_zero_lr_is_identity(self):
        model = nn.init_model([8, 4, 14], seed=9)
        before = [p.copy() for p in model.parameters()]
        grads = nn.GradientSet([np.ones_like(p) for p in model.parameters()], None)
        nn.sgd_step(model, grads, lr=0.0)
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p, b)

    def test_shape_mismatch(self):
        model = nn.init_model([8, 4, 14], seed=9)
        bad = [np.zeros((1, 1)) for _ in model.parameters()]
        with pytest.raises(DimensionError):
            nn.sgd_step(model, nn.GradientSet(bad, None), lr=0.1)


class TestSplitModel:
    def test_concatenation_identity(self):
        model = nn.init_model([8, 6, 5, 14], seed=4)
        part = nn.split_model(model, cut_m=2)
        assert part.front.layers + part.back.layers == model.layers

    def test_ushaped_concatenation_identity(self):
        model = nn.init_model([8, 6, 5, 14], seed=4)
        part = nn.split_model(model, cut_m=1, cut_n=3)
        assert part.front.layers + part.middle.layers + part.back.layers == model.layers

    def test_segmented_forward_is_bitwise_equal(self):
        model = nn.init_model([8, 6, 5, 14], seed=4)
        x = np.random.default_rng(8).normal(size=(7, 8))
        whole = nn.predict(model, x)
        for cut in range(1, len(model.layers) - 1):
            part = nn.split_model(model, cut_m=cut)
            mid = nn.predict(part.front, x)
            assert np.array_equal(nn.predict(part.back, mid), whole)

    def test_segmented_backward_is_bitwise_equal(self):
        model = nn.init_model([8, 6, 5, 14], seed=4)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 8))
        target = rng.integers(0, 2, size=(5, 14)).astype(float)

        y, cache = nn.forward(model, x)
        _, dloss = nn.bce_loss(y, target)
        mono = nn.backward(model, cache, dloss)

        part = nn.split_model(model, cut_m=2)
        y_m, cache_f = nn.forward(part.front, x)
        y_hat, cache_b = nn.forward(part.back, y_m)
        loss2, dloss2 = nn.bce_loss(y_hat, target)
        g_back = nn.backward(part.back, cache_b, dloss2)
        g_front = nn.backward(part.front, cache_f, g_back.input_grad)

        stitched = g_front.param_grads + g_back.param_grads
        assert len(stitched) == len(mono.param_grads)
        for a, b in zip(mono.param_grads, stitched):
            assert np.array_equal(a, b)
        assert np.array_equal(mono.input_grad, g_front.input_grad)

    @pytest.mark.parametrize("cut_m,cut_n", [(0, None), (3, None), (99, None), (1, 1), (2, 1), (1, 3)])
    def test_bad_cuts_rejected(self, cut_m, cut_n):
        model = nn.init_model([8, 4, 14], seed=4)  # 4 layers, valid cut_m in {1, 2}
        with pytest.raises(ConfigError):
            nn.split_model(model, cut_m, cut_n)


class TestFiniteDiff:
    def test_single_parameter_quadratic_like(self):
        # loss(w) for Dense(1,1)+Sigmoid is smooth in w; central diff has O(step^2) error.
        model = nn.SequentialModel([nn.Dense([[0.3]], [0.0]), nn.Sigmoid()])
        x = np.array([[1.5]])
        t = np.array([[1.0]])
        fd = nn.finite_diff_grad(model, x, t, step=1e-5)
        y, cache = nn.forward(model, x)
        _, dloss = nn.bce_loss(y, t)
        an = nn.backward(model, cache, dloss)
        for a, f in zip(an.param_grads, fd.param_grads):
            assert rel_close(a, f)

    def test_zero_input_zero_target_gives_finite_nonzero(self):
        model = nn.init_model([8, 4, 14], seed=6)
        fd = nn.finite_diff_grad(model, np.zeros((2, 8)), np.zeros((2, 14)), step=1e-5)
        flat = np.concatenate([g.ravel() for g in fd.param_grads])
        assert np.all(np.isfinite(flat))
        assert np.any(flat != 0.0)

    def test_nonpositive_step_rejected(self):
        model = nn.init_model([8, 4, 14], seed=6)
        with pytest.raises(ConfigError):
            nn.finite_diff_grad(model, np.zeros((1, 8)), np.zeros((1, 14)), step=0.0)
