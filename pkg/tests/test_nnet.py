import math

import numpy as np
import pytest

from ctxmix import nnet
from ctxmix.errors import ContractError, DimensionError, TrainingError


def small_template(k=4):
    return nnet.NetworkSpec(conv_layers=((3, 3, 1), (3, 3, 1), (2, 3, 1)), dense_widths=(6, 5), output_units=k)


class TestForward:
    def test_zero_weights_uniform_softmax(self):
        spec = small_template(k=4)
        params = nnet.init_parameters(spec, in_channels=2, in_length=12, seed=0)
        zeroed = type(params)(
            weights=tuple(np.zeros_like(w) for w in params.weights),
            biases=tuple(np.zeros_like(b) for b in params.biases),
            init_seed=0,
            in_channels=2,
            in_length=12,
        )
        batch = np.random.default_rng(1).standard_normal((5, 2, 12))
        probs, _ = nnet.forward(spec, zeroed, batch)
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_single_dense_layer_hand_softmax(self):
        # One input, two outputs, weights [[1], [-1]], zero bias, x=[2]:
        # softmax([2, -2]) computed by hand with math.exp.
        spec = nnet.NetworkSpec(conv_layers=(), dense_widths=(), output_units=2)
        params = nnet.Parameters(
            weights=(np.array([[1.0], [-1.0]]),),
            biases=(np.zeros(2),),
            init_seed=0,
            in_channels=1,
            in_length=1,
        )
        probs, _ = nnet.forward(spec, params, np.array([[[2.0]]]))
        e2, em2 = math.exp(2.0), math.exp(-2.0)
        expected = np.array([e2, em2]) / (e2 + em2)
        np.testing.assert_allclose(probs[0], expected, atol=1e-12)
        assert round(probs[0, 0], 4) == 0.9820
        assert round(probs[0, 1], 4) == 0.0180

    def test_empty_batch(self):
        spec = small_template(k=3)
        params = nnet.init_parameters(spec, 2, 12, seed=3)
        probs, _ = nnet.forward(spec, params, np.zeros((0, 2, 12)))
        assert probs.shape == (0, 3)

    def test_rows_sum_to_one_and_positive(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=11)
        rng = np.random.default_rng(2)
        probs, _ = nnet.forward(spec, params, rng.standard_normal((17, 3, 14)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs > 0).all()

    def test_shape_mismatch_reports_layer(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=11)
        with pytest.raises(DimensionError) as err:
            nnet.forward(spec, params, np.zeros((2, 5, 14)))
        assert err.value.layer == 0

    def test_conv_output_length_formula(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            kw = int(rng.integers(1, 6))
            st = int(rng.integers(1, 4))
            t = int(rng.integers(kw, 40))
            spec = nnet.NetworkSpec(conv_layers=((2, kw, st),), dense_widths=(), output_units=2)
            params = nnet.init_parameters(spec, 1, t, seed=0)
            feats = nnet.conv_features(spec, params, rng.standard_normal((1, 1, t)))
            assert feats.shape[1] == 2 * ((t - kw) // st + 1)

    def test_non_finite_batch_rejected(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=0)
        bad = np.zeros((1, 3, 14))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ContractError):
            nnet.forward(spec, params, bad)


class TestBackward:
    def test_softmax_xent_logit_gradient(self):
        probs = np.array([[0.25, 0.25, 0.25, 0.25]])
        grad = nnet.xent_logit_grad(probs, np.array([2]))
        np.testing.assert_allclose(grad, [[0.25, 0.25, -0.75, 0.25]], atol=1e-15)

    def test_zero_grad_out_gives_zero_grads(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=4)
        _, cache = nnet.forward(spec, params, np.random.default_rng(0).standard_normal((4, 3, 14)))
        grads = nnet.backward(cache, np.zeros((4, 4)))
        for dw, db in grads:
            assert not dw.any()
            assert not db.any()

    def test_grad_shape_mismatch_rejected(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=4)
        _, cache = nnet.forward(spec, params, np.zeros((4, 3, 14)))
        with pytest.raises(ContractError):
            nnet.backward(cache, np.zeros((4, 7)))

    def test_finite_differences_small_net(self):
        report = nnet.gradient_check(small_template(), seed=5, n_samples=4, in_channels=2, in_length=12)
        assert report.max_rel_error <= 1e-4
        assert report.n_checked > 0

    def test_finite_differences_striding(self):
        spec = nnet.NetworkSpec(conv_layers=((3, 4, 2), (2, 3, 2)), dense_widths=(5,), output_units=3)
        report = nnet.gradient_check(spec, seed=6, n_samples=3, in_channels=2, in_length=20)
        assert report.max_rel_error <= 1e-4

    def test_linear_single_layer_near_exact(self):
        spec = nnet.NetworkSpec(conv_layers=(), dense_widths=(), output_units=3)
        report = nnet.gradient_check(spec, seed=7, n_samples=5, in_channels=2, in_length=4)
        assert report.max_rel_error <= 1e-8

    def test_gradient_check_deterministic(self):
        spec = small_template()
        r1 = nnet.gradient_check(spec, seed=21, n_samples=3, in_channels=2, in_length=12)
        r2 = nnet.gradient_check(spec, seed=21, n_samples=3, in_channels=2, in_length=12)
        assert r1 == r2


class TestSgd:
    def test_first_step(self):
        spec = nnet.NetworkSpec(conv_layers=(), dense_widths=(), output_units=1)
        params = nnet.Parameters(
            weights=(np.zeros((1, 1)),), biases=(np.zeros(1),), init_seed=0, in_channels=1, in_length=1
        )
        opt = nnet.SgdState()
        new = nnet.sgd_step(params, [(np.ones((1, 1)), np.zeros(1))], opt)
        assert new.weights[0][0, 0] == pytest.approx(-0.001, abs=1e-15)
        assert opt.velocity[0][0][0, 0] == pytest.approx(-0.001, abs=1e-15)

    def test_pure_momentum_decay(self):
        spec_w = np.full((1, 1), 0.5)
        params = nnet.Parameters(
            weights=(spec_w,), biases=(np.zeros(1),), init_seed=0, in_channels=1, in_length=1
        )
        opt = nnet.SgdState()
        opt.velocity = [(np.full((1, 1), 0.01), np.zeros(1))]
        new = nnet.sgd_step(params, [(np.zeros((1, 1)), np.zeros(1))], opt)
        assert new.weights[0][0, 0] == pytest.approx(0.5 + 0.009, abs=1e-15)
        assert opt.velocity[0][0][0, 0] == pytest.approx(0.009, abs=1e-15)

    def test_two_steps_constant_gradient(self):
        # Unrolled: v1 = -0.001, w1 = -0.001; v2 = 0.9*v1 - 0.001 = -0.0019,
        # w2 = w1 + v2 = -0.0029.
        params = nnet.Parameters(
            weights=(np.zeros((1, 1)),), biases=(np.zeros(1),), init_seed=0, in_channels=1, in_length=1
        )
        opt = nnet.SgdState()
        g = [(np.ones((1, 1)), np.zeros(1))]
        params = nnet.sgd_step(params, g, opt)
        params = nnet.sgd_step(params, g, opt)
        assert params.weights[0][0, 0] == pytest.approx(-0.0029, abs=1e-15)

    def test_non_finite_gradient_names_layer(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=4)
        grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
        bad = np.zeros_like(grads[2][0])
        bad[0] = np.inf
        grads[2] = (bad, grads[2][1])
        with pytest.raises(TrainingError, match="layer 2"):
            nnet.sgd_step(params, grads, nnet.SgdState())


class TestDeterminism:
    def test_init_deterministic(self):
        spec = small_template()
        p1 = nnet.init_parameters(spec, 3, 14, seed=42)
        p2 = nnet.init_parameters(spec, 3, 14, seed=42)
        for a, b in zip(p1.weights, p2.weights):
            assert np.array_equal(a, b)

    def test_training_bitwise_deterministic(self):
        spec = small_template(k=3)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((30, 3, 14))
        y = rng.integers(3, size=30)

        def run():
            params = nnet.init_parameters(spec, 3, 14, seed=9)
            opt = nnet.SgdState()
            return nnet.train_network(
                spec, params, X, y, epochs=3, batch_size=8, opt=opt, shuffle_seeds=[[9, e] for e in range(3)]
            )

        pa, pb = run(), run()
        for a, b in zip(pa.weights, pb.weights):
            assert a.tobytes() == b.tobytes()

    def test_parameters_are_read_only(self):
        params = nnet.init_parameters(small_template(), 3, 14, seed=1)
        with pytest.raises(ValueError):
            params.weights[0][0, 0, 0] = 1.0


class TestHelpers:
    def test_parameter_count_matches_arrays(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=1)
        total = sum(w.size + b.size for w, b in zip(params.weights, params.biases))
        assert nnet.parameter_count(spec, 3, 14) == total

    def test_penultimate_features_dim(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=1)
        feats = nnet.penultimate_features(spec, params, np.zeros((4, 3, 14)))
        assert feats.shape == (4, 5)

    def test_conv_features_match_forward_flatten(self):
        spec = small_template()
        params = nnet.init_parameters(spec, 3, 14, seed=1)
        batch = np.random.default_rng(3).standard_normal((6, 3, 14))
        feats = nnet.conv_features(spec, params, batch)
        _, cache = nnet.forward(spec, params, batch)
        assert np.array_equal(feats, cache.dense_inputs[0])
