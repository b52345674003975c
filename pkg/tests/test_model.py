import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradreg import model as mdl
from gradreg.model import Layer, MlpModel
from gradreg.numcore import ShapeError, make_rng

from conftest import central_diff, central_jacobian, one_hot_row, random_mlp, rel_err


def softmax_regression(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return MlpModel([Layer(w, b, mdl.IDENTITY)])


class TestForward:
    def test_zero_weights_uniform(self):
        model = softmax_regression(np.zeros((10, 4)))
        np.testing.assert_allclose(mdl.forward(model, np.ones(4)).probs(), np.full(10, 0.1))

    def test_closed_form_softmax(self):
        model = softmax_regression(np.zeros((2, 1)), [0.0, math.log(3)])
        np.testing.assert_allclose(mdl.forward(model, [0.0]).probs(), [0.25, 0.75])

    @given(arrays(np.float64, 6, elements=st.floats(-700, 700)), st.floats(-500, 500))
    def test_shift_invariance_and_normalisation(self, o, c):
        y = mdl.softmax(o)
        assert abs(y.sum() - 1) <= 1e-12
        np.testing.assert_allclose(mdl.softmax(o + c), y, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            mdl.forward(random_mlp(rng), np.zeros(5))

    def test_batch_matches_single(self, rng):
        model = random_mlp(rng)
        x = rng.random((4, 6))
        batch = mdl.forward(model, x).probs()
        for i in range(4):
            np.testing.assert_allclose(mdl.forward(model, x[i]).probs(), batch[i], atol=1e-15)

    def test_layers_must_chain(self, rng):
        a, b = mdl.init_mlp([3, 4, 2], rng).layers
        with pytest.raises(ShapeError):
            MlpModel([b, a])


class TestLoss:
    def trace_for(self, probs):
        model = softmax_regression(np.zeros((len(probs), 1)), np.log(probs))
        return mdl.forward(model, [0.0]), model

    def test_two_class(self):
        trace, model = self.trace_for([0.25, 0.75])
        assert mdl.loss_xent(trace, [0, 1], model) == pytest.approx(math.log(4 / 3))
        assert mdl.loss_xent(trace, [0, 1], model) == pytest.approx(0.28768, abs=1e-5)

    def test_uniform(self):
        trace, model = self.trace_for(np.full(10, 0.1))
        assert mdl.loss_xent(trace, one_hot_row(10, 3), model) == pytest.approx(2.302585, abs=1e-6)

    def test_decay_term(self):
        model = softmax_regression([[2.0]])
        trace = mdl.forward(model, [1.0])  # one class: y = 1 exactly
        assert mdl.loss_xent(trace, [1.0], model, weight_decay=1.0) == pytest.approx(4.0)

    def test_decay_excludes_bias(self):
        model = softmax_regression([[0.0]], [5.0])
        assert mdl.weight_penalty(model) == 0

    def test_zero_probability_is_clamped(self):
        model = softmax_regression(np.zeros((2, 1)), [0.0, 800.0])
        mdl.reset_log_clamp_count()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss = mdl.loss_xent(mdl.forward(model, [0.0]), [1, 0], model)
        assert loss == pytest.approx(-math.log(1e-300))
        assert mdl.log_clamp_count() == 1
        assert caught


def fd_check_model(model, x, t, weight_decay=0.0):
    """Worst relative error of backprop against central differences."""
    bundle = mdl.backprop(model, x, t, weight_decay)

    def loss_at(m):
        return mdl.loss_xent(mdl.forward(m, x), t, m, weight_decay)

    worst = rel_err(bundle.grad_input,
                    central_diff(lambda v: mdl.loss_xent(mdl.forward(model, v), t, model), x))
    for (dw, db), layer in zip(bundle.grad_params, model.layers):
        for mine, param in ((dw, layer.weight), (db, layer.bias)):
            def f(v, param=param):
                saved = param.copy()
                param[...] = v
                out = loss_at(model)
                param[...] = saved
                return out
            worst = max(worst, rel_err(mine, central_diff(f, param)))
    return worst


class TestBackprop:
    def test_zero_input_softmax_regression(self, rng):
        model = mdl.init_mlp([4, 3], rng)
        t = one_hot_row(3, 2)
        bundle = mdl.backprop(model, np.zeros(4), t)
        dw, db = bundle.grad_params[0]
        np.testing.assert_array_equal(dw, 0)
        np.testing.assert_allclose(db, mdl.forward(model, np.zeros(4)).probs() - t)

    def test_confident_prediction_has_small_input_gradient(self):
        model = softmax_regression([[50.0, 0.0], [-50.0, 0.0]])
        g = mdl.input_gradient(model, [1.0, 0.3], [1.0, 0.0])
        assert np.linalg.norm(g) < 1e-30

    def test_random_mlp_matches_finite_differences(self, rng):
        model = random_mlp(rng, (6, 5, 3))
        x = rng.random(6)
        assert fd_check_model(model, x, one_hot_row(3, 1)) < 1e-5

    def test_decay_gradient(self, rng):
        model = random_mlp(rng, (4, 3, 3))
        x = rng.random(4)
        assert fd_check_model(model, x, one_hot_row(3, 0), weight_decay=0.3) < 1e-5
        plain = mdl.backprop(model, x, one_hot_row(3, 0))
        decayed = mdl.backprop(model, x, one_hot_row(3, 0), 0.3)
        for (a, _), (b, _), layer in zip(plain.grad_params, decayed.grad_params, model.layers):
            np.testing.assert_allclose(b - a, 0.6 * layer.weight, atol=1e-14)

    def test_batch_gradient_is_mean(self, rng):
        model = random_mlp(rng, (3, 4, 2))
        x = rng.random((5, 3))
        t = np.eye(2)[[0, 1, 1, 0, 1]]
        batch = mdl.backprop(model, x, t)
        singles = [mdl.backprop(model, x[i], t[i]) for i in range(5)]
        np.testing.assert_allclose(batch.grad_params[0][0],
                                   np.mean([s.grad_params[0][0] for s in singles], axis=0))
        np.testing.assert_allclose(batch.grad_input, [s.grad_input for s in singles])

    def test_target_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            mdl.backprop(random_mlp(rng), np.zeros(6), np.zeros(4))


class TestJacobian:
    def test_softmax_regression_is_weight_matrix(self, rng):
        model = mdl.init_mlp([5, 3], rng)
        np.testing.assert_array_equal(mdl.presoftmax_jacobian(model, rng.random(5)),
                                      model.layers[0].weight)

    def test_random_mlp_matches_finite_differences(self, rng):
        model = random_mlp(rng, (6, 5, 4, 3))
        x = rng.random(6)
        fd = central_jacobian(lambda v: mdl.forward(model, v).logits(), x)
        assert rel_err(mdl.presoftmax_jacobian(model, x), fd) < 1e-5

    def test_chain_rule_consistency(self, rng):
        model = random_mlp(rng, (6, 5, 3))
        x = rng.random(6)
        t = one_hot_row(3, 2)
        y = mdl.forward(model, x).probs()
        chained = (y - t) @ mdl.presoftmax_jacobian(model, x)
        np.testing.assert_allclose(chained, mdl.input_gradient(model, x, t), atol=1e-10)


class TestMaxNorm:
    def model_with_row(self, row):
        hidden = Layer(np.array([row], dtype=np.float64), np.array([0.7]), mdl.SIGMOID)
        out = Layer(np.array([[9.0], [0.0]]), np.zeros(2), mdl.IDENTITY)
        return MlpModel([hidden, out])

    def test_boundary_unchanged(self):
        proj = mdl.max_norm_project(self.model_with_row([3.0, 4.0]), 5.0)
        np.testing.assert_allclose(proj.layers[0].weight, [[3, 4]])

    def test_rescaled(self):
        proj = mdl.max_norm_project(self.model_with_row([6.0, 8.0]), 5.0)
        np.testing.assert_allclose(proj.layers[0].weight, [[3, 4]])
        assert proj.layers[0].bias[0] == 0.7
        np.testing.assert_array_equal(proj.layers[1].weight, [[9], [0]])

    def test_idempotent(self, rng):
        model = random_mlp(rng, (6, 5, 3))
        once = mdl.max_norm_project(model, 1.0)
        twice = mdl.max_norm_project(once, 1.0)
        for a, b in zip(once.parameters(), twice.parameters()):
            np.testing.assert_array_equal(a, b)


class TestGaussNewton:
    def test_two_class_example(self):
        y = np.array([0.5, 0.5])
        grad = np.array([-1 / y[0], 0.0])
        np.testing.assert_array_equal(np.outer(grad, grad), [[4, 0], [0, 0]])
        assert mdl.gn_identity_residual(y, 0) == 0

    def test_random_probabilities(self, rng):
        for _ in range(100):
            y = rng.dirichlet(np.ones(5))
            assert mdl.gn_identity_residual(y, int(rng.integers(5))) < 1e-12

    def test_input_space_identity(self, rng):
        # grad_x L grad_x L^T = J_y H J_y^T with a finite-difference J_y
        model = random_mlp(rng, (5, 4, 3))
        x = rng.random(5)
        label = 1
        y = mdl.forward(model, x).probs()
        jac_y = central_jacobian(lambda v: mdl.forward(model, v).probs(), x)  # K x d
        hess = np.zeros((3, 3))
        hess[label, label] = 1 / y[label] ** 2
        g = mdl.input_gradient(model, x, one_hot_row(3, label))
        assert np.max(np.abs(np.outer(g, g) - jac_y.T @ hess @ jac_y)) < 1e-6


class TestSerialisation:
    def test_round_trip(self, tmp_path, rng):
        model = random_mlp(rng, (6, 5, 4, 3))
        path = tmp_path / "m.bin"
        mdl.save_model(model, path)
        back = mdl.load_model(path)
        assert [l.activation for l in back.layers] == [l.activation for l in model.layers]
        for a, b in zip(model.parameters(), back.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_layout(self, tmp_path):
        model = softmax_regression([[1.0, 2.0]], [3.0])
        path = tmp_path / "m.bin"
        mdl.save_model(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"GRMP"
        assert raw[4:24] == bytes.fromhex("01000000" "01000000" "02000000" "01000000" "00000000")
        assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"nope")
        with pytest.raises(ValueError):
            mdl.load_model(path)

    def test_rejects_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.bin"
        mdl.save_model(softmax_regression([[1.0]]), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            mdl.load_model(path)
