"""Layer-level forward/backward contracts and the optimizer/schedule math."""

import numpy as np
import pytest

from paal.nn import (ChannelSoftmax, Conv2D, Dense, GlobalAvgPool, Network,
                     NumericalError, Param, ReLU, ShapeError, Sigmoid,
                     adamw_step, cosine_lr, finite_diff_check)


def quad_loss(y):
    y64 = y.astype(np.float64)
    return 0.5 * float((y64 ** 2).sum()), y64


def sum_loss(y):
    return float(y.astype(np.float64).sum()), np.ones_like(y, dtype=np.float64)


def test_relu_definition():
    out = ReLU().forward(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_dense_identity_passthrough():
    layer = Dense(3, 3, rng=np.random.default_rng(0))
    layer.weight.value = np.eye(3, dtype=np.float32)
    layer.bias.value = np.zeros(3, dtype=np.float32)
    v = np.array([[0.5, -2.0, 7.0]], dtype=np.float32)
    np.testing.assert_array_equal(layer.forward(v), v)


def test_channel_softmax_uniform_on_equal_logits():
    x = np.zeros((1, 4, 2, 2), dtype=np.float32)
    out = ChannelSoftmax().forward(x)
    np.testing.assert_allclose(out, 0.25)


def test_channel_softmax_sums_to_one_per_pixel():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=5.0, size=(2, 5, 4, 4)).astype(np.float32)
    out = ChannelSoftmax().forward(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    assert out.min() >= 0.0


def test_global_avg_pool_is_channel_mean():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 6, 5, 7)).astype(np.float32)
    out = GlobalAvgPool().forward(x)
    np.testing.assert_allclose(out, x.mean(axis=(2, 3)), atol=1e-6)


def test_zero_output_grad_gives_zero_param_grads():
    rng = np.random.default_rng(5)
    net = Network([Conv2D(1, 3, rng=rng), ReLU(), Conv2D(3, 2, rng=rng)])
    x = rng.normal(size=(2, 1, 4, 4)).astype(np.float32)
    net.forward(x, train=True)
    net.zero_grad()
    net.backward(np.zeros((2, 2, 4, 4), dtype=np.float32))
    for p in net.params():
        np.testing.assert_array_equal(p.grad, 0.0)


def test_dense_weight_grad_is_input_column_sums():
    # loss = sum of outputs, so dL/dW[i, o] = sum_b x[b, i]
    layer = Dense(2, 2, rng=np.random.default_rng(0))
    net = Network([layer])
    x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    acts = net.forward(x, train=True)
    net.zero_grad()
    net.backward(np.ones_like(acts[-1]))
    np.testing.assert_allclose(layer.weight.grad, [[4.0, 4.0], [6.0, 6.0]])
    np.testing.assert_allclose(layer.bias.grad, [2.0, 2.0])


def test_random_net_matches_finite_differences():
    rng = np.random.default_rng(9)
    net = Network([Conv2D(2, 4, rng=rng), ReLU(), Conv2D(4, 3, rng=rng),
                   GlobalAvgPool(), Dense(3, 2, rng=rng)])
    x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
    assert finite_diff_check(net, x, quad_loss, eps=1e-3) < 1e-3


@pytest.mark.parametrize("make_layer,shape", [
    (lambda rng: Conv2D(2, 3, rng=rng), (2, 2, 5, 5)),
    (lambda rng: Dense(4, 3, rng=rng), (3, 4)),
])
def test_param_layers_gradcheck(make_layer, shape):
    rng = np.random.default_rng(17)
    net = Network([make_layer(rng)])
    x = rng.normal(size=shape).astype(np.float32)
    assert finite_diff_check(net, x, quad_loss, eps=1e-3) < 1e-6


@pytest.mark.parametrize("tail,shape", [
    ([ReLU()], (2, 3, 4, 4)),
    ([Sigmoid()], (2, 3, 4, 4)),
    ([ChannelSoftmax()], (2, 4, 3, 3)),
    ([GlobalAvgPool()], (2, 3, 4, 4)),
])
def test_activation_layers_gradcheck(tail, shape):
    rng = np.random.default_rng(23)
    net = Network([Conv2D(shape[1], shape[1], rng=rng)] + tail)
    x = rng.normal(size=shape).astype(np.float32)
    assert finite_diff_check(net, x, quad_loss, eps=1e-4) < 1e-3


def test_linear_net_quadratic_loss_is_exact():
    rng = np.random.default_rng(29)
    net = Network([Dense(3, 4, rng=rng), Dense(4, 2, rng=rng)])
    x = rng.normal(size=(3, 3)).astype(np.float32)
    assert finite_diff_check(net, x, quad_loss, eps=1e-3) < 1e-6


def test_dead_relu_path_has_exactly_zero_grads():
    rng = np.random.default_rng(31)
    conv = Conv2D(1, 3, rng=rng)
    conv.bias.value[:] = -100.0  # relu kills every activation
    net = Network([conv, ReLU(), GlobalAvgPool(), Dense(3, 2, rng=rng)])
    x = rng.uniform(0, 1, size=(2, 1, 4, 4)).astype(np.float32)
    acts = net.forward(x, train=True)
    net.zero_grad()
    net.backward(np.ones_like(acts[-1]))
    np.testing.assert_array_equal(conv.weight.grad, 0.0)
    assert finite_diff_check(net, x, sum_loss, eps=1e-3) < 1e-6


def test_backward_is_bit_identical_across_runs():
    rng = np.random.default_rng(37)
    net = Network([Conv2D(1, 4, rng=rng), ReLU(), Conv2D(4, 2, rng=rng)])
    x = rng.normal(size=(3, 1, 5, 5)).astype(np.float32)
    grads = []
    for _ in range(2):
        acts = net.forward(x, train=True)
        net.zero_grad()
        net.backward(np.ones_like(acts[-1]))
        grads.append([p.grad.copy() for p in net.params()])
    for a, b in zip(*grads):
        assert a.tobytes() == b.tobytes()


def test_forward_shape_error_names_layer():
    net = Network([Conv2D(2, 3, rng=np.random.default_rng(0))])
    with pytest.raises(ShapeError, match="Conv2D"):
        net.forward(np.zeros((1, 5, 4, 4), dtype=np.float32))


def test_backward_without_forward_raises():
    net = Network([Dense(2, 2, rng=np.random.default_rng(0))])
    with pytest.raises(RuntimeError, match="without a cached forward"):
        net.backward(np.ones((1, 2), dtype=np.float32))


def test_tap_points_validate_and_fetch():
    rng = np.random.default_rng(41)
    net = Network([Conv2D(1, 3, rng=rng), ReLU()], taps={"mid": 0})
    acts = net.forward(np.zeros((1, 1, 4, 4), dtype=np.float32))
    np.testing.assert_array_equal(net.tapped(acts, "mid"), acts[1])
    with pytest.raises(ValueError, match="invalid layer index"):
        Network([ReLU()], taps={"bad": 3})


class TestAdamW:
    def test_zero_grad_no_decay_leaves_value(self):
        p = Param(np.array([1.5, -2.0], dtype=np.float32))
        adamw_step([p], lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [1.5, -2.0])

    def test_zero_grad_decay_scales_value(self):
        p = Param(np.array([1.0, -4.0], dtype=np.float32))
        adamw_step([p], lr=1e-3, weight_decay=1e-4)
        np.testing.assert_allclose(p.value, np.array([1.0, -4.0]) * (1 - 1e-7),
                                   rtol=1e-6)

    def test_first_step_matches_update_rule(self):
        p = Param(np.array([1.0], dtype=np.float32))
        p.grad[:] = 1.0
        lr, eps, wd = 1e-3, 1e-8, 1e-4
        adamw_step([p], lr=lr, eps=eps, weight_decay=wd)
        # bias-corrected mhat = vhat = 1 at step 1
        expected = 1.0 - lr * 1.0 / (np.sqrt(1.0) + eps) - lr * wd * 1.0
        np.testing.assert_allclose(p.value, [expected], rtol=1e-6)

    def test_step_counter_and_grad_untouched(self):
        p = Param(np.array([1.0], dtype=np.float32))
        p.grad[:] = 0.5
        adamw_step([p], lr=1e-3)
        adamw_step([p], lr=1e-3)
        assert p.step == 2
        np.testing.assert_array_equal(p.grad, [0.5])

    def test_nonfinite_grad_raises(self):
        p = Param(np.array([1.0], dtype=np.float32))
        p.grad[:] = np.nan
        with pytest.raises(NumericalError):
            adamw_step([p], lr=1e-3)


class TestCosineLR:
    def test_warmup_end_hits_peak(self):
        assert cosine_lr(10, 100) == pytest.approx(1e-3)

    def test_final_epoch_hits_minimum(self):
        assert cosine_lr(100, 100) == pytest.approx(1e-6)

    def test_ramp_starts_at_zero(self):
        assert cosine_lr(0, 100) == 0.0

    def test_ramp_is_linear(self):
        assert cosine_lr(5, 100) == pytest.approx(0.5e-3)

    def test_decay_is_monotone(self):
        lrs = [cosine_lr(e, 60) for e in range(10, 61)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_total_not_exceeding_warmup_rejected(self):
        with pytest.raises(ValueError):
            cosine_lr(3, 10, warmup=10)
