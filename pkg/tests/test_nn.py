import math

import numpy as np
import pytest

from sflsim import nn
from sflsim.errors import ConfigError, ProtocolOrderError, ShapeError

from oracles import (
    assert_grads_close,
    fd_input_grad,
    fd_param_grads,
    nudge_from_zero,
    scalar_loss,
)


def _dense(w, b):
    w = nn.as_f32(w)
    layer = nn.Dense(w.shape[0], w.shape[1])
    layer.weight[:] = w
    layer.bias[:] = nn.as_f32(b)
    return layer


# -- forward -----------------------------------------------------------------


def test_forward_empty_stack_is_identity():
    x = nn.as_f32([[1.0, -2.0, 3.0]])
    out = nn.forward([], x)
    np.testing.assert_array_equal(out, x)


def test_forward_dense_hand_example():
    layer = _dense([[1, 2], [3, 4]], [0, 0])
    out = nn.forward([layer], nn.as_f32([[1.0, 1.0]]))
    np.testing.assert_allclose(out, [[4.0, 6.0]])


def test_forward_relu_definition():
    out = nn.forward([nn.Relu()], nn.as_f32([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])


def test_forward_shape_mismatch_names_layer_index():
    stack = [nn.Relu(), nn.Dense(4, 2)]
    with pytest.raises(ConfigError, match="layer 1"):
        nn.forward(stack, np.zeros((1, 3), dtype=nn.DTYPE))


def test_l2norm_rows_unit_norm_and_zero_row_passthrough():
    x = np.zeros((3, 4), dtype=nn.DTYPE)
    x[0] = [3.0, 4.0, 0.0, 0.0]
    x[1] = [-1.0, 1.0, -1.0, 1.0]
    out = nn.forward([nn.L2Norm()], x)
    norms = np.linalg.norm(out, axis=1)
    assert abs(norms[0] - 1.0) < 1e-6 and abs(norms[1] - 1.0) < 1e-6
    np.testing.assert_array_equal(out[2], np.zeros(4, dtype=nn.DTYPE))


def test_forward_non_finite_raises():
    layer = _dense([[1e30], [1e30]], [0])
    with np.errstate(over="ignore"), pytest.raises(nn.NumericsError):
        nn.forward([layer], nn.as_f32([[1e10, 1e10]]))


# -- backward ----------------------------------------------------------------


def test_backward_dense_hand_chain_rule():
    layer = _dense([[2.0]], [0.0])
    x = nn.as_f32([[3.0]])
    nn.forward([layer], x, train=True)
    grads, grad_in = nn.backward([layer], nn.as_f32([[1.0]]))
    np.testing.assert_allclose(grads[0], [[3.0]])  # dW
    np.testing.assert_allclose(grads[1], [1.0])  # db
    np.testing.assert_allclose(grad_in, [[2.0]])


def test_backward_relu_gate():
    layer = nn.Relu()
    nn.forward([layer], nn.as_f32([[-1.0, 2.0]]), train=True)
    _, grad_in = nn.backward([layer], nn.as_f32([[5.0, 5.0]]))
    np.testing.assert_array_equal(grad_in, [[0.0, 5.0]])


def test_backward_without_forward_is_protocol_error():
    layer = nn.Dense(2, 2)
    with pytest.raises(ProtocolOrderError):
        nn.backward([layer], np.zeros((1, 2), dtype=nn.DTYPE))


def test_backward_after_eval_forward_is_protocol_error():
    layer = nn.Dense(2, 2)
    nn.forward([layer], np.zeros((1, 2), dtype=nn.DTYPE), train=False)
    with pytest.raises(ProtocolOrderError):
        nn.backward([layer], np.zeros((1, 2), dtype=nn.DTYPE))


def _random_stacks(rng):
    """Small stacks covering every layer kind, <=4 layers each."""
    dense_stack = [nn.Dense(6, 5), nn.Relu(), nn.Dense(5, 3), nn.L2Norm()]
    conv_stack = [nn.Conv2d(2, 3, 3, stride=2), nn.Relu(), nn.Flatten(), nn.Dense(27, 4)]
    pool_stack = [nn.Conv2d(1, 2, 3, stride=1), nn.AvgPool2d(2), nn.Flatten()]
    up_stack = [nn.Dense(8, 16), nn.Reshape((4, 2, 2)), nn.Upsample2d(2), nn.Conv2d(4, 1, 3)]
    for stack in (dense_stack, conv_stack, pool_stack, up_stack):
        for layer in stack:
            for _, p in layer.param_items():
                p[:] = rng.uniform(-0.5, 0.5, size=p.shape).astype(nn.DTYPE)
    inputs = {
        0: rng.normal(size=(2, 6)),
        1: rng.normal(size=(2, 2, 6, 6)),
        2: rng.normal(size=(2, 1, 6, 6)),
        3: rng.normal(size=(2, 8)),
    }
    return [dense_stack, conv_stack, pool_stack, up_stack], inputs


def _kink_margin(stack, x):
    """Smallest |pre-activation| feeding any ReLU (inf when there is none)."""
    margin = math.inf
    for i, layer in enumerate(stack):
        if isinstance(layer, nn.Relu):
            pre = nn.forward(stack[:i], x)
            margin = min(margin, float(np.abs(pre).min()))
    return margin


def _stacks_clear_of_kinks(base_seed):
    """Regenerate random stacks until no ReLU input sits near its kink,
    where finite differences would be invalid."""
    for seed in range(base_seed, base_seed + 50):
        rng = np.random.default_rng(seed)
        stacks, inputs = _random_stacks(rng)
        xs = [nudge_from_zero(inputs[i].astype(nn.DTYPE)) for i in range(len(stacks))]
        if all(_kink_margin(s, x) > 0.02 for s, x in zip(stacks, xs)):
            return stacks, xs, rng
    raise AssertionError("no kink-free random stack found")


def test_gradients_match_finite_differences():
    stacks, xs, rng = _stacks_clear_of_kinks(7)
    for i, (stack, x) in enumerate(zip(stacks, xs)):
        out = nn.forward(stack, x, train=True)
        weights = rng.normal(size=out.shape)
        grads, grad_in = nn.backward(stack, weights.astype(nn.DTYPE))
        fd_params = fd_param_grads(stack, x, weights)
        for bp, fd in zip(grads, fd_params):
            assert_grads_close(bp, fd, label=f"stack {i} params")
        fd_in = fd_input_grad(stack, x, weights)
        assert_grads_close(grad_in, fd_in, label=f"stack {i} input")


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(3)
    stacks, inputs = _random_stacks(rng)
    x = inputs[1].astype(nn.DTYPE)
    a = nn.forward(stacks[1], x)
    b = nn.forward(stacks[1], x)
    np.testing.assert_array_equal(a, b)


# -- optimizers ----------------------------------------------------------------


def test_sgd_momentum_hand_step():
    p = nn.as_f32([1.0])
    opt = nn.SgdMomentum([p], momentum=0.9, weight_decay=0.0)
    opt.step([p], [nn.as_f32([1.0])], lr=0.1)
    np.testing.assert_allclose(opt.velocity[0], [1.0])
    np.testing.assert_allclose(p, [0.9])


def test_sgd_zero_lr_leaves_params():
    p = nn.as_f32([2.0, -1.0])
    opt = nn.SgdMomentum([p], momentum=0.9, weight_decay=0.0)
    opt.step([p], [nn.as_f32([1.0, 1.0])], lr=0.0)
    np.testing.assert_array_equal(p, [2.0, -1.0])


def test_sgd_weight_decay_only_step():
    p = nn.as_f32([1.0])
    opt = nn.SgdMomentum([p], momentum=0.0, weight_decay=0.0005)
    opt.step([p], [nn.as_f32([0.0])], lr=1.0)
    np.testing.assert_allclose(p, [0.9995], rtol=1e-6)


def test_sgd_shape_mismatch():
    p = nn.as_f32([1.0])
    opt = nn.SgdMomentum([p])
    with pytest.raises(ShapeError):
        opt.step([p], [nn.as_f32([1.0, 2.0])], lr=0.1)


def test_adam_zero_grad_keeps_params():
    p = nn.as_f32([1.0, 2.0])
    opt = nn.Adam([p])
    opt.step([p], [np.zeros(2, dtype=nn.DTYPE)], lr=0.001)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_first_step_magnitude():
    p = nn.as_f32([0.0])
    opt = nn.Adam([p])
    opt.step([p], [nn.as_f32([1.0])], lr=0.001)
    assert abs(p[0] + 0.001) < 1e-6  # bias-corrected m/(sqrt(v)+eps) ~ 1


def _scripted_adam(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent reference Adam in float64."""
    p = float(p0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_adam_two_steps_match_scripted_oracle():
    p = nn.as_f32([0.5])
    opt = nn.Adam([p])
    for g in (0.3, -0.7):
        opt.step([p], [nn.as_f32([g])], lr=0.01)
    expected = _scripted_adam(0.5, [0.3, -0.7], 0.01)
    assert abs(float(p[0]) - expected) < 1e-7


def test_optimizer_replay_reproduces_bitwise():
    rng = np.random.default_rng(11)
    trajectory = [rng.normal(size=4).astype(nn.DTYPE) for _ in range(20)]
    finals = []
    for _ in range(2):
        p = nn.as_f32([0.1, -0.2, 0.3, 0.4])
        opt = nn.SgdMomentum([p], momentum=0.9, weight_decay=0.0005)
        for i, g in enumerate(trajectory):
            opt.step([p], [g], lr=nn.cosine_lr(i, 20, 0.06))
        finals.append(p.copy())
    np.testing.assert_array_equal(finals[0], finals[1])


# -- cosine schedule -----------------------------------------------------------


def test_cosine_schedule_endpoints_and_midpoint():
    assert nn.cosine_lr(0, 100, 0.06) == pytest.approx(0.06)
    assert nn.cosine_lr(100, 100, 0.06) == pytest.approx(0.0, abs=1e-12)
    assert nn.cosine_lr(50, 100, 0.06) == pytest.approx(0.03)


def test_cosine_schedule_range_errors():
    with pytest.raises(ConfigError):
        nn.cosine_lr(-1, 10, 0.1)
    with pytest.raises(ConfigError):
        nn.cosine_lr(11, 10, 0.1)
    with pytest.raises(ConfigError):
        nn.cosine_lr(0, 0, 0.1)


# -- losses ---------------------------------------------------------------------


def test_mse_loss_value_and_grad():
    pred = nn.as_f32([[1.0, 2.0]])
    target = nn.as_f32([[0.0, 0.0]])
    loss, grad = nn.mse_loss(pred, target)
    assert loss == pytest.approx(2.5)
    np.testing.assert_allclose(grad, [[1.0, 2.0]])


def test_softmax_cross_entropy_uniform_case():
    logits = np.zeros((2, 4), dtype=nn.DTYPE)
    labels = np.array([0, 3])
    loss, grad = nn.softmax_cross_entropy(logits, labels)
    assert loss == pytest.approx(math.log(4.0), rel=1e-5)
    assert grad.shape == (2, 4)
    np.testing.assert_allclose(grad.sum(axis=1), [0.0, 0.0], atol=1e-7)


def test_softmax_cross_entropy_label_range():
    with pytest.raises(ConfigError):
        nn.softmax_cross_entropy(np.zeros((1, 2), dtype=nn.DTYPE), np.array([2]))


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    pred = rng.normal(size=(3, 4)).astype(nn.DTYPE)
    target = rng.normal(size=(3, 4)).astype(nn.DTYPE)
    _, grad = nn.mse_loss(pred, target)
    from oracles import fd_scalar_fn_grad

    fd = fd_scalar_fn_grad(lambda a: nn.mse_loss(a, target)[0], pred.copy())
    assert_grads_close(grad, fd)

    logits = rng.normal(size=(3, 5)).astype(nn.DTYPE)
    labels = np.array([0, 2, 4])
    _, grad = nn.softmax_cross_entropy(logits, labels)
    fd = fd_scalar_fn_grad(lambda a: nn.softmax_cross_entropy(a, labels)[0], logits.copy())
    assert_grads_close(grad, fd)
