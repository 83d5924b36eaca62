import math

import numpy as np
import pytest

from gradcheck import configurations, relative_errors, sample_coords
from targeted.nn import (
    SOFTMAX_CROSS_ENTROPY,
    SQUARED_ERROR,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    Network,
    ReLU,
    ShapeError,
    build_convnet,
    build_mlp,
    evaluate,
    forward,
    head_loss,
    load_checkpoint,
    loss_and_gradient,
    save_checkpoint,
    sgd_step,
    softmax,
)


def linear(w, b=0.0):
    layer = Dense(len(w), 1)
    return Network((layer,), (len(w),), SQUARED_ERROR, np.concatenate([w, [b]]))


def test_dense_forward_example():
    assert forward(linear(np.array([1.0, 1.0])), [3.0, 4.0])[0, 0] == 7.0


def test_relu_example():
    out, _ = ReLU().forward(np.array([[-1.0, 2.0]]), np.zeros(0))
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_maxpool_example():
    out, _ = MaxPool2d(2).forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.zeros(0))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0


def test_maxpool_backward_routes_to_argmax():
    pool = MaxPool2d(2)
    x = np.array([[[[1.0, 5.0, 0.0], [3.0, 4.0, 9.0], [7.0, 7.0, 7.0]]]])
    out, cache = pool.forward(x, np.zeros(0))
    dx, _ = pool.backward(np.ones_like(out), cache, np.zeros(0))
    expected = np.zeros_like(x)
    expected[0, 0, 0, 1] = 1.0
    np.testing.assert_array_equal(dx, expected)


def test_conv_matches_direct_loop(rng):
    conv = Conv2d(2, 3, 3)
    params = rng.standard_normal(conv.param_count())
    x = rng.standard_normal((2, 2, 6, 5))
    out, _ = conv.forward(x, params)
    w = params[:54].reshape(3, 2, 3, 3)
    b = params[54:]
    ref = np.zeros((2, 3, 4, 3))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_linear_gradient_by_hand():
    w = np.array([0.5, -1.0, 2.0])
    x = np.array([1.0, 2.0, 3.0])
    y = 1.5
    loss, grad = loss_and_gradient(linear(w), x[None], [y])
    resid = w @ x - y
    assert loss == pytest.approx(resid ** 2)
    np.testing.assert_allclose(grad[:3], 2 * resid * x, rtol=1e-14)
    assert grad[3] == pytest.approx(2 * resid)


@pytest.mark.parametrize("k", [2, 3, 10])
def test_softmax_uniform_logits_loss_is_log_k(k):
    loss, _ = head_loss(SOFTMAX_CROSS_ENTROPY, np.full((4, k), 0.7), [0, 1, 1, 0])
    assert loss == pytest.approx(math.log(k), abs=1e-14)


def test_softmax_gradient_identity(rng):
    logits = rng.standard_normal((9, 5)) * 3
    y = rng.integers(0, 5, 9)
    _, grad = head_loss(SOFTMAX_CROSS_ENTROPY, logits, y)
    onehot = np.eye(5)[y]
    np.testing.assert_allclose(grad, (softmax(logits) - onehot) / 9, atol=1e-10)


def test_softmax_is_stable_for_large_logits():
    logits = np.array([[1000.0, 0.0, -1000.0]])
    loss, grad = head_loss(SOFTMAX_CROSS_ENTROPY, logits, [0])
    assert loss == 0.0 and np.all(np.isfinite(grad))


@pytest.mark.parametrize("index", range(6))
def test_finite_difference_gradients(index):
    rng = np.random.default_rng(100 + index)
    name, net, x, y = configurations(rng)[index]
    errs = relative_errors(net, x, y, sample_coords(net, rng))
    assert errs.max() < 1e-4, name


def test_mlp_parameter_count():
    net = build_mlp(25, (150, 50), SQUARED_ERROR, np.random.default_rng(0))
    assert net.param_count == 25 * 150 + 150 + 150 * 50 + 50 + 50 * 1 + 1 == 11_501
    kinds = [layer.kind for layer in net.layers]
    assert kinds == ["dense", "relu", "dense", "relu", "dense"]


def test_mlp_classification_output_dim():
    net = build_mlp(21, (150, 50), SOFTMAX_CROSS_ENTROPY, np.random.default_rng(0), n_classes=10)
    assert net.output_dim == 10
    assert forward(net, np.zeros((3, 21))).shape == (3, 10)


def test_mlp_init_deterministic():
    a = build_mlp(4, (8,), SQUARED_ERROR, np.random.default_rng(5))
    b = build_mlp(4, (8,), SQUARED_ERROR, np.random.default_rng(5))
    np.testing.assert_array_equal(a.theta, b.theta)


def test_mlp_init_scale():
    net = build_mlp(400, (300,), SQUARED_ERROR, np.random.default_rng(0))
    w = net.layer_params(0)[:400 * 300]
    assert np.std(w) == pytest.approx(math.sqrt(2 / 400), rel=0.02)
    np.testing.assert_array_equal(net.layer_params(0)[400 * 300:], 0.0)


def test_mlp_rejects_zero_width():
    with pytest.raises(ValueError):
        build_mlp(3, (0,), SQUARED_ERROR, np.random.default_rng(0))


def test_convnet_shapes():
    net = build_convnet(rng=np.random.default_rng(0))
    shape = net.input_shape
    shapes = []
    for layer in net.layers:
        shape = layer.output_shape(shape)
        shapes.append(shape)
    assert shapes[0] == (16, 26, 26)
    assert shapes[2] == (16, 13, 13)
    assert shapes[3] == (32, 9, 9)
    assert shapes[5] == (32, 4, 4)
    assert shapes[6] == (512,)
    # confirm the flatten width with an actual pass
    x = np.random.default_rng(1).standard_normal((2, 1, 28, 28))
    for i, layer in enumerate(net.layers[:7]):
        x, _ = layer.forward(x, net.layer_params(i))
    assert x.shape == (2, 512)
    assert net.output_dim == 10


def test_convnet_underflow():
    with pytest.raises(ShapeError):
        build_convnet((1, 8, 8), rng=np.random.default_rng(0))


def test_network_shape_mismatch():
    with pytest.raises(ShapeError):
        Network((Dense(3, 2), Dense(4, 1)), (3,), SQUARED_ERROR, np.zeros(8 + 5))
    net = linear(np.ones(3))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        loss_and_gradient(net, np.zeros((2, 3)), [1.0])
    with pytest.raises(ShapeError):
        loss_and_gradient(net, np.zeros((0, 3)), [])


def test_parameter_count_is_sum_of_layers():
    net = build_convnet((1, 16, 16), (3, 5), (4, 8), 10, np.random.default_rng(0))
    assert net.param_count == sum(layer.param_count() for layer in net.layers)


def test_sgd_examples():
    net = linear(np.array([1.0]), 1.0)
    stepped = sgd_step(net, np.array([2.0, -2.0]), 0.005)
    np.testing.assert_allclose(stepped.theta, [0.99, 1.01], rtol=1e-15)
    assert sgd_step(net, np.zeros(2), 0.005).theta.tolist() == net.theta.tolist()
    g1, g2 = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    twice = sgd_step(sgd_step(net, g1, 0.005), g2, 0.005)
    np.testing.assert_allclose(twice.theta, net.theta - 0.005 * (g1 + g2), atol=1e-15)
    np.testing.assert_array_equal(net.theta, [1.0, 1.0])


def test_sgd_length_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(linear(np.ones(2)), np.zeros(2), 0.1)


def test_evaluate_examples():
    net = linear(np.array([1.0]))
    assert evaluate(net, [[2.0]], [1.0], "squared-error") == 1.0
    w = np.zeros(3 * 3 + 3)
    w[:9] = (10 * np.eye(3)).ravel()
    clf = Network((Dense(3, 3),), (3,), SOFTMAX_CROSS_ENTROPY, w)
    x = np.eye(3)[[0, 1, 2, 1, 0]]
    y = np.array([0, 1, 2, 1, 0])
    assert evaluate(clf, x, y, "accuracy") == 1.0
    assert evaluate(clf, x, y, "zero-one") == 0.0
    assert evaluate(clf, x, y, "cross-entropy") < 1e-3


def test_random_predictor_accuracy(rng):
    net = build_mlp(8, (16,), SOFTMAX_CROSS_ENTROPY, rng, n_classes=10)
    x = rng.standard_normal((5000, 8))
    y = np.repeat(np.arange(10), 500)
    assert abs(evaluate(net, x, y, "accuracy") - 0.1) <= 0.03


def test_forward_deterministic(rng):
    net = build_convnet((1, 16, 16), (3, 5), (4, 8), 10, rng)
    x = rng.standard_normal((4, 1, 16, 16))
    assert forward(net, x).tobytes() == forward(net, x).tobytes()


def test_flat_images_accepted(rng):
    net = build_convnet((1, 16, 16), (3, 5), (4, 8), 10, rng)
    x = rng.standard_normal((2, 1, 16, 16))
    np.testing.assert_array_equal(forward(net, x), forward(net, x.reshape(2, 256)))


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_convnet((1, 16, 16), (3, 5), (4, 8), 10, rng)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert back.theta.tobytes() == net.theta.tobytes()
    assert back.describe() == net.describe()
    x = rng.standard_normal((2, 1, 16, 16))
    np.testing.assert_array_equal(forward(back, x), forward(net, x))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_loss_decreases_on_learnable_problem():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((512, 5))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0, 1.5])
    net = build_mlp(5, (150, 50), SQUARED_ERROR, rng)
    epoch_losses = []
    for _ in range(5):
        order = rng.permutation(512)
        losses = []
        for start in range(0, 512, 64):
            idx = order[start:start + 64]
            loss, grad = loss_and_gradient(net, x[idx], y[idx])
            net = sgd_step(net, grad, 0.005)
            losses.append(loss)
        epoch_losses.append(np.mean(losses))
    assert epoch_losses[-1] < epoch_losses[0]
    assert np.mean(np.diff(epoch_losses)) < 0
