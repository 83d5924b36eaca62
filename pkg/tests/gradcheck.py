"""Central finite-difference oracle shared by the nn and acceptance tests."""

import numpy as np

from targeted.nn import (
    SOFTMAX_CROSS_ENTROPY,
    SQUARED_ERROR,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    Network,
    ReLU,
    build_convnet,
    build_mlp,
    loss_and_gradient,
)

STEP = 1e-5
# below this magnitude both gradients count as zero; FD noise at step 1e-5
# is around 1e-11 so the floor only matters for coordinates that vanish
FLOOR = 1e-8


def relative_errors(net, x, y, coords, step=STEP):
    _, grad = loss_and_gradient(net, x, y)
    errs = []
    for c in coords:
        up, down = net.theta.copy(), net.theta.copy()
        up[c] += step
        down[c] -= step
        fd = (loss_and_gradient(net.with_parameters(up), x, y)[0]
              - loss_and_gradient(net.with_parameters(down), x, y)[0]) / (2 * step)
        errs.append(abs(grad[c] - fd) / max(abs(grad[c]), abs(fd), FLOOR))
    return np.array(errs)


def _init(layers, shape, head, rng):
    from targeted.nn import _init_network
    return _init_network(layers, shape, head, rng)


def configurations(rng):
    """(name, net, x, y) covering every layer type and both heads."""
    out = []
    net = build_mlp(6, (12, 10), SQUARED_ERROR, rng)
    out.append(("dense-squared-error", net, rng.standard_normal((7, 6)), rng.standard_normal(7)))
    net = build_mlp(5, (20,), SOFTMAX_CROSS_ENTROPY, rng, n_classes=4)
    out.append(("dense-softmax", net, rng.standard_normal((7, 5)), rng.integers(0, 4, 7)))
    net = _init([Conv2d(1, 3, 3), ReLU(), Flatten(), Dense(3 * 8 * 8, 3)], (1, 10, 10),
                SOFTMAX_CROSS_ENTROPY, rng)
    out.append(("conv-k3", net, rng.standard_normal((3, 1, 10, 10)), rng.integers(0, 3, 3)))
    net = _init([Conv2d(2, 3, 5), ReLU(), Flatten(), Dense(3 * 6 * 6, 1)], (2, 10, 10),
                SQUARED_ERROR, rng)
    out.append(("conv-k5", net, rng.standard_normal((3, 2, 10, 10)), rng.standard_normal(3)))
    net = _init([Conv2d(1, 4, 3), MaxPool2d(2, 2), Flatten(), Dense(4 * 4 * 4, 3)], (1, 10, 10),
                SOFTMAX_CROSS_ENTROPY, rng)
    out.append(("max-pool", net, rng.standard_normal((3, 1, 10, 10)), rng.integers(0, 3, 3)))
    net = build_convnet((1, 16, 16), (3, 5), (4, 8), 10, rng)
    out.append(("convnet", net, rng.standard_normal((3, 1, 16, 16)), rng.integers(0, 10, 3)))
    return out


def sample_coords(net: Network, rng, count=200):
    n = net.param_count
    if n <= count:
        return np.arange(n)
    return rng.choice(n, size=count, replace=False)
