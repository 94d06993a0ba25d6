"""Parity between the compiled and numpy kernel backends."""

import numpy as np
import pytest

from dpfine import backend, nn
from dpfine import _kernels_numpy as pk

native = pytest.importorskip("dpfine._native")


@pytest.fixture(params=[(9, 5, 7, 8, 3, 1, 1), (5, 3, 4, 9, 3, 2, 1), (6, 2, 3, 6, 2, 1, 0)],
                ids=["pad1", "stride2", "kernel2-pad0"])
def conv_case(request, rng):
    b, cin, cout, h, kk, stride, pad = request.param
    x = rng.standard_normal((b, cin, h, h))
    w = rng.standard_normal((cout, cin, kk, kk))
    bias = rng.standard_normal(cout)
    return x, w, bias, stride, pad


def test_conv_forward_parity(conv_case):
    x, w, bias, stride, pad = conv_case
    y1, _ = pk.conv2d_forward(x, w, bias, stride, pad)
    y2, _ = native.conv2d_forward(x, w, bias, stride, pad)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("aug_k", [1, 3])
def test_conv_backward_parity(conv_case, rng, aug_k):
    x, w, bias, stride, pad = conv_case
    if x.shape[0] % aug_k:
        x = x[: (x.shape[0] // aug_k) * aug_k]
    y, ctx = pk.conv2d_forward(x, w, bias, stride, pad)
    dy = rng.standard_normal(y.shape)
    r1 = pk.conv2d_backward(x, w, dy, stride, pad, True, True, aug_k, ctx)
    r2 = native.conv2d_backward(x, w, dy, stride, pad, True, True, aug_k)
    for a, b in zip(r1, r2):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


def test_dense_parity(rng):
    x = rng.standard_normal((12, 20))
    w = rng.standard_normal((6, 20))
    bias = rng.standard_normal(6)
    np.testing.assert_allclose(
        pk.dense_forward(x, w, bias), native.dense_forward(x, w, bias), rtol=1e-13
    )
    dy = rng.standard_normal((12, 6))
    for aug_k in (1, 4):
        r1 = pk.dense_backward(x, w, dy, True, True, aug_k)
        r2 = native.dense_backward(x, w, dy, True, True, aug_k)
        for a, b in zip(r1, r2):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_groupnorm_parity(rng):
    x = rng.standard_normal((6, 10, 4, 4))
    gamma = rng.standard_normal(10) + 2.0
    beta = rng.standard_normal(10)
    f1 = pk.groupnorm_forward(x, 5, gamma, beta, 1e-5)
    f2 = native.groupnorm_forward(x, 5, gamma, beta, 1e-5)
    for a, b in zip(f1[:3], f2[:3]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    dy = rng.standard_normal(x.shape)
    b1 = pk.groupnorm_backward(x, gamma, f1[1], f1[2], dy, 5, True, 2, f1[3])
    b2 = native.groupnorm_backward(x, gamma, f2[1], f2[2], dy, 5, True, 2, f2[3])
    for a, b in zip(b1, b2):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


def test_elementwise_parity(rng):
    x = rng.standard_normal((7, 6, 4, 4))
    dy = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(pk.relu_forward(x), native.relu_forward(x))
    np.testing.assert_array_equal(pk.relu_backward(x, dy), native.relu_backward(x, dy))
    np.testing.assert_allclose(
        pk.meanpool_forward(x, 2), native.meanpool_forward(x, 2), rtol=1e-14
    )
    small = rng.standard_normal((7, 6, 2, 2))
    np.testing.assert_allclose(
        pk.meanpool_backward(small, 2), native.meanpool_backward(small, 2), rtol=1e-14
    )


def test_full_model_gradients_agree(rng):
    model = nn.build_small_cnn(seed=21, width=4, hidden=8)
    x = rng.random((6, 1, 8, 8))
    labels = rng.integers(0, 10, 6)
    prev = backend.use_backend("python")
    try:
        rows_py = nn.backward_per_example(model, x, labels)
        logits_py = nn.forward(model, x)
        backend.use_backend("native")
        rows_nat = nn.backward_per_example(model, x, labels)
        logits_nat = nn.forward(model, x)
    finally:
        backend.use_backend(prev)
    np.testing.assert_allclose(logits_py, logits_nat, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(rows_py, rows_nat, rtol=1e-9, atol=1e-11)


def test_backend_selection_env(monkeypatch):
    assert backend.active_backend() in backend.available_backends()
    prev = backend.use_backend("python")
    assert backend.active_backend() == "python"
    backend.use_backend(prev)
    assert backend.active_backend() == prev
