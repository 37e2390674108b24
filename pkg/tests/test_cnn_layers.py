import numpy as np
import pytest

import cnn_layers as layers


def _naive_conv(x, filters, bias):
    n_filters, channels, ph, pw = filters.shape
    _, height, width = x.shape
    out = np.zeros((n_filters, height - ph + 1, width - pw + 1))
    for f in range(n_filters):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[f, i, j] = np.sum(x[:, i:i + ph, j:j + pw] * filters[f]) + bias[f]
    return out


def _numeric_grad(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        saved = array[idx]
        array[idx] = saved + eps
        up = fn()
        array[idx] = saved - eps
        down = fn()
        array[idx] = saved
        grad[idx] = (up - down) / (2 * eps)
    return grad


def test_conv_forward_matches_loops():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 6, 5))
    filters = rng.standard_normal((3, 2, 3, 2))
    bias = rng.standard_normal(3)
    out = layers.conv_forward(x, filters, bias)
    assert out.shape == (3, 4, 4)
    np.testing.assert_allclose(out, _naive_conv(x, filters, bias), rtol=1e-12, atol=1e-12)

    batch = np.stack([x, 2 * x])
    out_batch = layers.conv_forward(batch, filters, bias)
    np.testing.assert_allclose(out_batch[1], _naive_conv(2 * x, filters, bias), rtol=1e-12, atol=1e-12)


def test_conv_forward_matches_torch():
    torch = pytest.importorskip('torch')
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 7))
    filters = rng.standard_normal((4, 3, 3, 3))
    bias = rng.standard_normal(4)
    expected = torch.nn.functional.conv2d(torch.from_numpy(x), torch.from_numpy(filters),
                                          torch.from_numpy(bias)).numpy()
    np.testing.assert_allclose(layers.conv_forward(x, filters, bias), expected, rtol=1e-10, atol=1e-10)


def test_conv_rejects_oversized_patch():
    with pytest.raises(layers.PatchTooLarge):
        layers.conv_forward(np.zeros((1, 3, 3)), np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 4))
    filters = rng.standard_normal((3, 2, 2, 3))
    bias = rng.standard_normal(3)
    upstream = rng.standard_normal((2, 3, 4, 2))

    def loss():
        return float(np.sum(layers.conv_forward(x, filters, bias) * upstream))

    dx, dw, db = layers.conv_backward(x, filters, upstream)
    np.testing.assert_allclose(dx, _numeric_grad(loss, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, _numeric_grad(loss, filters), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, _numeric_grad(loss, bias), rtol=1e-6, atol=1e-8)


def test_maxpool_halves_and_routes_gradient():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out, record = layers.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(out, [[[5, 7], [13, 15]]])

    grad = layers.maxpool_backward(np.ones((1, 2, 2)), record)
    expected = np.zeros((1, 4, 4))
    expected[0, [1, 1, 3, 3], [1, 3, 1, 3]] = 1
    np.testing.assert_array_equal(grad, expected)


def test_maxpool_drops_ragged_edge_and_takes_first_maximum():
    x = np.ones((1, 5, 5))
    out, record = layers.maxpool_forward(x, 2, 2)
    assert out.shape == (1, 2, 2)
    grad = layers.maxpool_backward(np.ones((1, 2, 2)), record)
    assert grad.sum() == 4
    assert grad[0, 0, 0] == 1 and grad[0, 1, 1] == 0
    assert grad[0, 4, :].sum() == 0 and grad[0, :, 4].sum() == 0


def test_maxpool_larger_than_input():
    with pytest.raises(layers.PoolLargerThanInput):
        layers.maxpool_forward(np.zeros((1, 1, 3)), 2, 2)


def test_relu_pair():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(layers.relu_forward(x), [0, 0, 2])
    np.testing.assert_array_equal(layers.relu_backward(x, np.array([5.0, 5.0, 5.0])), [0, 0, 5])


def test_softmax_sums_to_one_even_for_large_logits():
    logits = np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 3.0]])
    probs = layers.softmax(logits)
    assert np.all(np.isfinite(probs))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_cross_entropy_is_mean_negative_log_probability():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 0])
    probs = layers.softmax(logits)
    expected = -np.mean(np.log(probs[[0, 1], labels]))
    assert layers.cross_entropy(logits, labels) == pytest.approx(expected, rel=1e-12)


def test_dense_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    features = rng.standard_normal((3, 5))
    weights = rng.standard_normal((5, 2))
    bias = rng.standard_normal(2)
    upstream = rng.standard_normal((3, 2))

    def loss():
        return float(np.sum(layers.dense_forward(features, weights, bias) * upstream))

    dfeat, dw, db = layers.dense_backward(features, weights, upstream)
    np.testing.assert_allclose(dfeat, _numeric_grad(loss, features), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, _numeric_grad(loss, weights), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(db, _numeric_grad(loss, bias), rtol=1e-6, atol=1e-8)


def test_dropout_identity_cases():
    x = np.arange(6.0)
    assert layers.dropout_apply(x, 0.5, training=False) is x
    assert layers.dropout_apply(x, 0.0, training=True, rng=np.random.default_rng(0)) is x
    with pytest.raises(layers.LayerError):
        layers.dropout_apply(x, 0.5, training=True)
    with pytest.raises(layers.LayerError):
        layers.dropout_mask((3,), 1.0, np.random.default_rng(0))


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(5)
    mask = layers.dropout_mask((1_000_000,), 0.2, rng)
    assert set(np.unique(mask)) == {0.0, 1.0 / 0.8}
    assert mask.mean() == pytest.approx(1.0, rel=0.01)
    assert (mask == 0).mean() == pytest.approx(0.2, abs=0.005)
