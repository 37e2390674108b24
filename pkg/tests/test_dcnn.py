import numpy as np
import pytest

import cnn_layers
import dcnn
from dcnn import (ConvLayerSpec, NetworkConfig, InvalidConfig, ShapeMismatch, DivergedLoss, init_network,
                  prepare_inputs, forward_pass, backward, batch_loss, validate_shape_chain, resolve_upsample,
                  train, train_with_retry, extract_features, predict_dcnn, predict_proba_dcnn,
                  save_checkpoint, load_checkpoint)
from preprocessing import GridShape, Preprocessor, to_grid_batch
from conftest import make_separable


def _tiny_config(**overrides):
    settings = dict(conv_layers=('3-2-2-1-1',), dense_units=8, batch_size=10, learning_rate=0.1, momentum=0.9,
                    input_dropout=0.0, hidden_dropout=0.0, epochs=30, seed=3)
    settings.update(overrides)
    return NetworkConfig(**settings)


def _normalised(ds):
    return Preprocessor.fit(ds).transform(ds)


def test_conv_layer_spec_notation():
    spec = ConvLayerSpec.parse('6-3-3-2-2')
    assert (spec.feature_maps, spec.patch_w, spec.patch_h, spec.pool_w, spec.pool_h) == (6, 3, 3, 2, 2)
    assert str(spec) == '6-3-3-2-2'
    with pytest.raises(InvalidConfig):
        ConvLayerSpec.parse('6-3-3-2')
    with pytest.raises(InvalidConfig):
        ConvLayerSpec.parse('6-3-0-2-2')


def test_presets_are_frozen():
    small = NetworkConfig.from_preset('paper-small')
    large = NetworkConfig.from_preset('paper-large')
    assert [str(l) for l in small.conv_layers] == ['6-3-3-2-2', '12-3-3-2-2']
    assert [str(l) for l in large.conv_layers] == ['20-5-5-2-2', '100-5-5-2-2']
    assert small.dense_units == 64
    with pytest.raises(InvalidConfig, match='unknown network preset'):
        NetworkConfig.from_preset('huge')


@pytest.mark.parametrize('field, value', [('learning_rate', 0.0), ('momentum', 1.0), ('input_dropout', 1.0),
                                          ('epochs', 0), ('init_scale', 'gaussian'), ('input_upsample', 0)])
def test_config_validation(field, value):
    with pytest.raises(InvalidConfig, match=field):
        _tiny_config(**{field: value})


def test_config_yaml(tmp_path):
    path = tmp_path / 'net.yaml'
    path.write_text("preset: paper-small\nepochs: 5\nlearning_rate: 0.5\n", encoding='utf-8')
    config = NetworkConfig.from_yaml(str(path))
    assert config.epochs == 5 and config.learning_rate == 0.5
    assert str(config.conv_layers[1]) == '12-3-3-2-2'


def test_shape_chain_rejects_large_patches_on_small_grids():
    large = NetworkConfig.from_preset('paper-large', input_upsample=1)
    with pytest.raises(InvalidConfig, match='layer 0'):
        validate_shape_chain(large, GridShape(3, 3, 0))


def test_auto_upsample_picks_smallest_fitting_factor():
    small = NetworkConfig.from_preset('paper-small')
    assert small.input_upsample == 'auto'
    # two 3x3 convs with 2x2 pools need a side of at least 10
    assert resolve_upsample(small, GridShape(3, 3, 0)) == 4
    assert resolve_upsample(small, GridShape(8, 8, 0)) == 2
    assert resolve_upsample(small, GridShape(10, 10, 0)) == 1
    assert validate_shape_chain(small, GridShape(8, 8, 0)) == [(6, 7, 7), (12, 2, 2)]


def test_init_shapes_and_parameter_count():
    net = init_network(_tiny_config(), GridShape(3, 3, 0), n_classes=3)
    assert net.conv_filters[0].shape == (3, 1, 2, 2)
    assert net.dense_weights[0].shape == (12, 8)
    assert net.output_weights[0].shape == (8, 3)
    assert net.parameter_count() == (12 + 3) + (96 + 8) + (24 + 3)
    assert not np.any(net.conv_biases[0])


def test_prepare_inputs_checks_grid_and_upsamples():
    net = init_network(_tiny_config(input_upsample=2), GridShape(3, 3, 0), n_classes=2)
    grids = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    up = prepare_inputs(net, grids)
    assert up.shape == (1, 1, 6, 6)
    assert up[0, 0, 0, 1] == 0 and up[0, 0, 0, 2] == 1 and up[0, 0, 5, 5] == 8
    with pytest.raises(ShapeMismatch):
        prepare_inputs(net, np.zeros((1, 1, 4, 4)))


def _relative_gradient_error(net, inputs, labels, masks=None):
    grads = backward(net, forward_pass(net, inputs, masks), labels)
    analytic, numeric = [], []
    eps = 1e-5
    for name, weights in net.params.items():
        for idx in np.ndindex(weights.shape):
            saved = weights[idx]
            weights[idx] = saved + eps
            up = batch_loss(net, inputs, labels, masks)
            weights[idx] = saved - eps
            down = batch_loss(net, inputs, labels, masks)
            weights[idx] = saved
            numeric.append((up - down) / (2 * eps))
            analytic.append(grads[name][idx])
    analytic, numeric = np.array(analytic), np.array(numeric)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


def _perturbed_network(config, side, n_classes, rng):
    net = init_network(config, GridShape(side, side, 0), n_classes)
    for name in net.params:
        net.params[name] += 0.1 * rng.standard_normal(net.params[name].shape)
    return net


def _gradient_check(seed):
    rng = np.random.default_rng(seed)
    side = int(rng.integers(5, 8))
    patch = int(rng.integers(1, 4))
    pool = int(rng.integers(1, 3))
    config = NetworkConfig(conv_layers=(f"{int(rng.integers(1, 4))}-{patch}-{patch}-{pool}-{pool}",),
                           dense_units=int(rng.integers(2, 6)), input_dropout=0.0, hidden_dropout=0.0,
                           seed=seed, learning_rate=0.1)
    n_classes = int(rng.integers(2, 5))
    net = _perturbed_network(config, side, n_classes, rng)
    assert net.parameter_count() <= 1000
    return _relative_gradient_error(net, rng.random((4, 1, side, side)), rng.integers(0, n_classes, 4))


@pytest.mark.parametrize('seed', range(5))
def test_backward_matches_finite_differences(seed):
    assert _gradient_check(seed) < 1e-4


@pytest.mark.slow
def test_backward_matches_finite_differences_many_networks():
    errors = [_gradient_check(seed) for seed in range(100, 200)]
    assert max(errors) < 1e-4


@pytest.mark.parametrize('with_dropout', [False, True])
def test_backward_through_two_conv_layers(with_dropout):
    rng = np.random.default_rng(11)
    config = NetworkConfig(conv_layers=('6-3-3-2-2', '12-3-3-2-2'), dense_units=8, input_dropout=0.2,
                           hidden_dropout=0.5, seed=11, learning_rate=0.1)
    net = _perturbed_network(config, 10, 3, rng)
    assert validate_shape_chain(config, GridShape(10, 10, 0)) == [(6, 4, 4), (12, 1, 1)]
    masks = dcnn.sample_dropout_masks(net, 4, np.random.default_rng(5)) if with_dropout else None
    error = _relative_gradient_error(net, rng.random((4, 1, 10, 10)), rng.integers(0, 3, 4), masks)
    assert error < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    net = _perturbed_network(_tiny_config(), 4, 3, rng)
    inputs, labels = rng.random((6, 1, 4, 4)), rng.integers(0, 3, 6)
    first = backward(net, forward_pass(net, inputs), labels)
    second = backward(net, forward_pass(net, inputs), labels)
    assert list(first) == list(net.params)
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


def test_sgd_momentum_step_accumulates_velocity():
    weights = {'w': np.array([1.0])}
    velocity = {'w': np.array([0.0])}
    gradient = {'w': np.array([1.0])}
    dcnn.sgd_momentum_step(weights, gradient, velocity, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(velocity['w'], [-0.1])
    np.testing.assert_allclose(weights['w'], [0.9])
    dcnn.sgd_momentum_step(weights, gradient, velocity, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(velocity['w'], [-0.19])
    np.testing.assert_allclose(weights['w'], [0.71])


def test_training_reduces_loss_and_fits_separable_data():
    ds = _normalised(make_separable(n_per_class=20, n_classes=2))
    net = train(ds, _tiny_config(), progress=False)
    assert len(net.loss_history) == 30
    assert net.loss_history[-1] < 0.5 * net.loss_history[0]
    assert np.mean(predict_dcnn(net, ds) == ds.labels) >= 0.9


def test_training_is_deterministic():
    ds = _normalised(make_separable())
    config = _tiny_config(epochs=3, input_dropout=0.2, hidden_dropout=0.5)
    a = train(ds, config, progress=False)
    b = train(ds, config, progress=False)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert a.loss_history == b.loss_history


def test_non_finite_loss_raises_diverged(monkeypatch):
    ds = _normalised(make_separable())
    monkeypatch.setattr(cnn_layers, 'cross_entropy', lambda logits, labels: float('nan'))
    with pytest.raises(DivergedLoss, match='smaller learning rate') as info:
        train(ds, _tiny_config(epochs=2), progress=False)
    assert info.value.epoch == 1


def test_train_with_retry_divides_learning_rate(monkeypatch):
    ds = _normalised(make_separable())
    real_train = dcnn.train

    def flaky(data, config, progress=False):
        if config.learning_rate > 0.05:
            raise DivergedLoss("diverged", learning_rate=config.learning_rate, epoch=1)
        return real_train(data, config, progress=progress)

    monkeypatch.setattr(dcnn, 'train', flaky)
    net, tried = train_with_retry(ds, _tiny_config(learning_rate=0.9, epochs=1), retries=2, progress=False)
    assert tried == pytest.approx([0.9, 0.09, 0.009])
    assert net.config.learning_rate == pytest.approx(0.009)

    with pytest.raises(DivergedLoss):
        train_with_retry(ds, _tiny_config(learning_rate=0.9, epochs=1), retries=1, progress=False)


def test_extract_features_and_predictions():
    ds = _normalised(make_separable())
    net = train(ds, _tiny_config(epochs=2), progress=False)
    features = extract_features(net, ds)
    assert (features.rows, features.cols) == (ds.n, 8)
    assert np.all(features.values >= 0)
    np.testing.assert_array_equal(features.values, extract_features(net, ds).values)
    probs = predict_proba_dcnn(net, ds)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    inputs = prepare_inputs(net, to_grid_batch(ds.instances))
    np.testing.assert_allclose(probs, forward_pass(net, inputs).probs, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(predict_dcnn(net, ds), np.argmax(probs, axis=1))

    wider = _normalised(make_separable(d=16))
    with pytest.raises(ShapeMismatch):
        extract_features(net, wider)


def test_checkpoint_round_trip_is_exact_and_byte_stable(tmp_path):
    raw = make_separable()
    prep = Preprocessor.fit(raw)
    net = train(prep.transform(raw), _tiny_config(epochs=2), progress=False)
    net.preprocessor = prep
    net.class_names = list(raw.class_names)
    net.nominal_values = {4: ['low', 'high']}
    first, second = tmp_path / 'a.ckpt', tmp_path / 'b.ckpt'
    save_checkpoint(net, str(first))
    save_checkpoint(net, str(second))
    assert first.read_bytes() == second.read_bytes()

    loaded = load_checkpoint(str(first))
    assert loaded.config == net.config
    assert loaded.grid == net.grid and loaded.upsample == net.upsample
    assert list(loaded.params) == list(net.params)
    for name in net.params:
        np.testing.assert_array_equal(loaded.params[name], net.params[name])
    assert loaded.loss_history == net.loss_history
    np.testing.assert_array_equal(loaded.preprocessor.scaling.maximum, prep.scaling.maximum)
    assert loaded.class_names == ['c0', 'c1', 'c2']
    assert loaded.nominal_values == {4: ['low', 'high']}


def test_load_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / 'junk.ckpt'
    path.write_bytes(b'not a checkpoint')
    with pytest.raises(dcnn.NetworkError):
        load_checkpoint(str(path))
