import numpy as np
import pytest

from shared.errors import NumericError, ShapeError, ValidationError
from services.engine import layers as L
from services.engine.model import (
    BnMode, LayerSpec, ModelState, build_model, flatten_params, last_feature_layer,
    model_from_layers, params_checksum, unflatten_params
)
from services.engine.network import (
    bn_reestimate, collect_bn_stats, features, forward, layer_output, loss_and_grad, predict
)
from services.engine.optim import add_scaled, grad_norm, param_l2_norm, sgd_step
from tests.conftest import assert_gradients_match, gradient_check


def _mlp_batch(n=6, seed=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 1, 4, 4)), rng.integers(0, 3, size=n)


def _scalar_model(weight=1.0, bias=0.0):
    spec = LayerSpec('dense', 'fc', {'in_features': 1, 'out_features': 1})
    return ModelState(layers=[spec], params={'fc.weight': np.array([[weight]]), 'fc.bias': np.array([bias])},
                      bn_stats={}, input_shape=(1,), num_classes=1)


# ============================================================================
# GRADIENTS
# ============================================================================

@pytest.mark.parametrize('mode', [BnMode.TRAIN, BnMode.EVAL, BnMode.CLEAN_STATS])
def test_cnn_gradient_matches_finite_differences(tiny_cnn, mode):
    rng = np.random.default_rng(8)
    x, y = rng.uniform(0.0, 1.0, size=(8, 1, 8, 8)), rng.integers(0, 3, size=8)
    model = bn_reestimate(tiny_cnn, x)
    stats = collect_bn_stats(model, x[::-1] * 0.8) if mode == BnMode.CLEAN_STATS else None
    report = gradient_check(model, x, y, mode, stats)
    assert set(report) == set(model.params)
    assert_gradients_match(report)


@pytest.mark.parametrize('mode', [BnMode.TRAIN, BnMode.EVAL, BnMode.CLEAN_STATS])
def test_mlp_gradient_matches_finite_differences(mlp, mode):
    x, y = _mlp_batch()
    model = bn_reestimate(mlp, x)
    stats = collect_bn_stats(model, x + 0.1) if mode == BnMode.CLEAN_STATS else None
    report = gradient_check(model, x, y, mode, stats)
    assert set(report) == set(model.params)
    assert_gradients_match(report)


def test_masked_gradient_matches_finite_differences(tiny_cnn, batch):
    x, y = batch
    model = tiny_cnn.copy()
    model.masks['relu2'] = np.array([1.0, 0.0, 1.0, 1.0])
    assert_gradients_match(gradient_check(model, x, y, BnMode.TRAIN))


def test_masked_channel_gets_no_gradient(tiny_cnn, batch):
    x, y = batch
    model = tiny_cnn.copy()
    model.masks['relu2'] = np.array([0.0, 1.0, 1.0, 1.0])
    _, grads = loss_and_grad(model, x, y)
    assert np.all(grads['conv2.weight'][0] == 0.0)
    assert grads['bn2.gamma'][0] == 0.0


# ============================================================================
# BATCHNORM
# ============================================================================

def test_batchnorm_train_output_is_normalized():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(32, 4, 5, 5))
    mean, var = L.batch_moments(x)
    out, _ = L.batchnorm_forward(x, np.ones(4), np.zeros(4), mean, var, 1e-5, True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_train_forward_updates_running_stats_with_unbiased_variance(mlp):
    x, _ = _mlp_batch(8)
    pre = layer_output(mlp, x, 'fc1')
    forward(mlp, x, BnMode.TRAIN)
    stats = mlp.bn_stats['bn1']
    np.testing.assert_allclose(stats.running_mean, 0.1 * pre.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(stats.running_var, 0.9 + 0.1 * pre.var(axis=0, ddof=1), rtol=1e-12)


@pytest.mark.parametrize('mode,kwargs', [
    (BnMode.TRAIN, {'update_running': False}),
    (BnMode.EVAL, {}),
])
def test_forward_without_update_leaves_running_stats(mlp, mode, kwargs):
    x, _ = _mlp_batch()
    before = {k: v.copy() for k, v in mlp.bn_stats.items()}
    forward(mlp, x, mode, **kwargs)
    for name, stats in mlp.bn_stats.items():
        assert np.array_equal(stats.running_mean, before[name].running_mean)
        assert np.array_equal(stats.running_var, before[name].running_var)


def test_clean_stats_mode_uses_injected_statistics(tiny_cnn, batch):
    x, _ = batch
    summary = collect_bn_stats(tiny_cnn, x)
    running = {k: v.copy() for k, v in tiny_cnn.bn_stats.items()}
    logits_clean, _ = forward(tiny_cnn, x, BnMode.CLEAN_STATS, summary)
    logits_train, _ = forward(tiny_cnn, x, BnMode.TRAIN, update_running=False)
    np.testing.assert_allclose(logits_clean, logits_train, rtol=1e-10, atol=1e-12)
    for name, stats in tiny_cnn.bn_stats.items():
        assert np.array_equal(stats.running_mean, running[name].running_mean)


def test_clean_stats_mode_has_no_batch_coupling(tiny_cnn, batch):
    x, _ = batch
    summary = collect_bn_stats(tiny_cnn, x)
    full, _ = forward(tiny_cnn, x, BnMode.CLEAN_STATS, summary)
    single, _ = forward(tiny_cnn, x[2:3], BnMode.CLEAN_STATS, summary)
    np.testing.assert_allclose(single[0], full[2], rtol=1e-12, atol=1e-14)


def test_clean_stats_mode_requires_summary(tiny_cnn, batch):
    with pytest.raises(ValidationError):
        forward(tiny_cnn, batch[0], BnMode.CLEAN_STATS)


def test_bn_reestimate_uses_aggregate_batch_statistics(mlp):
    x, _ = _mlp_batch(10)
    params_before = params_checksum(mlp.params)
    running_before = mlp.bn_stats['bn1'].running_mean.copy()
    out = bn_reestimate(mlp, x, batch_size=64)
    pre = layer_output(mlp, x, 'fc1')
    np.testing.assert_allclose(out.bn_stats['bn1'].running_mean, pre.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(out.bn_stats['bn1'].running_var, pre.var(axis=0), rtol=1e-10)
    assert params_checksum(out.params) == params_before
    assert np.array_equal(mlp.bn_stats['bn1'].running_mean, running_before)


def test_bn_reestimate_pools_moments_across_batches(mlp):
    x, _ = _mlp_batch(10)
    out = bn_reestimate(mlp, x, batch_size=4)
    pre = layer_output(mlp, x, 'fc1')
    np.testing.assert_allclose(out.bn_stats['bn1'].running_mean, pre.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(out.bn_stats['bn1'].running_var, pre.var(axis=0), rtol=1e-10)
    twice = bn_reestimate(mlp, x, passes=2, batch_size=3)
    np.testing.assert_allclose(twice.bn_stats['bn1'].running_var, pre.var(axis=0), rtol=1e-10)


def test_bn_reestimate_rejects_empty_data(mlp):
    with pytest.raises(ValidationError):
        bn_reestimate(mlp, np.zeros((0, 1, 4, 4)))


# ============================================================================
# OPTIMIZER AND PARAMETER ALGEBRA
# ============================================================================

def test_sgd_momentum_steps():
    model = _scalar_model(1.0)
    grads = {'fc.weight': np.array([[0.5]]), 'fc.bias': np.array([0.0])}
    model, velocity = sgd_step(model, grads, lr=0.1, momentum=0.9)
    assert model.params['fc.weight'][0, 0] == pytest.approx(0.95)
    model, velocity = sgd_step(model, grads, lr=0.1, momentum=0.9, velocity=velocity)
    assert velocity['fc.weight'][0, 0] == pytest.approx(0.95)
    assert model.params['fc.weight'][0, 0] == pytest.approx(0.855)


def test_sgd_zero_gradient_and_velocity_is_a_fixed_point(tiny_cnn):
    before = {k: v.copy() for k, v in tiny_cnn.params.items()}
    zero = {k: np.zeros_like(v) for k, v in tiny_cnn.params.items()}
    model, velocity = sgd_step(tiny_cnn, zero, lr=0.1, momentum=0.9, velocity=dict(zero))
    for name, value in before.items():
        assert np.array_equal(model.params[name], value), name
        assert not np.any(velocity[name])


def test_sgd_weight_decay_is_decoupled():
    model = _scalar_model(1.0, 2.0)
    zero = {'fc.weight': np.array([[0.0]]), 'fc.bias': np.array([0.0])}
    model, _ = sgd_step(model, zero, lr=0.1, weight_decay=0.1)
    assert model.params['fc.weight'][0, 0] == pytest.approx(0.99)
    assert model.params['fc.bias'][0] == pytest.approx(1.98)


def test_sgd_can_skip_batchnorm_affine_decay(mlp):
    zero = {k: np.zeros_like(v) for k, v in mlp.params.items()}
    model, _ = sgd_step(mlp, zero, lr=0.1, weight_decay=0.5, decay_bn_affine=False)
    np.testing.assert_array_equal(model.params['bn1.gamma'], np.ones(5))


@pytest.mark.parametrize('kwargs', [{'lr': -0.1}, {'lr': 0.1, 'momentum': 1.0}])
def test_sgd_rejects_bad_hyperparameters(kwargs):
    model = _scalar_model()
    zero = {'fc.weight': np.array([[0.0]]), 'fc.bias': np.array([0.0])}
    with pytest.raises(ValidationError):
        sgd_step(model, zero, **kwargs)


def test_sgd_rejects_mismatched_gradients():
    with pytest.raises(ShapeError):
        sgd_step(_scalar_model(), {'fc.weight': np.zeros((2, 1)), 'fc.bias': np.zeros(1)}, lr=0.1)


def test_param_norm_scopes(mlp):
    total = np.sqrt(sum(np.sum(v ** 2) for v in mlp.params.values()))
    weights = np.sqrt(np.sum(mlp.params['fc1.weight'] ** 2) + np.sum(mlp.params['fc.weight'] ** 2))
    assert param_l2_norm(mlp) == pytest.approx(total, rel=1e-12)
    assert param_l2_norm(mlp, 'weights') == pytest.approx(weights, rel=1e-12)
    with pytest.raises(ValidationError):
        param_l2_norm(mlp, 'biases')


def test_add_scaled_zero_is_an_exact_copy(tiny_cnn):
    direction = {k: np.ones_like(v) for k, v in tiny_cnn.params.items()}
    moved = add_scaled(tiny_cnn, direction, 0.0)
    assert params_checksum(moved.params) == params_checksum(tiny_cnn.params)
    moved.params['fc.bias'][0] = 99.0
    assert tiny_cnn.params['fc.bias'][0] == 0.0


def test_add_scaled_leaves_source_untouched(tiny_cnn):
    before = params_checksum(tiny_cnn.params)
    direction = {k: np.ones_like(v) for k, v in tiny_cnn.params.items()}
    moved = add_scaled(tiny_cnn, direction, 0.5)
    assert params_checksum(tiny_cnn.params) == before
    np.testing.assert_allclose(moved.params['fc.bias'], tiny_cnn.params['fc.bias'] + 0.5)


def test_flatten_params_round_trip(tiny_cnn):
    vector = flatten_params(tiny_cnn.params)
    assert vector.size == sum(v.size for v in tiny_cnn.params.values())
    restored = unflatten_params(vector, tiny_cnn.params)
    assert params_checksum(restored) == params_checksum(tiny_cnn.params)
    with pytest.raises(ShapeError):
        unflatten_params(vector[:-1], tiny_cnn.params)


# ============================================================================
# MODEL AND FORWARD CONTRACT
# ============================================================================

def test_build_model_is_seed_deterministic():
    a = build_model('tinycnn', (1, 8, 8), 3, seed=5, width=2)
    b = build_model('tinycnn', (1, 8, 8), 3, seed=5, width=2)
    c = build_model('tinycnn', (1, 8, 8), 3, seed=6, width=2)
    assert params_checksum(a.params) == params_checksum(b.params)
    assert params_checksum(a.params) != params_checksum(c.params)


def test_build_model_rejects_unknown_arch_and_bad_extents():
    with pytest.raises(ValidationError):
        build_model('resnet18', (1, 8, 8), 3)
    with pytest.raises(ShapeError):
        build_model('tinycnn', (1, 10, 10), 3)


def test_last_feature_layer_per_architecture(tiny_cnn, mlp):
    assert last_feature_layer(tiny_cnn) == 'relu2'
    assert last_feature_layer(build_model('minicnn', (1, 8, 8), 3, width=2)) == 'relu4'
    with pytest.raises(ValidationError):
        last_feature_layer(mlp)


def test_forward_rejects_wrong_input_shape(tiny_cnn):
    with pytest.raises(ShapeError):
        forward(tiny_cnn, np.zeros((2, 1, 4, 4)))


def test_forward_reports_non_finite_activation(mlp):
    x, _ = _mlp_batch(2)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        forward(mlp, x)
    assert info.value.layer_index == 0


def test_predict_and_features_shapes(tiny_cnn, shapes):
    assert predict(tiny_cnn, shapes.images).shape == (len(shapes),)
    assert features(tiny_cnn, shapes.images[:5]).shape == (5, 16)


def test_masked_layer_outputs_zero(tiny_cnn, batch):
    model = tiny_cnn.copy()
    model.masks['relu2'] = np.array([1.0, 1.0, 0.0, 1.0])
    out = layer_output(model, batch[0], 'relu2')
    assert np.all(out[:, 2] == 0.0)


def test_identity_dense_layer_passes_input_through():
    spec = LayerSpec('dense', 'fc', {'in_features': 3, 'out_features': 3})
    model = ModelState(layers=[spec], params={'fc.weight': np.eye(3), 'fc.bias': np.zeros(3)},
                       bn_stats={}, input_shape=(3,), num_classes=3)
    v = np.array([[0.5, -1.0, 2.0]])
    logits, _ = forward(model, v)
    np.testing.assert_array_equal(logits, v)


def test_two_layer_forward_matches_direct_matrix_evaluation():
    layers = [LayerSpec('flatten', 'flatten'),
              LayerSpec('dense', 'fc1', {'in_features': 16, 'out_features': 5}),
              LayerSpec('relu', 'relu1'),
              LayerSpec('dense', 'fc', {'in_features': 5, 'out_features': 3})]
    model = model_from_layers(layers, (1, 4, 4), 3, seed=7)
    x = np.random.default_rng(7).standard_normal((6, 1, 4, 4))
    p = model.params
    hidden = np.maximum(x.reshape(6, -1) @ p['fc1.weight'] + p['fc1.bias'], 0.0)
    expected = hidden @ p['fc.weight'] + p['fc.bias']
    logits, _ = forward(model, x, BnMode.EVAL)
    np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-14)


def test_large_margin_correct_logits_have_vanishing_loss_and_gradient():
    spec = LayerSpec('dense', 'fc', {'in_features': 3, 'out_features': 3})
    model = ModelState(layers=[spec], params={'fc.weight': np.eye(3), 'fc.bias': np.zeros(3)},
                       bn_stats={}, input_shape=(3,), num_classes=3)
    labels = np.array([0, 2, 1, 2])
    x = 100.0 * np.eye(3)[labels]
    loss, grads = loss_and_grad(model, x, labels)
    assert 0.0 <= loss < 1e-10
    assert grad_norm(grads) < 1e-10


def test_uniform_logits_give_log_k_loss():
    spec = LayerSpec('dense', 'fc', {'in_features': 2, 'out_features': 4})
    model = ModelState(layers=[spec], params={'fc.weight': np.zeros((2, 4)), 'fc.bias': np.zeros(4)},
                       bn_stats={}, input_shape=(2,), num_classes=4)
    loss, _ = loss_and_grad(model, np.ones((3, 2)), np.array([0, 1, 3]))
    assert loss == pytest.approx(np.log(4), rel=1e-12)


def test_duplicated_image_batch_has_zero_variance(tiny_cnn, batch):
    x = np.repeat(batch[0][:1], 4, axis=0)
    summary = collect_bn_stats(tiny_cnn, x)
    for _, var in summary.stats.values():
        np.testing.assert_allclose(var, 0.0, atol=1e-20)
    assert summary.checksum() == collect_bn_stats(tiny_cnn, x).checksum()


def test_param_norm_of_single_tensor():
    spec = LayerSpec('dense', 'fc', {'in_features': 2, 'out_features': 1})
    model = ModelState(layers=[spec], params={'fc.weight': np.array([[3.0], [4.0]]), 'fc.bias': np.zeros(1)},
                       bn_stats={}, input_shape=(2,), num_classes=1)
    assert param_l2_norm(model) == 5.0


def test_add_scaled_is_linear_and_invertible(tiny_cnn):
    rng = np.random.default_rng(2)
    direction = {k: rng.standard_normal(v.shape) for k, v in tiny_cnn.params.items()}
    moved = add_scaled(tiny_cnn, direction, 0.3)
    back = add_scaled(moved, direction, -0.3)
    np.testing.assert_allclose(flatten_params(back.params), flatten_params(tiny_cnn.params), atol=1e-12)
    gap = np.linalg.norm(flatten_params(moved.params) - flatten_params(tiny_cnn.params))
    assert gap == pytest.approx(0.3 * np.linalg.norm(flatten_params(direction)), rel=1e-9)


def test_train_step_is_bit_deterministic(tiny_cnn, batch):
    x, y = batch
    results = []
    for _ in range(2):
        model = tiny_cnn.copy()
        _, grads = loss_and_grad(model, x, y)
        model, _ = sgd_step(model, grads, lr=0.05, momentum=0.9, weight_decay=5e-4)
        results.append(params_checksum(model.params))
    assert results[0] == results[1]
