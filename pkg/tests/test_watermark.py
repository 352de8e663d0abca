import numpy as np
import pytest

from shared.errors import NotFoundError, UndefinedMetricError, ValidationError
from services.engine.checkpoint import load_checkpoint, save_checkpoint
from services.engine.model import LayerSpec, ModelState
from services.watermark.datasets import (
    LabeledDataset, load_idx_dataset, load_image_dir, make_shapes, read_idx,
    split_owner_attacker, to_uint8, write_idx
)
from services.watermark.metrics import benign_accuracy, per_class_accuracy, wsr
from services.watermark.triggers import (
    ContentTrigger, NoiseTrigger, UnrelatedTrigger, WatermarkSpec, Watermarker,
    apply_watermark, build_watermark_testset, build_watermarked_trainset, render_text
)


def _oracle_model(k):
    """Logits equal the (flattened) input, so predictions follow one-hot images."""
    layers = [LayerSpec('flatten', 'flatten'),
              LayerSpec('dense', 'fc', {'in_features': k, 'out_features': k})]
    return ModelState(layers=layers, params={'fc.weight': np.eye(k), 'fc.bias': np.zeros(k)},
                      bn_stats={}, input_shape=(1, 1, k), num_classes=k)


def _predicting(preds, k):
    images = np.zeros((len(preds), 1, 1, k))
    images[np.arange(len(preds)), 0, 0, preds] = 1.0
    return images


def _constant_model(k, label):
    model = _oracle_model(k)
    model.params['fc.weight'] = np.zeros((k, k))
    model.params['fc.bias'] = np.where(np.arange(k) == label, 10.0, 0.0)
    return model


# ============================================================================
# TRIGGERS
# ============================================================================

def test_content_blend_arithmetic():
    spec = WatermarkSpec(kind='content', content=ContentTrigger(patch=((1.0, 1.0), (1.0, 1.0)),
                                                                position=(2, 3), transparency=0.5))
    image = np.full((1, 8, 8), 0.4)
    out = apply_watermark(image, spec)
    np.testing.assert_allclose(out[0, 2:4, 3:5], 0.7, atol=1e-12)


def test_opaque_content_overwrites_only_the_patch():
    spec = WatermarkSpec(kind='content', content=ContentTrigger(text='T', transparency=1.0))
    image = np.random.default_rng(0).uniform(size=(1, 16, 16))
    out = apply_watermark(image, spec)
    glyph = render_text('T')
    row, col = 16 - 5 - 1, 16 - 3 - 1
    np.testing.assert_array_equal(out[0, row:row + 5, col:col + 3], glyph)
    outside = np.ones((16, 16), dtype=bool)
    outside[row:row + 5, col:col + 3] = False
    np.testing.assert_array_equal(out[0][outside], image[0][outside])


def test_content_patch_out_of_bounds():
    spec = WatermarkSpec(kind='content', content=ContentTrigger(text='TEST', scale=2))
    with pytest.raises(ValidationError):
        Watermarker(spec, (1, 8, 8))


def test_noise_amplitude_zero_is_identity():
    spec = WatermarkSpec(kind='noise', noise=NoiseTrigger(seed=3, amplitude=0.0))
    image = np.random.default_rng(1).uniform(size=(1, 8, 8))
    np.testing.assert_array_equal(apply_watermark(image, spec), image)


def test_noise_pattern_is_shared_and_clamped():
    spec = WatermarkSpec(kind='noise', noise=NoiseTrigger(seed=3, amplitude=0.5))
    marker = Watermarker(spec, (1, 8, 8))
    zeros = marker.apply(np.zeros((1, 8, 8)))
    ones = marker.apply(np.ones((1, 8, 8)))
    assert zeros.min() >= 0.0 and ones.max() <= 1.0
    mid = marker.apply(np.full((1, 8, 8), 0.5))
    np.testing.assert_allclose(mid - 0.5, marker.pattern, atol=1e-12)
    np.testing.assert_array_equal(Watermarker(spec, (1, 8, 8)).pattern, marker.pattern)


def test_unrelated_source_cycles():
    spec = WatermarkSpec(kind='unrelated', unrelated=UnrelatedTrigger(count=3))
    marker = Watermarker(spec, (1, 8, 8))
    image = np.zeros((1, 8, 8))
    np.testing.assert_array_equal(marker.apply(image, 4), marker.apply(np.ones((1, 8, 8)), 1))
    assert marker.apply(image, 0).min() >= 0.0


def test_unrelated_source_from_idx_file(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, size=(2, 8, 8), dtype=np.uint8)
    path = write_idx(tmp_path / 'other.idx', images)
    spec = WatermarkSpec(kind='unrelated', unrelated=UnrelatedTrigger(source=str(path)))
    out = apply_watermark(np.zeros((1, 8, 8)), spec, cursor=3)
    np.testing.assert_allclose(out[0], images[1] / 255.0)


def test_spec_validation_collects_problems():
    spec = WatermarkSpec(kind='stamp', target_label=7, content=ContentTrigger(transparency=1.5))
    with pytest.raises(ValidationError) as info:
        spec.validate(num_classes=6)
    assert len(info.value.problems) == 3


# ============================================================================
# WATERMARKED DATASETS
# ============================================================================

def test_watermarked_trainset_sizes_and_labels():
    clean = make_shapes(1000, num_classes=4, image_size=16, seed=0, role='owner-train')
    spec = WatermarkSpec(kind='content', target_label=2, seed=11)
    clean_part, wm_part = build_watermarked_trainset(clean, spec, 0.01)
    assert len(wm_part) == 10
    assert len(clean_part) == 990
    assert np.all(wm_part.labels == 2)
    assert not set(clean_part.source_index) & set(wm_part.source_index)
    _, again = build_watermarked_trainset(clean, spec, 0.01)
    np.testing.assert_array_equal(again.source_index, wm_part.source_index)


def test_watermarked_trainset_rejects_empty_selection(shapes):
    with pytest.raises(ValidationError):
        build_watermarked_trainset(shapes, WatermarkSpec(), 0.001)


def test_watermark_testset_keeps_ground_truth(shapes):
    wm_test = build_watermark_testset(shapes, WatermarkSpec(kind='noise'))
    np.testing.assert_array_equal(wm_test.labels, shapes.labels)
    assert wm_test.images.min() >= 0.0 and wm_test.images.max() <= 1.0


def _rows(images):
    return {img.tobytes() for img in images}


def test_unrelated_testset_never_reuses_training_keys():
    clean = make_shapes(200, num_classes=4, image_size=8, seed=0, role='owner-train')
    spec = WatermarkSpec(kind='unrelated', target_label=1, seed=3, unrelated=UnrelatedTrigger(count=40))
    _, wm = build_watermarked_trainset(clean, spec, 0.05)
    test = make_shapes(50, num_classes=4, image_size=8, seed=1)
    wm_test = build_watermark_testset(test, spec, start=len(wm))
    assert len(wm) == 10
    assert len(wm_test) == 30
    np.testing.assert_array_equal(wm_test.labels, test.labels[:30])
    assert not _rows(wm.images) & _rows(wm_test.images)
    with pytest.raises(ValidationError):
        build_watermark_testset(test, spec, start=40)


# ============================================================================
# METRICS
# ============================================================================

def test_wsr_exclusion_fixture():
    target = 1
    labels = np.array([1, 1, 0, 0, 0, 0, 2, 2, 2, 2])
    preds = np.array([1, 1, 1, 1, 1, 1, 0, 0, 2, 2])
    wm_test = LabeledDataset(_predicting(preds, 3), labels, 3)
    assert wsr(_oracle_model(3), wm_test, target) == 0.5


def test_wsr_ignores_added_target_class_samples():
    labels = np.array([0, 2, 2])
    preds = np.array([1, 1, 0])
    base = wsr(_oracle_model(3), LabeledDataset(_predicting(preds, 3), labels, 3), 1)
    extended = LabeledDataset(_predicting(np.append(preds, 0), 3), np.append(labels, 1), 3)
    assert wsr(_oracle_model(3), extended, 1) == base


def test_wsr_of_constant_classifiers():
    wm_test = LabeledDataset(np.zeros((6, 1, 1, 3)), np.array([0, 0, 2, 2, 0, 2]), 3)
    assert wsr(_constant_model(3, 1), wm_test, 1) == 1.0
    assert wsr(_constant_model(3, 0), wm_test, 1) == 0.0


def test_wsr_undefined_when_everything_is_excluded():
    wm_test = LabeledDataset(np.zeros((2, 1, 1, 3)), np.array([1, 1]), 3)
    with pytest.raises(UndefinedMetricError):
        wsr(_oracle_model(3), wm_test, 1)


def test_benign_accuracy_of_constant_classifier_on_balanced_data():
    test = LabeledDataset(np.zeros((9, 1, 1, 3)), np.repeat([0, 1, 2], 3), 3)
    assert benign_accuracy(_constant_model(3, 2), test) == pytest.approx(1 / 3, abs=1e-15)
    assert per_class_accuracy(_constant_model(3, 2), test) == {'0': 0.0, '1': 0.0, '2': 1.0}


def test_benign_accuracy_class_mismatch():
    test = LabeledDataset(np.zeros((2, 1, 1, 3)), np.array([0, 1]), 4)
    with pytest.raises(ValidationError):
        benign_accuracy(_oracle_model(3), test)


def test_benign_accuracy_survives_checkpoint_round_trip(tiny_cnn, shapes, tmp_path):
    save_checkpoint(tiny_cnn, tmp_path / 'm.wmck')
    restored, _ = load_checkpoint(tmp_path / 'm.wmck')
    assert benign_accuracy(restored, shapes) == benign_accuracy(tiny_cnn, shapes)


# ============================================================================
# DATA SOURCES
# ============================================================================

def test_shapes_dataset_is_seeded():
    a = make_shapes(20, num_classes=4, image_size=16, seed=9)
    b = make_shapes(20, num_classes=4, image_size=16, seed=9)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValidationError):
        LabeledDataset(np.zeros((2, 1, 4, 4)), np.array([0, 5]), 3)


def test_idx_dataset_round_trip(tmp_path, shapes):
    write_idx(tmp_path / 'images.idx', to_uint8(shapes.images[:, 0]))
    write_idx(tmp_path / 'labels.idx', shapes.labels.astype(np.uint8))
    loaded = load_idx_dataset(tmp_path / 'images.idx', tmp_path / 'labels.idx', 3, 'test')
    assert loaded.images.shape == shapes.images.shape
    np.testing.assert_allclose(loaded.images, shapes.images, atol=0.5 / 255 + 1e-12)
    np.testing.assert_array_equal(loaded.labels, shapes.labels)


def test_idx_reader_rejects_bad_magic(tmp_path):
    path = tmp_path / 'bad.idx'
    path.write_bytes(b'\x01\x02\x08\x01\x00\x00\x00\x01\x00')
    with pytest.raises(ValidationError):
        read_idx(path)
    with pytest.raises(NotFoundError):
        read_idx(tmp_path / 'absent.idx')


def test_image_dir_loader(tmp_path):
    for label in (0, 1):
        write_idx(tmp_path / str(label) / 'batch.idx', np.full((2, 4, 4), 100 * label, dtype=np.uint8))
    data = load_image_dir(tmp_path, 2)
    np.testing.assert_array_equal(data.labels, [0, 0, 1, 1])
    assert data.images.shape == (4, 1, 4, 4)


def test_owner_attacker_split_is_disjoint_partition(shapes):
    owner, attacker = split_owner_attacker(shapes, 0.8, seed=4)
    assert len(owner) == 96 and len(attacker) == 24
    assert owner.role == 'owner-train' and attacker.role == 'attacker-holdout'
    joined = np.concatenate([owner.source_index, attacker.source_index])
    np.testing.assert_array_equal(np.sort(joined), np.arange(len(shapes)))
