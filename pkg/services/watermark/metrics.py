import numpy as np

from shared.errors import UndefinedMetricError, ValidationError
from services.engine.network import predict


def wsr(model, wm_test, target):
    """
    Fraction of watermark samples predicted as `target`, ignoring samples whose
    ground-truth label already is the target.
    """
    keep = wm_test.labels != target
    if not np.any(keep):
        raise UndefinedMetricError("WSR undefined: every watermark sample already belongs to the target class")
    preds = predict(model, wm_test.images[keep])
    return float(np.mean(preds == target))


def benign_accuracy(model, test):
    if len(test) == 0:
        raise ValidationError("Benign accuracy needs a non-empty test set")
    _check_classes(model, test)
    return float(np.mean(predict(model, test.images) == test.labels))


def per_class_accuracy(model, test):
    _check_classes(model, test)
    preds = predict(model, test.images)
    out = {}
    for k in range(test.num_classes):
        hit = test.labels == k
        out[str(k)] = float(np.mean(preds[hit] == k)) if np.any(hit) else None
    return out


def _check_classes(model, dataset):
    if dataset.num_classes != model.num_classes:
        raise ValidationError(
            f"Dataset has {dataset.num_classes} classes, model predicts {model.num_classes}")
