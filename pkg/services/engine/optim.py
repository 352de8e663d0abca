"""
Momentum SGD and the parameter-vector algebra used by perturbation and
landscape code. GradientSets are plain dicts keyed like ModelState.params.
"""
import numpy as np

from shared.errors import ValidationError
from services.engine.model import check_matching, decayable, is_weight, zeros_like_params


def sgd_step(model, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None,
             decay_bn_affine=True):
    """
    v <- momentum * v + g
    theta <- theta - lr * v - lr * weight_decay * theta   (decay on trainable params only)

    Returns (model, velocity); the model is updated in place and returned.
    """
    if lr < 0:
        raise ValidationError("Learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValidationError("Momentum must lie in [0, 1)")
    check_matching(model.params, grads)
    if velocity is None:
        velocity = zeros_like_params(model.params)
    check_matching(model.params, velocity, 'velocity')

    new_velocity = {}
    for name, theta in model.params.items():
        v = momentum * velocity[name] + grads[name]
        new_velocity[name] = v
        step = lr * v
        if weight_decay and decayable(name, decay_bn_affine):
            step = step + lr * weight_decay * theta
        model.params[name] = theta - step
    return model, new_velocity


def grad_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def param_l2_norm(model, scope='all'):
    """
    Euclidean norm of the trainable-parameter vector. Running statistics never
    count; scope='weights' keeps only dense/conv weight tensors.
    """
    if scope not in ('all', 'weights'):
        raise ValidationError(f"Unknown norm scope {scope!r}")
    total = 0.0
    for name, value in model.params.items():
        if scope == 'weights' and not is_weight(name):
            continue
        total += float(np.sum(value * value))
    return float(np.sqrt(total))


def add_scaled(model, direction, scale):
    """New model with params theta + scale * direction; BN statistics copied."""
    check_matching(model.params, direction, 'direction')
    if scale == 0:
        params = {k: v.copy() for k, v in model.params.items()}
    else:
        params = {k: v + scale * direction[k] for k, v in model.params.items()}
    return model.with_params(params)


def scale_grads(grads, scale):
    return {k: scale * v for k, v in grads.items()}


def add_grads(a, b, scale=1.0):
    return {k: a[k] + scale * b[k] for k in a}


def diff_params(a, b):
    """a - b over params."""
    check_matching(a.params, b.params, 'parameter set')
    return {k: a.params[k] - b.params[k] for k in a.params}
