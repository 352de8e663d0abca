"""
Exponential weighting (EW) of layer weights:

    EW(theta, T)_i = exp(|theta_i| T) / max_j exp(|theta_j| T) * theta_i

computed as exp(T (|theta_i| - max_j |theta_j|)) * theta_i so it never
overflows. Applied per dense/conv weight tensor; biases and BN affine
parameters pass through.
"""
import numpy as np

from shared.errors import ValidationError
from services.engine.model import is_weight


def ew_reweight(theta, temperature):
    theta = np.asarray(theta, dtype=np.float64)
    if temperature <= 0:
        raise ValidationError("EW temperature must be > 0")
    if theta.size == 0:
        raise ValidationError("EW reweighting of an empty layer")
    magnitude = np.abs(theta)
    factor = np.exp(temperature * (magnitude - magnitude.max()))
    return factor * theta


def ew_backward(theta, temperature, grad_out):
    """dL/dtheta given dL/dEW(theta)."""
    theta = np.asarray(theta, dtype=np.float64)
    magnitude = np.abs(theta)
    flat_max = int(np.argmax(magnitude))
    factor = np.exp(temperature * (magnitude - magnitude.flat[flat_max]))
    reweighted = factor * theta
    grad = grad_out * factor * (1.0 + temperature * magnitude)
    # the normalizer depends on the largest-magnitude element
    grad.flat[flat_max] -= temperature * np.sign(theta.flat[flat_max]) * float(np.sum(grad_out * reweighted))
    return grad


def ew_model(model, temperature):
    """Model whose dense/conv weights are replaced by their EW reweighting."""
    params = {name: ew_reweight(value, temperature) if is_weight(name) else value.copy()
              for name, value in model.params.items()}
    return model.with_params(params)


def ew_chain(model, temperature, grads):
    """Pull gradients taken at ew_model(model) back to the raw parameters."""
    return {name: ew_backward(model.params[name], temperature, g) if is_weight(name) else g
            for name, g in grads.items()}
