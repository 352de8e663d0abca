"""
Noisy-weight gradient for certified-watermark style training:

    g = 1/k * sum_{i=1..k} E_{G ~ N(0, (sigma * i / k)^2 I)} grad L(theta + G)

The expectation is estimated with `samples_per_level` draws per level. Noise
is drawn per parameter in model.params order.
"""
import numpy as np

from shared.errors import ValidationError
from services.engine.model import BnMode, zeros_like_params
from services.engine.network import loss_and_grad
from services.engine.optim import add_scaled


def cw_gradient(model, batch, labels, levels, sigma, samples_per_level=1, rng=None,
                mode=BnMode.TRAIN, clean_stats=None):
    if levels < 1 or samples_per_level < 1:
        raise ValidationError("cw_gradient needs levels >= 1 and samples_per_level >= 1")
    if sigma < 0:
        raise ValidationError("cw_gradient needs sigma >= 0")
    if sigma == 0:
        _, grads = loss_and_grad(model, batch, labels, mode, clean_stats, update_running=False)
        return grads

    rng = rng if rng is not None else np.random.default_rng(0)
    total = zeros_like_params(model.params)
    for level in range(1, levels + 1):
        std = sigma * level / levels
        for _ in range(samples_per_level):
            noise = {name: rng.standard_normal(value.shape) * std
                     for name, value in model.params.items()}
            _, grads = loss_and_grad(add_scaled(model, noise, 1.0), batch, labels, mode,
                                     clean_stats, update_running=False)
            for name in total:
                total[name] = total[name] + grads[name]
    count = levels * samples_per_level
    return {name: value / count for name, value in total.items()}
