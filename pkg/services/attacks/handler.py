"""
Watermark-removal attacks run by an adversary holding a small clean dataset.

FLOW:
1. Copy the victim model (every attack works on its own copy)
2. Measure WSR/BA before the attack (epoch 0 row)
3. FP / ANP-lite prune channels of the last feature layer (masks)
4. FT / FP fine-tune with SGD on the attacker holdout
5. Measure WSR/BA after each epoch
"""
import numpy as np

from shared.errors import NumericError, TrainingError, ValidationError
from shared.logger import get_logger
from shared.utils import derive_seed
from services.engine.model import BnMode, feature_block, last_feature_layer, layer_channels
from services.engine.network import bn_reestimate, layer_output, loss_grad_detail, loss_only
from services.engine.optim import add_scaled, sgd_step
from services.attacks.plans import AttackReport, channels_to_prune
from services.watermark.metrics import benign_accuracy, wsr

logger = get_logger(__name__)

HOLDOUT_ROLE = 'attacker-holdout'


def require_holdout(holdout):
    """Every batch an attack consumes must come from the attacker's split."""
    if holdout is None or len(holdout) == 0:
        raise ValidationError("Attack needs a non-empty attacker holdout")
    if holdout.role != HOLDOUT_ROLE:
        raise ValidationError(f"Attacks may only use {HOLDOUT_ROLE!r} data, got {holdout.role!r}")


def _measure(model, evaluation):
    if evaluation is None:
        return None, None
    return wsr(model, evaluation.wm_test, evaluation.target), benign_accuracy(model, evaluation.test)


def _start_report(plan, model, evaluation):
    report = AttackReport(attack=plan.label)
    report.record(0, *_measure(model, evaluation))
    return report


def _finetune(plan, model, holdout, report, evaluation):
    rng = np.random.default_rng(derive_seed(plan.seed, 'attack-order'))
    velocity = None
    for epoch in range(plan.epochs):
        lr = plan.lr_at(epoch)
        order = rng.permutation(len(holdout))
        for start in range(0, len(holdout), plan.batch_size):
            idx = order[start:start + plan.batch_size]
            if idx.size < 2:
                continue
            try:
                result = loss_grad_detail(model, holdout.images[idx], holdout.labels[idx], BnMode.TRAIN)
            except NumericError as e:
                raise TrainingError(f"Fine-tuning diverged: {e.message}", epoch=epoch) from e
            model, velocity = sgd_step(model, result.grads, lr, plan.momentum,
                                       plan.weight_decay, velocity)
        rate, ba = _measure(model, evaluation)
        report.record(epoch + 1, rate, ba)
        logger.info(f"{plan.label} epoch {epoch + 1}/{plan.epochs}",
                    extra={'fields': {'lr': lr, 'wsr': rate, 'ba': ba}})
    return model


def _prune(model, layer, channels):
    mask = model.masks.get(layer)
    if mask is None:
        mask = np.ones(layer_channels(model, layer))
    mask = mask.copy()
    mask[np.asarray(channels, dtype=np.int64)] = 0.0
    model.masks[layer] = mask


def _prune_count(model, layer, fraction):
    total = layer_channels(model, layer)
    count = channels_to_prune(fraction, total)
    if count >= total:
        raise ValidationError(f"Pruning {fraction} of {layer} would remove all {total} channels")
    return count


# ============================================================================
# FT
# ============================================================================

def attack_ft(model, plan, holdout, evaluation=None):
    """Fine-tune a copy of `model` on the holdout with a step-decayed lr."""
    plan.validate()
    require_holdout(holdout)
    victim = model.copy()
    report = _start_report(plan, victim, evaluation)
    victim = _finetune(plan, victim, holdout, report, evaluation)
    report.model = victim
    return victim, report


# ============================================================================
# FP
# ============================================================================

def channel_activations(model, images, layer):
    """Mean Eval-mode activation per channel of `layer`."""
    out = layer_output(model, images, layer)
    axes = (0,) + tuple(range(2, out.ndim))
    return out.mean(axis=axes)


def attack_fp(model, plan, holdout, evaluation=None):
    """Prune the least-activated channels of the last feature layer, then fine-tune."""
    plan.validate()
    require_holdout(holdout)
    victim = model.copy()
    layer = last_feature_layer(victim)
    count = _prune_count(victim, layer, plan.prune_fraction)

    report = _start_report(plan, victim, evaluation)
    activations = channel_activations(victim, holdout.images, layer)
    ranking = np.argsort(activations, kind='stable')
    pruned = sorted(int(c) for c in ranking[:count])
    if pruned:
        _prune(victim, layer, pruned)
    report.layer = layer
    report.pruned = pruned
    logger.info(f"FP pruned {len(pruned)} channels of {layer}",
                extra={'fields': {'layer': layer, 'pruned': pruned}})

    victim = _finetune(plan, victim, holdout, report, evaluation)
    report.model = victim
    return victim, report


# ============================================================================
# ANP-lite
# ============================================================================

def _channel_params(model, layer):
    """(param name, channel axis) pairs of the conv/BN block feeding `layer`."""
    conv, bn = feature_block(model, layer)
    pairs = [(f'{conv}.weight', 0), (f'{conv}.bias', 0)]
    if bn is not None:
        pairs += [(f'{bn}.gamma', 0), (f'{bn}.beta', 0)]
    return pairs


def channel_perturbation(model, grads, layer, channel, eps):
    """eps * |theta_c| * sign(grad_c) on one channel's parameters, zero elsewhere."""
    direction = {name: np.zeros_like(value) for name, value in model.params.items()}
    for name, axis in _channel_params(model, layer):
        theta = np.take(model.params[name], channel, axis=axis)
        g = np.take(grads[name], channel, axis=axis)
        index = [slice(None)] * model.params[name].ndim
        index[axis] = channel
        direction[name][tuple(index)] = eps * np.abs(theta) * np.sign(g)
    return direction


def channel_sensitivity(model, holdout, layer, eps):
    """Clean-loss increase per channel when that channel alone is perturbed."""
    labels = holdout.labels
    base_result = loss_grad_detail(model, holdout.images, labels, BnMode.EVAL)
    base = base_result.loss
    scores = np.zeros(layer_channels(model, layer))
    for c in range(scores.size):
        delta = channel_perturbation(model, base_result.grads, layer, c, eps)
        perturbed = add_scaled(model, delta, 1.0)
        scores[c] = loss_only(perturbed, holdout.images, labels, BnMode.EVAL) - base
    return scores


def attack_anp(model, plan, holdout, evaluation=None):
    """
    ANP-lite: score channels by weight-perturbation sensitivity on clean data,
    prune the most sensitive up to `anp_rate`, then re-estimate BatchNorm.
    """
    plan.validate()
    require_holdout(holdout)
    victim = model.copy()
    layer = last_feature_layer(victim)
    count = _prune_count(victim, layer, plan.anp_rate)

    report = _start_report(plan, victim, evaluation)
    scores = channel_sensitivity(victim, holdout, layer, plan.anp_eps)
    order = np.argsort(-scores, kind='stable')
    candidates = [int(c) for c in order if scores[c] > 0]
    pruned = sorted(candidates[:count])
    if pruned:
        _prune(victim, layer, pruned)
        victim = bn_reestimate(victim, holdout.images)
    report.layer = layer
    report.pruned = pruned
    report.scores = [float(s) for s in scores]
    logger.info(f"ANP-lite pruned {len(pruned)} channels of {layer}",
                extra={'fields': {'layer': layer, 'pruned': pruned, 'eps': plan.anp_eps}})

    report.record(1, *_measure(victim, evaluation))
    report.model = victim
    return victim, report


ATTACK_FUNCTIONS = {
    'ft': attack_ft,
    'fp': attack_fp,
    'anp': attack_anp,
}


def run_attack(model, plan, holdout, evaluation=None):
    return ATTACK_FUNCTIONS[plan.validate().attack](model, plan, holdout, evaluation)
