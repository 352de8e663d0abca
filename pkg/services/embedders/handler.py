"""
Watermark embedders.

FLOW (every embedder):
1. Walk D_c in batches of n samples (shuffled per epoch)
2. Pair each clean batch with m samples of D_w (shuffled cycle)
3. The embedder computes the step gradient g
4. sgd_step with the epoch learning rate
5. BA and WSR on the test sets at the end of each epoch
"""
import time
from dataclasses import dataclass

import numpy as np

from shared.errors import NumericError, TrainingError, ValidationError
from shared.logger import get_logger
from shared.utils import derive_seed
from services.engine.model import BnMode, build_model, params_checksum
from services.engine.network import BatchStatsSummary, loss_grad_detail, summary_from_cache
from services.engine.optim import add_grads, add_scaled, grad_norm, param_l2_norm, scale_grads, sgd_step
from services.embedders.plans import TrainReport
from services.embedders.reweight import ew_chain, ew_model
from services.embedders.smoothing import cw_gradient
from services.watermark.metrics import benign_accuracy, wsr

logger = get_logger(__name__)

# below this norm the watermark gradient has no usable direction
MIN_DIRECTION_NORM = 1e-12


@dataclass
class StepOutcome:
    grads: dict
    clean_loss: float
    wm_loss: float = float('nan')


class WatermarkStream:
    """Endless stream of m-sized watermark batches, reshuffled on every wrap."""

    def __init__(self, wm, batch_size, rng):
        if len(wm) == 0:
            raise ValidationError("Watermark dataset is empty")
        self.wm = wm
        self.batch_size = batch_size
        self.rng = rng
        self.order = rng.permutation(len(wm))
        self.cursor = 0

    def next(self):
        picked = []
        needed = self.batch_size
        while needed:
            if self.cursor == len(self.order):
                self.order = self.rng.permutation(len(self.wm))
                self.cursor = 0
            take = self.order[self.cursor:self.cursor + needed]
            picked.append(take)
            self.cursor += take.size
            needed -= take.size
        idx = np.concatenate(picked)
        return self.wm.images[idx], self.wm.labels[idx]


def initial_model(plan, clean, model=None):
    if model is not None:
        return model.copy()
    return build_model(plan.arch, clean.image_shape, clean.num_classes,
                       seed=derive_seed(plan.seed, 'init'))


def _evaluate(model, evaluation):
    if evaluation is None:
        return None, None
    return benign_accuracy(model, evaluation.test), wsr(model, evaluation.wm_test, evaluation.target)


def _fit(plan, model, clean, wm, step, evaluation=None, export=None, epochs=None):
    """Shared epoch loop; `step(model, xc, yc, xw, yw, index)` returns a StepOutcome."""
    epochs = plan.epochs if epochs is None else epochs
    rng = np.random.default_rng(derive_seed(plan.seed, 'data-order'))
    stream = WatermarkStream(wm, plan.batch_size_wm, rng) if wm is not None else None
    report = TrainReport(embedder=plan.embedder)
    velocity = None
    started = time.perf_counter()
    index = 0

    for epoch in range(epochs):
        lr = plan.lr_at(epoch)
        order = rng.permutation(len(clean))
        clean_losses, wm_losses = [], []
        for start in range(0, len(clean), plan.batch_size_clean):
            idx = order[start:start + plan.batch_size_clean]
            if idx.size < 2:
                continue
            xc, yc = clean.images[idx], clean.labels[idx]
            xw, yw = stream.next() if stream is not None else (None, None)
            try:
                outcome = step(model, xc, yc, xw, yw, index)
            except NumericError as e:
                raise TrainingError(f"Training diverged: {e.message}", epoch=epoch) from e
            if not np.isfinite(outcome.clean_loss) or not np.isfinite(grad_norm(outcome.grads)):
                raise TrainingError("Training diverged: non-finite loss or gradient", epoch=epoch)
            model, velocity = sgd_step(model, outcome.grads, lr, plan.momentum, plan.weight_decay,
                                       velocity, plan.decay_bn_affine)
            clean_losses.append(outcome.clean_loss)
            wm_losses.append(outcome.wm_loss)
            index += 1

        deployed = export(model) if export else model
        ba, rate = _evaluate(deployed, evaluation)
        report.epochs.append(epoch + 1)
        report.clean_loss.append(float(np.mean(clean_losses)) if clean_losses else float('nan'))
        report.wm_loss.append(float(np.mean(wm_losses)) if wm_losses and stream is not None else None)
        report.ba.append(ba)
        report.wsr.append(rate)
        logger.info(f"{plan.embedder} epoch {epoch + 1}/{epochs}", extra={'fields': {
            'lr': lr, 'clean_loss': report.clean_loss[-1], 'wm_loss': report.wm_loss[-1],
            'ba': ba, 'wsr': rate}})

    report.wall_clock = time.perf_counter() - started
    report.model = export(model) if export else model
    return report.model, report


def _mixed_step(plan, model, xc, yc, xw, yw):
    """Loss on [B_c ; B_w] with weights 1/n and alpha/m under batch statistics."""
    n, m = xc.shape[0], xw.shape[0]
    x = np.concatenate([xc, xw])
    y = np.concatenate([yc, yw])
    weights = np.concatenate([np.full(n, 1.0 / n), np.full(m, plan.alpha / m)])
    result = loss_grad_detail(model, x, y, BnMode.TRAIN, weights=weights)
    return StepOutcome(result.grads, float(np.mean(result.per_sample[:n])),
                       float(np.mean(result.per_sample[n:])))


# ============================================================================
# VANILLA
# ============================================================================

def train_vanilla(plan, clean, wm, model=None, evaluation=None):
    """Minimize L(theta, D_c) + alpha * L(theta, D_w) on mixed batches."""
    model = initial_model(plan, clean, model)

    def step(model, xc, yc, xw, yw, index):
        return _mixed_step(plan, model, xc, yc, xw, yw)

    return _fit(plan, model, clean, wm, step, evaluation)


def pretrain_clean(plan, clean, model=None, evaluation=None):
    """Clean model (no watermark term) used as the EW starting point."""
    model = initial_model(plan, clean, model)

    def step(model, xc, yc, xw, yw, index):
        result = loss_grad_detail(model, xc, yc, BnMode.TRAIN)
        return StepOutcome(result.grads, result.loss)

    return _fit(plan, model, clean, None, step, evaluation, epochs=plan.pretrain_epochs)


# ============================================================================
# EW
# ============================================================================

def train_ew(plan, pretrained, clean, wm, evaluation=None):
    """
    Fine-tune `pretrained` with forward passes through EW(theta, T); gradients
    flow back through the reweighting. Returns the reweighted (deployed) model.
    """
    if pretrained is None:
        raise ValidationError("EW embedding fine-tunes a pretrained clean model")
    model = pretrained.copy()
    temperature = plan.ew_temperature

    def step(model, xc, yc, xw, yw, index):
        effective = ew_model(model, temperature)
        outcome = _mixed_step(plan, effective, xc, yc, xw, yw)
        # running statistics live on the raw model
        model.bn_stats = effective.bn_stats
        outcome.grads = ew_chain(model, temperature, outcome.grads)
        return outcome

    return _fit(plan, model, clean, wm, step, evaluation,
                export=lambda m: ew_model(m, temperature))


# ============================================================================
# CW
# ============================================================================

def train_cw(plan, clean, wm, model=None, evaluation=None):
    """Clean gradient plus alpha times the noisy-weight watermark gradient."""
    model = initial_model(plan, clean, model)
    noise_rng = np.random.default_rng(derive_seed(plan.seed, 'cw-noise'))

    def step(model, xc, yc, xw, yw, index):
        clean_result = loss_grad_detail(model, xc, yc, BnMode.TRAIN)
        wm_grads = cw_gradient(model, xw, yw, plan.cw_levels, plan.cw_sigma,
                               plan.cw_samples, noise_rng)
        wm_loss = loss_grad_detail(model, xw, yw, BnMode.TRAIN, update_running=False).loss
        return StepOutcome(add_grads(clean_result.grads, wm_grads, plan.alpha),
                           clean_result.loss, wm_loss)

    return _fit(plan, model, clean, wm, step, evaluation)


# ============================================================================
# APP (+ c-BN)
# ============================================================================

def app_gradient(plan, model, xc, yc, xw, yw, index=0, observer=None):
    """
    One iteration of the minimax objective:
      g  = grad L(theta, B_c)                       (batch statistics, running stats updated)
      d  = eps * ||theta|| * grad L(theta, B_w; B_c) / ||grad L(theta, B_w; B_c)||
      g += alpha * grad L(theta + d, B_w; B_c)      (applied as the update for theta)
    With cbn=False the watermark passes use their own batch statistics.
    """
    clean_result = loss_grad_detail(model, xc, yc, BnMode.TRAIN)
    summary = summary_from_cache(clean_result.cache)

    if plan.app_clean_mix:
        q = min(plan.app_clean_mix, xc.shape[0])
        xw = np.concatenate([xc[:q], xw])
        yw = np.concatenate([yc[:q], yw])

    if plan.cbn:
        wm_kwargs = {'mode': BnMode.CLEAN_STATS, 'clean_stats': summary}
    else:
        wm_kwargs = {'mode': BnMode.TRAIN, 'update_running': False}

    theta_norm = param_l2_norm(model, plan.norm_scope)
    before = params_checksum(model.params) if observer else None
    perturbed = model
    delta_norm = 0.0
    skipped = False
    if plan.epsilon > 0:
        direction = loss_grad_detail(model, xw, yw, **wm_kwargs).grads
        norm = grad_norm(direction)
        if norm < MIN_DIRECTION_NORM:
            skipped = True
            logger.info("perturbation_skipped", extra={'fields': {'step': index, 'grad_norm': norm}})
        else:
            scale = plan.epsilon * theta_norm / norm
            perturbed = add_scaled(model, direction, scale)
            delta_norm = grad_norm(scale_grads(direction, scale))

    wm_result = loss_grad_detail(perturbed, xw, yw, **wm_kwargs)
    grads = add_grads(clean_result.grads, wm_result.grads, plan.alpha)

    ratio = None
    if plan.epsilon > 0 and not skipped:
        ratio = delta_norm / (plan.epsilon * theta_norm)
    if observer is not None:
        observer({
            'step': index,
            'theta_norm': theta_norm,
            'delta_norm': delta_norm,
            'ratio': ratio,
            'skipped': skipped,
            'summary_checksum': summary.checksum(),
            'wm_stats_checksum': BatchStatsSummary(dict(wm_result.cache.bn_used)).checksum(),
            'params_before': before,
            'params_after': params_checksum(model.params),
        })
    return StepOutcome(grads, clean_result.loss, wm_result.loss), ratio, skipped


def train_app(plan, clean, wm, model=None, evaluation=None, observer=None):
    model = initial_model(plan, clean, model)
    ratios = []
    skipped_steps = []

    def step(model, xc, yc, xw, yw, index):
        outcome, ratio, skipped = app_gradient(plan, model, xc, yc, xw, yw, index, observer)
        if ratio is not None:
            ratios.append(ratio)
        if skipped:
            skipped_steps.append(index)
        return outcome

    model, report = _fit(plan, model, clean, wm, step, evaluation)
    report.perturbation_ratios = ratios
    report.skipped_perturbations = len(skipped_steps)
    return model, report


EMBEDDER_FUNCTIONS = {
    'vanilla': train_vanilla,
    'cw': train_cw,
    'app': train_app,
}


def embed(plan, clean, wm, evaluation=None, model=None):
    """Dispatch on plan.embedder; EW pretrains its clean model first."""
    plan.validate()
    if plan.embedder == 'ew':
        pretrained, _ = pretrain_clean(plan, clean, model)
        return train_ew(plan, pretrained, clean, wm, evaluation)
    return EMBEDDER_FUNCTIONS[plan.embedder](plan, clean, wm, model=model, evaluation=evaluation)
