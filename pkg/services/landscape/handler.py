"""
Vicinity scan of a watermarked model.

Neighbor of theta_w at grid point (a, b):

    theta = theta_w + a * d_adv / ||d_adv|| * ||theta_w|| + b * d_ft / ||d_ft|| * ||theta_w||

d_adv is the watermark-loss gradient (the erasing direction), d_ft the
displacement produced by a short clean fine-tune. Each neighbor gets its
BatchNorm statistics re-estimated on a fixed clean subset before WSR/BA are
measured.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from shared.errors import IntegrityError, NumericError, TrainingError, ValidationError
from shared.logger import get_logger
from shared.utils import derive_seed, write_csv, write_json
from services.engine.model import BnMode, check_matching, params_checksum
from services.engine.network import bn_reestimate, loss_grad_detail
from services.engine.optim import diff_params, grad_norm, param_l2_norm, sgd_step
from services.landscape.plans import DirectionPair, LandscapeGrid
from services.watermark.metrics import benign_accuracy, wsr

logger = get_logger(__name__)

FT_ITERATIONS = 40
FT_LR = 0.05


def adversarial_direction(model, wm_data):
    """Full-batch watermark-loss gradient at theta_w, Eval-mode BatchNorm."""
    if wm_data is None or len(wm_data) == 0:
        raise ValidationError("Adversarial direction needs watermark samples")
    result = loss_grad_detail(model, wm_data.images, wm_data.labels, BnMode.EVAL)
    if grad_norm(result.grads) == 0.0:
        raise NumericError("Watermark-loss gradient is zero; no adversarial direction")
    return result.grads


def finetune_direction(model, clean_holdout, iterations=FT_ITERATIONS, lr=FT_LR,
                       batch_size=64, seed=0):
    """theta_FT - theta_w after `iterations` plain SGD steps on clean data."""
    if clean_holdout is None or len(clean_holdout) == 0:
        raise ValidationError("Fine-tuning direction needs clean samples")
    tuned = model.copy()
    rng = np.random.default_rng(derive_seed(seed, 'ft-direction'))
    order = rng.permutation(len(clean_holdout))
    cursor = 0
    for step in range(iterations):
        if cursor + 2 > order.size:
            order = rng.permutation(len(clean_holdout))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += idx.size
        try:
            result = loss_grad_detail(tuned, clean_holdout.images[idx], clean_holdout.labels[idx],
                                      BnMode.TRAIN)
        except NumericError as e:
            raise TrainingError(f"Fine-tuning direction diverged at step {step}: {e.message}") from e
        tuned, _ = sgd_step(tuned, result.grads, lr)
    return diff_params(tuned, model)


def direction_pair(model, d_adv, d_ft):
    check_matching(model.params, d_adv, 'adversarial direction')
    check_matching(model.params, d_ft, 'fine-tuning direction')
    adv_norm, ft_norm = grad_norm(d_adv), grad_norm(d_ft)
    if adv_norm == 0.0 or ft_norm == 0.0:
        raise NumericError("Landscape directions must both be nonzero")
    return DirectionPair(d_adv=d_adv, d_ft=d_ft, adv_norm=adv_norm, ft_norm=ft_norm)


def neighbor(model, pair, alpha, beta):
    """Model at (alpha, beta); ||theta - theta_w|| / ||theta_w|| = |alpha| when beta = 0."""
    theta_norm = param_l2_norm(model)
    a = alpha * theta_norm / pair.adv_norm
    b = beta * theta_norm / pair.ft_norm
    params = {}
    for name, value in model.params.items():
        moved = value.copy()
        if alpha:
            moved = moved + a * pair.d_adv[name]
        if beta:
            moved = moved + b * pair.d_ft[name]
        params[name] = moved
    return model.with_params(params)


def bn_subset(clean_data, size, seed):
    """Fixed clean images for per-cell BatchNorm re-estimation."""
    count = min(size, len(clean_data))
    index = np.sort(np.random.default_rng(derive_seed(seed, 'bn-subset')).permutation(len(clean_data))[:count])
    return clean_data.images[index]


def _evaluate_cell(model, pair, alpha, beta, bn_images, grid, wm_data, target, test):
    candidate = neighbor(model, pair, alpha, beta)
    candidate = bn_reestimate(candidate, bn_images, passes=grid.bn_passes)
    return alpha, beta, wsr(candidate, wm_data, target), benign_accuracy(candidate, test)


def scan(model, pair, grid, clean_data, wm_data, target, test=None, threads=1):
    """
    WSR/BA over the (alpha, beta) grid. BA is measured on `test` when given,
    otherwise on `clean_data`. Cells are independent and may run on `threads`
    worker threads; results keep grid order.
    """
    grid.validate()
    test = test if test is not None else clean_data
    before = params_checksum(model.params)
    bn_images = bn_subset(clean_data, grid.bn_samples, grid.seed)
    coords = [(a, b) for a in grid.alphas for b in grid.betas]
    logger.info("Landscape scan started", extra={'fields': {
        'cells': len(coords), 'threads': threads, 'bn_samples': int(bn_images.shape[0])}})

    def evaluate(coord):
        return _evaluate_cell(model, pair, coord[0], coord[1], bn_images, grid, wm_data, target, test)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(evaluate, coords))
    else:
        cells = [evaluate(c) for c in coords]

    after = params_checksum(model.params)
    if before != after:
        raise IntegrityError("Scanned model was modified during the landscape scan")

    result = LandscapeGrid(alphas=grid.alphas, betas=grid.betas, cells=cells)
    result.metadata = {
        'model_checksum': before,
        'adv_norm': pair.adv_norm,
        'ft_norm': pair.ft_norm,
        'theta_norm': param_l2_norm(model),
        'grid': grid.to_dict(),
        'bn_reestimate_samples': int(bn_images.shape[0]),
        'bn_reestimate_passes': grid.bn_passes,
    }
    return result


def origin_deviation(grid_result, model, wm_data, target, test):
    """Largest gap between the origin cell and the directly measured model."""
    origin_wsr, origin_ba = grid_result.origin
    return max(abs(origin_wsr - wsr(model, wm_data, target)),
               abs(origin_ba - benign_accuracy(model, test)))


def removal_radius(grid_result, threshold=0.5):
    """Smallest |alpha| on beta = 0 where WSR falls below `threshold`; None if never."""
    hits = [abs(a) for a, b, rate, _ in grid_result.cells if b == 0.0 and rate < threshold]
    return min(hits) if hits else None


def write_grid(grid_result, path):
    """CSV `alpha,beta,wsr,ba` plus a `<path>.json` metadata sidecar."""
    path = write_csv(path, LandscapeGrid.HEADER, grid_result.rows())
    sidecar = path.with_name(path.name + '.json')
    write_json(sidecar, grid_result.metadata)
    return path, sidecar
