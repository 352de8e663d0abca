# Differentiable network core: layers, BatchNorm modes, backprop, SGD
from services.engine.model import (
    BnMode, BnStats, LayerSpec, ModelState, build_model, flatten_params,
    unflatten_params, last_feature_layer
)
from services.engine.network import (
    BatchStatsSummary, forward, backward, loss_and_grad, loss_grad_detail,
    collect_bn_stats, bn_reestimate, predict, features
)
from services.engine.optim import sgd_step, param_l2_norm, add_scaled, grad_norm
from services.engine.checkpoint import save_checkpoint, load_checkpoint
