"""
Forward pass, exact backpropagation and BatchNorm statistics handling.

BN modes:
- TRAIN: normalize with the batch's own statistics; running stats updated by
  EMA unless `update_running=False`.
- EVAL: normalize with running statistics.
- CLEAN_STATS: normalize with statistics injected from a BatchStatsSummary of a
  clean batch. They are constants in the graph and nothing is mutated.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from shared.errors import NumericError, ShapeError, ValidationError
from shared.logger import get_logger
from services.engine import layers as L
from services.engine.model import BnMode

logger = get_logger(__name__)


@dataclass
class BatchStatsSummary:
    """Per BatchNorm layer: (channel means, channel biased variances)."""
    stats: dict = field(default_factory=dict)

    def checksum(self):
        digest = hashlib.sha256()
        for name, (mean, var) in self.stats.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(mean, dtype='<f8').tobytes())
            digest.update(np.ascontiguousarray(var, dtype='<f8').tobytes())
        return digest.hexdigest()


@dataclass
class ForwardCache:
    entries: list
    # statistics actually used to normalize, per BN layer
    bn_used: dict
    features: np.ndarray = None


@dataclass
class GradientResult:
    loss: float
    grads: dict
    per_sample: np.ndarray
    cache: ForwardCache


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim < 1 or batch.shape[0] == 0:
        raise ValidationError("Empty batch")
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"Batch of shape {batch.shape[1:]} does not match model input {model.input_shape}")
    return batch


def _check_summary(model, clean_stats):
    if clean_stats is None:
        raise ValidationError("CLEAN_STATS mode requires an injected clean-batch summary")
    for name, stats in model.bn_stats.items():
        if name not in clean_stats.stats:
            raise ValidationError(f"Clean-batch summary lacks BatchNorm layer {name!r}")
        if clean_stats.stats[name][0].shape != stats.running_mean.shape:
            raise ShapeError(f"Clean-batch summary for {name!r} has the wrong channel count")


def _apply_mask(out, mask):
    shape = (1, -1) + (1,) * (out.ndim - 2)
    return out * mask.reshape(shape)


def forward(model, batch, mode=BnMode.EVAL, clean_stats=None, update_running=True):
    """Run the network; returns (logits, cache)."""
    x = _check_batch(model, batch)
    if mode == BnMode.CLEAN_STATS:
        _check_summary(model, clean_stats)

    entries = []
    bn_used = {}
    features = None
    dense_seen = sum(1 for s in model.layers if s.kind == 'dense')
    dense_idx = 0
    for i, spec in enumerate(model.layers):
        p = model.params
        kind = spec.kind
        if kind == 'dense':
            dense_idx += 1
            if dense_idx == dense_seen:
                features = x
            x, cache = L.dense_forward(x, p[f'{spec.name}.weight'], p[f'{spec.name}.bias'])
        elif kind == 'conv2d':
            x, cache = L.conv_forward(x, p[f'{spec.name}.weight'], p[f'{spec.name}.bias'],
                                      spec.attrs.get('stride', 1), spec.attrs.get('padding', 1))
        elif kind == 'relu':
            x, cache = L.relu_forward(x)
        elif kind == 'maxpool':
            x, cache = L.maxpool_forward(x, spec.attrs.get('size', 2))
        elif kind == 'flatten':
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == 'batchnorm':
            stats = model.bn_stats[spec.name]
            if mode == BnMode.TRAIN:
                mean, var = L.batch_moments(x)
                from_batch = True
                if update_running:
                    _update_running(stats, mean, var, x)
            elif mode == BnMode.EVAL:
                mean, var = stats.running_mean, stats.running_var
                from_batch = False
            else:
                mean, var = clean_stats.stats[spec.name]
                from_batch = False
            bn_used[spec.name] = (mean, var)
            x, cache = L.batchnorm_forward(x, p[f'{spec.name}.gamma'], p[f'{spec.name}.beta'],
                                           mean, var, stats.epsilon, from_batch)
        else:
            raise ValidationError(f"Unsupported layer kind {kind!r}")

        mask = model.masks.get(spec.name)
        if mask is not None:
            x = _apply_mask(x, mask)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"Non-finite activation in {spec.name}", layer_index=i)
        entries.append((spec, cache))

    if x.ndim != 2 or x.shape[1] != model.num_classes:
        raise ShapeError(f"Network output shape {x.shape} is not (batch, {model.num_classes})")
    return x, ForwardCache(entries=entries, bn_used=bn_used, features=features)


def _update_running(stats, mean, var, x):
    count = x.size // x.shape[1]
    unbiased = var * count / (count - 1) if count > 1 else var
    m = stats.momentum
    # fresh arrays: copies of the model must not alias
    stats.running_mean = (1.0 - m) * stats.running_mean + m * mean
    stats.running_var = (1.0 - m) * stats.running_var + m * unbiased


def backward(model, cache, dlogits):
    """Exact gradients of the loss w.r.t. every parameter, given dL/dlogits."""
    grads = {}
    dout = dlogits
    for spec, layer_cache in reversed(cache.entries):
        mask = model.masks.get(spec.name)
        if mask is not None:
            dout = _apply_mask(dout, mask)
        kind = spec.kind
        if kind == 'dense':
            dout, g = L.dense_backward(dout, layer_cache)
        elif kind == 'conv2d':
            dout, g = L.conv_backward(dout, layer_cache)
        elif kind == 'relu':
            dout, g = L.relu_backward(dout, layer_cache)
        elif kind == 'maxpool':
            dout, g = L.maxpool_backward(dout, layer_cache)
        elif kind == 'flatten':
            dout, g = dout.reshape(layer_cache), {}
        else:
            dout, g = L.batchnorm_backward(dout, layer_cache)
        for short, value in g.items():
            grads[f'{spec.name}.{short}'] = value
    return {name: grads[name] for name in model.params}


def softmax_cross_entropy(logits, labels, weights=None):
    """Returns (weighted loss, per-sample losses, dL/dlogits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    per_sample = -log_probs[np.arange(n), labels]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    loss = float(np.sum(weights * per_sample))
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= weights[:, None]
    return loss, per_sample, dlogits


def _check_labels(model, labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"Expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValidationError(f"Labels must lie in [0, {model.num_classes})")
    return labels


def loss_grad_detail(model, batch, labels, mode=BnMode.TRAIN, clean_stats=None,
                     update_running=True, weights=None):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 0 or batch.shape[0] == 0:
        raise ValidationError("Empty batch")
    labels = _check_labels(model, labels, batch.shape[0])
    logits, cache = forward(model, batch, mode, clean_stats, update_running)
    loss, per_sample, dlogits = softmax_cross_entropy(logits, labels, weights)
    if not np.isfinite(loss):
        raise NumericError("Non-finite loss")
    grads = backward(model, cache, dlogits)
    return GradientResult(loss=loss, grads=grads, per_sample=per_sample, cache=cache)


def loss_and_grad(model, batch, labels, mode=BnMode.TRAIN, clean_stats=None,
                  update_running=True, weights=None):
    """Mean softmax cross-entropy and its exact gradient set."""
    result = loss_grad_detail(model, batch, labels, mode, clean_stats, update_running, weights)
    return result.loss, result.grads


def loss_only(model, batch, labels, mode=BnMode.EVAL, clean_stats=None):
    labels = _check_labels(model, labels, np.asarray(batch).shape[0])
    logits, _ = forward(model, batch, mode, clean_stats, update_running=False)
    loss, _, _ = softmax_cross_entropy(logits, labels)
    return loss


def predict(model, images, batch_size=256):
    """Eval-mode argmax predictions."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits, _ = forward(model, images[start:start + batch_size], BnMode.EVAL)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def features(model, images, batch_size=256):
    """Penultimate representation (input of the final dense layer), Eval mode."""
    images = np.asarray(images, dtype=np.float64)
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        _, cache = forward(model, images[start:start + batch_size], BnMode.EVAL)
        chunks.append(cache.features.reshape(cache.features.shape[0], -1))
    return np.concatenate(chunks)


def layer_output(model, images, layer_name, batch_size=256):
    """Eval-mode output of a named layer (after its mask)."""
    images = np.asarray(images, dtype=np.float64)
    idx = next(i for i, s in enumerate(model.layers) if s.name == layer_name)
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        chunks.append(_partial_forward(model, images[start:start + batch_size], idx))
    return np.concatenate(chunks)


def _partial_forward(model, x, stop):
    for spec in model.layers[:stop + 1]:
        p = model.params
        if spec.kind == 'dense':
            x, _ = L.dense_forward(x, p[f'{spec.name}.weight'], p[f'{spec.name}.bias'])
        elif spec.kind == 'conv2d':
            x, _ = L.conv_forward(x, p[f'{spec.name}.weight'], p[f'{spec.name}.bias'],
                                  spec.attrs.get('stride', 1), spec.attrs.get('padding', 1))
        elif spec.kind == 'relu':
            x, _ = L.relu_forward(x)
        elif spec.kind == 'maxpool':
            x, _ = L.maxpool_forward(x, spec.attrs.get('size', 2))
        elif spec.kind == 'flatten':
            x = x.reshape(x.shape[0], -1)
        else:
            stats = model.bn_stats[spec.name]
            x, _ = L.batchnorm_forward(x, p[f'{spec.name}.gamma'], p[f'{spec.name}.beta'],
                                       stats.running_mean, stats.running_var, stats.epsilon, False)
        mask = model.masks.get(spec.name)
        if mask is not None:
            x = _apply_mask(x, mask)
    return x


def collect_bn_stats(model, batch):
    """Statistics each BatchNorm layer sees for `batch` in one forward pass."""
    _, cache = forward(model, batch, BnMode.TRAIN, update_running=False)
    return BatchStatsSummary(stats={name: (mean.copy(), var.copy())
                                    for name, (mean, var) in cache.bn_used.items()})


def summary_from_cache(cache):
    return BatchStatsSummary(stats={name: (mean.copy(), var.copy())
                                    for name, (mean, var) in cache.bn_used.items()})


def bn_reestimate(model, clean_images, passes=1, batch_size=128):
    """
    Replace running statistics by the pooled moments of `clean_images`:
    mean = sum(n_b m_b) / N and var = sum(n_b (v_b + m_b^2)) / N - mean^2,
    over every batch of every pass. Each batch is normalized with its own statistics while walking the
    network; parameters are untouched.
    """
    if passes < 1:
        raise ValidationError("bn_reestimate needs passes >= 1")
    clean_images = np.asarray(clean_images, dtype=np.float64)
    if clean_images.shape[0] == 0:
        raise ValidationError("bn_reestimate needs a non-empty clean dataset")

    out = model.copy()
    if not out.bn_stats:
        return out
    sums = {name: [0.0, 0.0] for name in out.bn_stats}
    total = {name: 0 for name in out.bn_stats}
    for _ in range(passes):
        for start in range(0, clean_images.shape[0], batch_size):
            chunk = clean_images[start:start + batch_size]
            _, cache = forward(out, chunk, BnMode.TRAIN, update_running=False)
            for name, (mean, var) in cache.bn_used.items():
                weight = chunk.shape[0]
                sums[name][0] = sums[name][0] + weight * mean
                sums[name][1] = sums[name][1] + weight * (var + mean ** 2)
                total[name] += weight
    for name, stats in out.bn_stats.items():
        mean = sums[name][0] / total[name]
        stats.running_mean = mean
        stats.running_var = np.maximum(sums[name][1] / total[name] - mean ** 2, np.finfo(np.float64).tiny)
    logger.debug("BatchNorm statistics re-estimated",
                 extra={'fields': {'samples': int(clean_images.shape[0]), 'passes': passes}})
    return out
