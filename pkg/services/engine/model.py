"""
Model state for the desk-scale network engine.

A ModelState is plain data: ordered layer descriptors, named parameter arrays
(float64), BatchNorm running statistics and optional channel masks. All the
arithmetic lives in `network.py` and `optim.py`.
"""
import copy
import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from shared.errors import ShapeError, ValidationError

LAYER_KINDS = ('dense', 'conv2d', 'relu', 'maxpool', 'batchnorm', 'flatten')

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class BnMode(enum.Enum):
    TRAIN = 'train'              # batch statistics, running stats updated
    EVAL = 'eval'                # running statistics
    CLEAN_STATS = 'clean_stats'  # injected clean-batch statistics


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        return {'kind': self.kind, 'name': self.name, 'attrs': dict(self.attrs)}

    @classmethod
    def from_dict(cls, data):
        if data.get('kind') not in LAYER_KINDS:
            raise ValidationError(f"Unknown layer kind {data.get('kind')!r}")
        return cls(kind=data['kind'], name=data['name'], attrs=dict(data.get('attrs', {})))


@dataclass
class BnStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def copy(self):
        return BnStats(self.running_mean.copy(), self.running_var.copy(),
                       self.momentum, self.epsilon)


@dataclass
class ModelState:
    layers: list
    params: dict
    bn_stats: dict
    input_shape: tuple
    num_classes: int
    arch: str = 'custom'
    seed: int = 0
    masks: dict = field(default_factory=dict)

    def copy(self):
        return ModelState(
            layers=list(self.layers),
            params={k: v.copy() for k, v in self.params.items()},
            bn_stats={k: v.copy() for k, v in self.bn_stats.items()},
            input_shape=tuple(self.input_shape),
            num_classes=self.num_classes,
            arch=self.arch,
            seed=self.seed,
            masks={k: v.copy() for k, v in self.masks.items()},
        )

    def layer(self, name):
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise ValidationError(f"Model has no layer named {name!r}")

    def with_params(self, params):
        """Shallow variant sharing bn_stats/masks copies but carrying new params."""
        clone = copy.copy(self)
        clone.params = params
        clone.bn_stats = {k: v.copy() for k, v in self.bn_stats.items()}
        clone.masks = {k: v.copy() for k, v in self.masks.items()}
        return clone


def decayable(name, decay_bn_affine=True):
    if name.endswith('.gamma') or name.endswith('.beta'):
        return decay_bn_affine
    return True


def is_weight(name):
    return name.endswith('.weight')


def flatten_params(params):
    """Concatenate parameters in insertion order into one vector."""
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten_params(vector, template):
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(v.size for v in template.values())
    if vector.size != total:
        raise ShapeError(f"Vector of length {vector.size} cannot fill {total} parameters")
    out = {}
    offset = 0
    for name, ref in template.items():
        out[name] = vector[offset:offset + ref.size].reshape(ref.shape).copy()
        offset += ref.size
    return out


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_matching(params, other, what='gradient set'):
    if list(params.keys()) != list(other.keys()):
        raise ShapeError(f"{what} keys do not match model parameters")
    for name, value in params.items():
        if other[name].shape != value.shape:
            raise ShapeError(
                f"{what} entry {name} has shape {other[name].shape}, expected {value.shape}")


def params_checksum(params):
    digest = hashlib.sha256()
    for name, value in params.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(value, dtype='<f8').tobytes())
    return digest.hexdigest()


def bn_checksum(bn_stats):
    digest = hashlib.sha256()
    for name, stats in bn_stats.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(stats.running_mean, dtype='<f8').tobytes())
        digest.update(np.ascontiguousarray(stats.running_var, dtype='<f8').tobytes())
    return digest.hexdigest()


# ============================================================================
# ARCHITECTURE REGISTRY
# ============================================================================

def _conv_block(layers, idx, in_ch, out_ch, pool=True):
    layers.append(LayerSpec('conv2d', f'conv{idx}', {
        'in_channels': in_ch, 'out_channels': out_ch, 'kernel': 3, 'stride': 1, 'padding': 1}))
    layers.append(LayerSpec('batchnorm', f'bn{idx}', {'channels': out_ch}))
    layers.append(LayerSpec('relu', f'relu{idx}'))
    if pool:
        layers.append(LayerSpec('maxpool', f'pool{idx}', {'size': 2}))


def _tinycnn(input_shape, num_classes, width=8):
    channels, height, width_px = input_shape
    layers = []
    _conv_block(layers, 1, channels, width)
    _conv_block(layers, 2, width, 2 * width)
    layers.append(LayerSpec('flatten', 'flatten'))
    flat = 2 * width * (height // 4) * (width_px // 4)
    layers.append(LayerSpec('dense', 'fc', {'in_features': flat, 'out_features': num_classes}))
    return layers


def _minicnn(input_shape, num_classes, width=8):
    channels, height, width_px = input_shape
    layers = []
    _conv_block(layers, 1, channels, width, pool=False)
    _conv_block(layers, 2, width, width)
    _conv_block(layers, 3, width, 2 * width, pool=False)
    _conv_block(layers, 4, 2 * width, 2 * width)
    layers.append(LayerSpec('flatten', 'flatten'))
    flat = 2 * width * (height // 4) * (width_px // 4)
    layers.append(LayerSpec('dense', 'fc', {'in_features': flat, 'out_features': num_classes}))
    return layers


def _mlp(input_shape, num_classes, width=16):
    flat = int(np.prod(input_shape))
    return [
        LayerSpec('flatten', 'flatten'),
        LayerSpec('dense', 'fc1', {'in_features': flat, 'out_features': width}),
        LayerSpec('batchnorm', 'bn1', {'channels': width}),
        LayerSpec('relu', 'relu1'),
        LayerSpec('dense', 'fc', {'in_features': width, 'out_features': num_classes}),
    ]


ARCHITECTURES = {
    'tinycnn': _tinycnn,
    'minicnn': _minicnn,
    'mlp': _mlp,
}


def init_params(layers, rng):
    """He-normal weights, zero biases, unit gamma, zero beta."""
    params = {}
    bn_stats = {}
    for spec in layers:
        a = spec.attrs
        if spec.kind == 'dense':
            fan_in = a['in_features']
            params[f'{spec.name}.weight'] = rng.standard_normal(
                (a['in_features'], a['out_features'])) * np.sqrt(2.0 / fan_in)
            params[f'{spec.name}.bias'] = np.zeros(a['out_features'])
        elif spec.kind == 'conv2d':
            k = a['kernel']
            fan_in = a['in_channels'] * k * k
            params[f'{spec.name}.weight'] = rng.standard_normal(
                (a['out_channels'], a['in_channels'], k, k)) * np.sqrt(2.0 / fan_in)
            params[f'{spec.name}.bias'] = np.zeros(a['out_channels'])
        elif spec.kind == 'batchnorm':
            c = a['channels']
            params[f'{spec.name}.gamma'] = np.ones(c)
            params[f'{spec.name}.beta'] = np.zeros(c)
            bn_stats[spec.name] = BnStats(np.zeros(c), np.ones(c))
    return params, bn_stats


def build_model(arch, input_shape, num_classes, seed=0, width=None):
    if arch not in ARCHITECTURES:
        raise ValidationError(
            f"Unknown architecture {arch!r}", [f"architecture: expected one of {sorted(ARCHITECTURES)}"])
    input_shape = tuple(int(d) for d in input_shape)
    if arch in ('tinycnn', 'minicnn') and (input_shape[1] % 4 or input_shape[2] % 4):
        raise ShapeError(f"{arch} needs spatial extents divisible by 4, got {input_shape}")
    kwargs = {} if width is None else {'width': width}
    layers = ARCHITECTURES[arch](input_shape, num_classes, **kwargs)
    return model_from_layers(layers, input_shape, num_classes, seed=seed, arch=arch)


def model_from_layers(layers, input_shape, num_classes, seed=0, arch='custom'):
    rng = np.random.default_rng(seed)
    params, bn_stats = init_params(layers, rng)
    return ModelState(layers=list(layers), params=params, bn_stats=bn_stats,
                      input_shape=tuple(input_shape), num_classes=num_classes,
                      arch=arch, seed=seed)


def last_feature_layer(model):
    """Activation that closes the final convolutional block (FP/ANP target)."""
    last_conv = None
    for i, spec in enumerate(model.layers):
        if spec.kind == 'conv2d':
            last_conv = i
    if last_conv is None:
        raise ValidationError(f"Architecture {model.arch!r} has no convolutional block")
    for spec in model.layers[last_conv + 1:]:
        if spec.kind == 'relu':
            return spec.name
        if spec.kind in ('maxpool', 'flatten', 'dense'):
            break
    raise ValidationError(f"Final convolutional block of {model.arch!r} has no activation")


def feature_block(model, feature_layer):
    """(conv, batchnorm or None) layer names feeding `feature_layer`."""
    idx = next(i for i, s in enumerate(model.layers) if s.name == feature_layer)
    conv = bn = None
    for spec in reversed(model.layers[:idx]):
        if spec.kind == 'batchnorm' and bn is None and conv is None:
            bn = spec.name
        elif spec.kind == 'conv2d':
            conv = spec.name
            break
    if conv is None:
        raise ValidationError(f"No convolution feeds {feature_layer!r}")
    return conv, bn


def layer_channels(model, name):
    spec = model.layer(name)
    idx = model.layers.index(spec)
    for prev in reversed(model.layers[:idx + 1]):
        if prev.kind == 'conv2d':
            return prev.attrs['out_channels']
        if prev.kind == 'dense':
            return prev.attrs['out_features']
        if prev.kind == 'batchnorm':
            return prev.attrs['channels']
    return model.input_shape[0]
