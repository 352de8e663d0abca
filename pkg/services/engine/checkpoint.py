"""
Checkpoint container.

Binary layout (all integers little-endian uint32):
    b'WMCK' | version | header_len | header (UTF-8 JSON) | tensor records...
Tensor record:
    name_len | name (UTF-8) | ndim | dims[ndim] | float64 little-endian data

Header: arch, input_shape, num_classes, seed, layers, bn (momentum/epsilon per
layer) and the ordered list of tensor names. Tensor names are namespaced:
'param/<name>', 'bn/<layer>/running_mean', 'bn/<layer>/running_var',
'mask/<layer>'.

Sidecar `<path>.json` carries metadata, including the SHA-256 of the binary
and an optional provenance block.
"""
import json
import struct
from pathlib import Path

import numpy as np

from shared.errors import IntegrityError, NotFoundError
from shared.logger import get_logger
from shared.utils import read_json, sha256_bytes, sha256_file, write_json
from services.engine.model import BnStats, LayerSpec, ModelState

logger = get_logger(__name__)

MAGIC = b'WMCK'
FORMAT_VERSION = 1


def _pack_u32(value):
    return struct.pack('<I', value)


def _tensor_record(name, array):
    array = np.ascontiguousarray(array, dtype='<f8')
    encoded = name.encode('utf-8')
    parts = [_pack_u32(len(encoded)), encoded, _pack_u32(array.ndim)]
    parts.extend(_pack_u32(d) for d in array.shape)
    parts.append(array.tobytes())
    return b''.join(parts)


def encode(model):
    tensors = []
    for name, value in model.params.items():
        tensors.append((f'param/{name}', value))
    for layer, stats in model.bn_stats.items():
        tensors.append((f'bn/{layer}/running_mean', stats.running_mean))
        tensors.append((f'bn/{layer}/running_var', stats.running_var))
    for layer, mask in model.masks.items():
        tensors.append((f'mask/{layer}', mask))

    header = {
        'arch': model.arch,
        'input_shape': list(model.input_shape),
        'num_classes': model.num_classes,
        'seed': model.seed,
        'layers': [spec.to_dict() for spec in model.layers],
        'bn': {layer: {'momentum': s.momentum, 'epsilon': s.epsilon}
               for layer, s in model.bn_stats.items()},
        'tensors': [name for name, _ in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    body = [MAGIC, _pack_u32(FORMAT_VERSION), _pack_u32(len(header_bytes)), header_bytes]
    body.extend(_tensor_record(name, value) for name, value in tensors)
    return b''.join(body)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise IntegrityError("Checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self):
        return struct.unpack('<I', self.take(4))[0]


def decode(data):
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise IntegrityError("Not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise IntegrityError(f"Unsupported checkpoint version {version}")
    header = json.loads(reader.take(reader.u32()).decode('utf-8'))

    tensors = {}
    for expected in header['tensors']:
        name = reader.take(reader.u32()).decode('utf-8')
        if name != expected:
            raise IntegrityError(f"Tensor table mismatch: {name!r} != {expected!r}")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(8 * count)
        tensors[name] = np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(shape)
    if reader.offset != len(data):
        raise IntegrityError("Trailing bytes after tensor records")

    params = {}
    masks = {}
    bn_parts = {}
    for name, value in tensors.items():
        group, _, rest = name.partition('/')
        if group == 'param':
            params[rest] = value
        elif group == 'mask':
            masks[rest] = value
        elif group == 'bn':
            layer, _, field_name = rest.rpartition('/')
            bn_parts.setdefault(layer, {})[field_name] = value
    bn_stats = {
        layer: BnStats(parts['running_mean'], parts['running_var'],
                       header['bn'][layer]['momentum'], header['bn'][layer]['epsilon'])
        for layer, parts in bn_parts.items()
    }
    return ModelState(
        layers=[LayerSpec.from_dict(d) for d in header['layers']],
        params=params,
        bn_stats=bn_stats,
        input_shape=tuple(header['input_shape']),
        num_classes=header['num_classes'],
        arch=header['arch'],
        seed=header['seed'],
        masks=masks,
    )


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + '.json')


def save_checkpoint(model, path, provenance=None):
    """Write binary + sidecar; returns the binary's SHA-256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(model)
    path.write_bytes(data)
    digest = sha256_bytes(data)
    metadata = {
        'format': 'WMCK',
        'version': FORMAT_VERSION,
        'sha256': digest,
        'arch': model.arch,
        'seed': model.seed,
        'num_classes': model.num_classes,
        'num_parameters': int(sum(v.size for v in model.params.values())),
        'masked_layers': sorted(model.masks),
    }
    if provenance:
        metadata['provenance'] = provenance
    write_json(sidecar_path(path), metadata)
    logger.info(f"Checkpoint written to {path}", extra={'fields': {'sha256': digest}})
    return digest


def load_checkpoint(path, verify=True):
    """Returns (model, metadata). With verify, the sidecar checksum must match."""
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Checkpoint not found: {path}")
    metadata = {}
    if verify:
        side = sidecar_path(path)
        if not side.is_file():
            raise IntegrityError(f"Checkpoint sidecar missing: {side}")
        metadata = read_json(side)
        actual = sha256_file(path)
        if actual != metadata.get('sha256'):
            raise IntegrityError(
                f"Checksum mismatch for {path}: sidecar {metadata.get('sha256')}, file {actual}")
    return decode(path.read_bytes()), metadata
