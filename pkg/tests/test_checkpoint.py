import json

import numpy as np
import pytest

from shared.errors import IntegrityError, NotFoundError
from services.engine.checkpoint import decode, encode, load_checkpoint, save_checkpoint, sidecar_path
from services.engine.model import bn_checksum, params_checksum
from services.engine.network import bn_reestimate


@pytest.fixture
def trained_like(tiny_cnn, batch):
    model = bn_reestimate(tiny_cnn, batch[0])
    model.masks['relu2'] = np.array([1.0, 0.0, 1.0, 0.0])
    return model


def test_checkpoint_round_trip(trained_like, tmp_path):
    path = tmp_path / 'model.wmck'
    digest = save_checkpoint(trained_like, path, provenance={'stage': 'train'})
    model, metadata = load_checkpoint(path)

    assert metadata['sha256'] == digest
    assert metadata['provenance'] == {'stage': 'train'}
    assert metadata['masked_layers'] == ['relu2']
    assert params_checksum(model.params) == params_checksum(trained_like.params)
    assert bn_checksum(model.bn_stats) == bn_checksum(trained_like.bn_stats)
    np.testing.assert_array_equal(model.masks['relu2'], trained_like.masks['relu2'])
    assert [s.to_dict() for s in model.layers] == [s.to_dict() for s in trained_like.layers]
    assert model.input_shape == (1, 8, 8)
    assert model.arch == 'tinycnn'


def test_encoding_is_byte_deterministic(trained_like):
    assert encode(trained_like) == encode(trained_like.copy())
    assert encode(decode(encode(trained_like))) == encode(trained_like)


def test_binary_starts_with_magic(trained_like):
    assert encode(trained_like)[:4] == b'WMCK'


def test_tampered_checkpoint_is_refused(trained_like, tmp_path):
    path = tmp_path / 'model.wmck'
    save_checkpoint(trained_like, path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_sidecar_checksum_mismatch_is_refused(trained_like, tmp_path):
    path = tmp_path / 'model.wmck'
    save_checkpoint(trained_like, path)
    side = sidecar_path(path)
    metadata = json.loads(side.read_text())
    metadata['sha256'] = '0' * 64
    side.write_text(json.dumps(metadata))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(NotFoundError):
        load_checkpoint(tmp_path / 'absent.wmck')


@pytest.mark.parametrize('data', [b'NOPE' + b'\x00' * 12, b'WMCK\x01\x00'])
def test_malformed_binary(data):
    with pytest.raises(IntegrityError):
        decode(data)
