import numpy as np
import pytest

from services.engine.model import BnMode, build_model
from services.engine.network import forward, loss_and_grad, loss_only
from services.watermark.datasets import make_shapes


@pytest.fixture
def shapes():
    """Small 3-class shapes dataset on 8x8 images."""
    return make_shapes(120, num_classes=3, image_size=8, seed=1)


@pytest.fixture
def tiny_cnn():
    return build_model('tinycnn', (1, 8, 8), 3, seed=0, width=2)


@pytest.fixture
def mlp():
    return build_model('mlp', (1, 4, 4), 3, seed=0, width=5)


@pytest.fixture
def batch():
    rng = np.random.default_rng(7)
    return rng.uniform(0.0, 1.0, size=(6, 1, 8, 8)), rng.integers(0, 3, size=6)


def _patterns(model, x, mode, stats):
    _, cache = forward(model, x, mode, stats, update_running=False)
    out = []
    for spec, c in cache.entries:
        if spec.kind == 'relu':
            out.append(c)
        elif spec.kind == 'maxpool':
            out.append(c[1])
    return out


def gradient_check(model, x, y, mode=BnMode.TRAIN, stats=None, samples=100, h=1e-5, seed=0):
    """
    Central finite differences on min(samples, size) entries of every parameter
    tensor. Entries whose relu masks or pool switches change between theta +/- h
    are skipped. Returns {name: (sampled, checked, worst relative error)}.
    """
    _, grads = loss_and_grad(model, x, y, mode, stats, update_running=False)
    base = _patterns(model, x, mode, stats)
    rng = np.random.default_rng(seed)
    report = {}
    for name in sorted(model.params):
        value = model.params[name]
        picks = rng.choice(value.size, size=min(samples, value.size), replace=False)
        checked, worst = 0, 0.0
        for i in picks:
            shifted = []
            for sign in (1.0, -1.0):
                moved = value.copy().reshape(-1)
                moved[i] += sign * h
                shifted.append(model.with_params({**model.params, name: moved.reshape(value.shape)}))
            stable = all(
                all(np.array_equal(a, b) for a, b in zip(base, _patterns(m, x, mode, stats)))
                for m in shifted
            )
            if not stable:
                continue
            numeric = (loss_only(shifted[0], x, y, mode, stats)
                       - loss_only(shifted[1], x, y, mode, stats)) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
            checked += 1
        report[name] = (len(picks), checked, worst)
    return report


def assert_gradients_match(report, tolerance=1e-4):
    """Every tensor keeps at least 90% of its samples and stays within tolerance."""
    for name, (sampled, checked, worst) in report.items():
        assert checked >= max(1, int(0.9 * sampled)), name
        assert worst <= tolerance, name
