"""
Clean vs watermark BatchNorm statistics: the per-channel gap each BN layer
sees between a clean batch and a watermark batch.
"""
import numpy as np

from shared.errors import ValidationError
from shared.utils import write_csv
from services.engine.network import collect_bn_stats

HEADER = ('layer', 'channel', 'clean_mean', 'wm_mean', 'clean_var', 'wm_var', 'mean_gap', 'var_gap')


def bn_domain_shift(model, clean_batch, wm_batch):
    if not model.bn_stats:
        raise ValidationError(f"Architecture {model.arch!r} has no BatchNorm layers")
    clean = collect_bn_stats(model, clean_batch)
    marked = collect_bn_stats(model, wm_batch)
    rows = []
    for layer, (clean_mean, clean_var) in clean.stats.items():
        wm_mean, wm_var = marked.stats[layer]
        for c in range(clean_mean.size):
            rows.append((layer, c, float(clean_mean[c]), float(wm_mean[c]),
                         float(clean_var[c]), float(wm_var[c]),
                         float(abs(wm_mean[c] - clean_mean[c])),
                         float(abs(wm_var[c] - clean_var[c]))))
    return rows


def shift_summary(rows):
    """Mean gaps per layer."""
    out = {}
    for layer in dict.fromkeys(r[0] for r in rows):
        picked = [r for r in rows if r[0] == layer]
        out[layer] = {'mean_gap': float(np.mean([r[6] for r in picked])),
                      'var_gap': float(np.mean([r[7] for r in picked]))}
    return out


def write_shift(rows, path):
    return write_csv(path, HEADER, rows)
