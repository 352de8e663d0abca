"""
Summary table across runs: one row per (embedder, attack) with the WSR before
and after the attack, the post-attack BA and AvgDrop, the mean WSR drop of
that embedder over its attacks.
"""
import numpy as np

from shared.errors import NotFoundError, ValidationError
from services.cli.manifest import verify_manifest

HEADER = ('embedder', 'attack', 'before_wsr', 'after_wsr', 'ba', 'avg_drop')


def summarize(entries):
    """
    entries: [{'embedder', 'before_wsr', 'ba', 'attacks': [{'attack', 'before_wsr',
    'after_wsr', 'after_ba'}, ...]}, ...]
    """
    if not entries:
        raise ValidationError("Report needs at least one run")
    rows = []
    for entry in entries:
        attacks = entry.get('attacks') or []
        if not attacks:
            rows.append((entry['embedder'], None, entry['before_wsr'], None, entry['ba'], None))
            continue
        drops = [a['before_wsr'] - a['after_wsr'] for a in attacks]
        avg_drop = float(np.mean(drops))
        for a in attacks:
            rows.append((entry['embedder'], a['attack'], a['before_wsr'], a['after_wsr'],
                         a['after_ba'], avg_drop))
    return rows


def entry_from_manifest(path):
    """Report entry from a verified run manifest."""
    manifest, _ = verify_manifest(path)
    stages = manifest.get('stages', {})
    if 'train' not in stages:
        raise NotFoundError(f"Manifest {path} has no train stage")
    train = stages['train'].get('summary', {})
    attacks = stages.get('attack', {}).get('summary', {}).get('attacks', [])
    return {
        'embedder': train.get('embedder'),
        'before_wsr': train.get('final_wsr'),
        'ba': train.get('final_ba'),
        'attacks': attacks,
    }
