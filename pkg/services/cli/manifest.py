"""
Run manifest: `<out>/manifest.json` lists every artifact a stage produced with
its SHA-256, the config hash and the software version.
"""
from pathlib import Path

from shared import __version__
from shared.errors import IntegrityError, NotFoundError
from shared.logger import get_logger
from shared.utils import current_timestamp, read_json, sha256_file, write_json

logger = get_logger(__name__)

MANIFEST_NAME = 'manifest.json'


def manifest_path(out_dir):
    out_dir = Path(out_dir)
    return out_dir if out_dir.name == MANIFEST_NAME else out_dir / MANIFEST_NAME


def new_manifest(config_hash):
    now = current_timestamp()
    return {
        'config_hash': config_hash,
        'version': __version__,
        'created_at': now,
        'updated_at': now,
        'stages': {},
    }


def load_manifest(out_dir, config_hash=None):
    """Existing manifest of `out_dir`, or a fresh one when absent or from another config."""
    path = manifest_path(out_dir)
    if not path.is_file():
        return new_manifest(config_hash)
    manifest = read_json(path)
    if config_hash is not None and manifest.get('config_hash') != config_hash:
        logger.warning("Config changed since the last run; starting a new manifest",
                       extra={'fields': {'path': str(path)}})
        return new_manifest(config_hash)
    return manifest


def record_stage(manifest, out_dir, stage, paths, summary=None):
    """Add a stage entry; paths are stored relative to `out_dir` with their checksums."""
    out_dir = Path(out_dir)
    artifacts = []
    for path in paths:
        path = Path(path)
        artifacts.append({
            'path': str(path.relative_to(out_dir)) if path.is_relative_to(out_dir) else str(path),
            'sha256': sha256_file(path),
        })
    entry = {'artifacts': artifacts, 'finished_at': current_timestamp()}
    if summary is not None:
        entry['summary'] = summary
    manifest['stages'][stage] = entry
    manifest['updated_at'] = entry['finished_at']
    return manifest


def save_manifest(manifest, out_dir):
    return write_json(manifest_path(out_dir), manifest)


def verify_manifest(path):
    """Load a manifest and check every listed artifact; returns (manifest, root)."""
    path = manifest_path(path)
    if not path.is_file():
        raise NotFoundError(f"Manifest not found: {path}")
    manifest = read_json(path)
    root = path.parent
    for stage, entry in manifest.get('stages', {}).items():
        for artifact in entry.get('artifacts', []):
            target = root / artifact['path']
            if not target.is_file():
                raise NotFoundError(f"Artifact of stage {stage!r} is missing: {target}")
            if sha256_file(target) != artifact['sha256']:
                raise IntegrityError(f"Checksum mismatch for {target} (stage {stage!r})")
    return manifest, root
