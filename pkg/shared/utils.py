import csv
import functools
import hashlib
import json
import os
import traceback
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from dotenv import load_dotenv

from shared.errors import LabError, NotFoundError
from shared.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class Settings:
    threads: int = 1
    log_level: str = 'INFO'


def load_settings(env_file=None):
    """Process settings from the environment and an optional .env file."""
    load_dotenv(env_file, override=False)
    raw_threads = os.environ.get('WMLAB_THREADS', '1')
    try:
        threads = max(1, int(raw_threads))
    except ValueError:
        logger.warning(f"Ignoring invalid WMLAB_THREADS={raw_threads!r}")
        threads = 1
    return Settings(
        threads=threads,
        log_level=os.environ.get('WMLAB_LOG_LEVEL', 'INFO').upper()
    )


def current_timestamp():
    """UTC timestamp in ISO-8601."""
    return datetime.now(timezone.utc).isoformat()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Artifact not found: {path}")
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(seed, component):
    """Seed for a named component, stable across runs and platforms."""
    digest = hashlib.sha256(f"{seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], 'big') % (2 ** 32)


def format_value(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path


def read_csv(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"CSV not found: {path}")
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.DictReader(handle))


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return path


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"JSON document not found: {path}")
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


def error_handler(func):
    """Command decorator: turns lab errors into process exit codes."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            result = func(*args, **kwargs)
            return 0 if result is None else result
        except LabError as e:
            logger.error(f"{type(e).__name__}: {e.message}",
                         extra={'fields': {'exit_code': e.exit_code}})
            return e.exit_code
        except json.JSONDecodeError as e:
            logger.error(f"Invalid JSON document: {e}")
            return 2
        except Exception as e:
            logger.error(f"Unhandled error: {e}\n{traceback.format_exc()}")
            return 1
    return wrapper
