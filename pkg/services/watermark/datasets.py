"""
Datasets: the procedural shapes dataset, IDX raw-binary IO, the
directory-of-images loader and the owner/attacker split.
"""
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from shared.errors import NotFoundError, ShapeError, ValidationError
from shared.logger import get_logger

logger = get_logger(__name__)

ROLES = ('owner-train', 'attacker-holdout', 'test')

SHAPE_NAMES = ('square', 'disk', 'ring', 'plus', 'triangle', 'hbar', 'vbar', 'saltire')

IDX_UINT8 = 0x08


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    role: str = 'test'
    # positions in the pool this dataset was drawn from
    source_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"Images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] == 0:
            raise ValidationError("Dataset must not be empty")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("One label per image is required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(f"Labels must lie in [0, {self.num_classes})")
        if self.role not in ROLES:
            raise ValidationError(f"Unknown dataset role {self.role!r}")
        if self.source_index is None:
            self.source_index = np.arange(self.images.shape[0])

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, role=None):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes,
                              role or self.role, self.source_index[index])

    def with_role(self, role):
        return replace(self, role=role)


# ============================================================================
# PROCEDURAL SHAPES
# ============================================================================

def _shape_mask(kind, dy, dx, r):
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == 'square':
        return np.maximum(ady, adx) <= r
    if kind == 'disk':
        return np.hypot(dy, dx) <= r
    if kind == 'ring':
        d = np.hypot(dy, dx)
        return (d <= r) & (d >= 0.55 * r)
    if kind == 'plus':
        t = 0.3 * r
        return ((adx <= t) & (ady <= r)) | ((ady <= t) & (adx <= r))
    if kind == 'triangle':
        return (dy >= -r) & (dy <= r) & (adx <= (dy + r) / 2.0)
    if kind == 'hbar':
        return (ady <= 0.3 * r) & (adx <= r)
    if kind == 'vbar':
        return (adx <= 0.3 * r) & (ady <= r)
    t = 0.3 * r
    return ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t)) & (np.maximum(ady, adx) <= r)


def make_shapes(count, num_classes=6, image_size=16, seed=0, role='test', noise=0.05):
    """
    Balanced-in-expectation set of parametric shapes with jitter in position,
    size and intensity over a noisy background. Deterministic in `seed`.
    """
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ValidationError(f"Shapes dataset supports 2..{len(SHAPE_NAMES)} classes")
    if count <= 0:
        raise ValidationError("Shapes dataset needs a positive sample count")
    rng = np.random.default_rng(seed)
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    labels = rng.integers(0, num_classes, size=count)
    images = np.empty((count, 1, s, s))
    for i, label in enumerate(labels):
        cy = (s - 1) / 2.0 + rng.uniform(-0.12, 0.12) * s
        cx = (s - 1) / 2.0 + rng.uniform(-0.12, 0.12) * s
        r = rng.uniform(0.22, 0.36) * s
        intensity = rng.uniform(0.6, 1.0)
        mask = _shape_mask(SHAPE_NAMES[label], yy - cy, xx - cx, r)
        background = rng.normal(0.1, noise, size=(s, s))
        images[i, 0] = np.clip(np.where(mask, intensity, background), 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, role)


def make_textures(count, image_shape, seed=0):
    """Unrelated-domain images: random oriented gratings in [0, 1]."""
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((count, c, h, w))
    for i in range(count):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        out[i] = 0.5 + 0.5 * wave[None, :, :] * rng.uniform(0.5, 1.0)
    return np.clip(out, 0.0, 1.0)


# ============================================================================
# IDX RAW BINARY
# ============================================================================

def read_idx(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"IDX file not found: {path}")
    data = path.read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ValidationError(f"{path} is not an IDX file (bad magic)")
    if data[2] != IDX_UINT8:
        raise ValidationError(f"{path}: only unsigned-byte IDX payloads are supported")
    ndim = data[3]
    dims = struct.unpack(f'>{ndim}I', data[4:4 + 4 * ndim])
    payload = data[4 + 4 * ndim:]
    expected = int(np.prod(dims)) if dims else 1
    if len(payload) != expected:
        raise ValidationError(f"{path}: payload has {len(payload)} bytes, header says {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValidationError("IDX writer expects uint8 arrays")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = bytes([0, 0, IDX_UINT8, array.ndim]) + struct.pack(f'>{array.ndim}I', *array.shape)
    path.write_bytes(header + np.ascontiguousarray(array).tobytes())
    return path


def to_uint8(images):
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def _idx_images(raw):
    if raw.ndim == 3:
        raw = raw[:, None, :, :]
    if raw.ndim != 4:
        raise ShapeError(f"IDX images must have 3 or 4 dimensions, got {raw.ndim}")
    return raw.astype(np.float64) / 255.0


def load_idx_dataset(images_path, labels_path, num_classes, role='test'):
    images = _idx_images(read_idx(images_path))
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ShapeError(f"{labels_path} does not hold one label per image of {images_path}")
    return LabeledDataset(images, labels, num_classes, role)


def load_idx_images(path):
    """Images from one IDX file or every *.idx file of a directory (sorted)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob('*.idx'))
        if not files:
            raise NotFoundError(f"No .idx files in {path}")
        return np.concatenate([_idx_images(read_idx(f)) for f in files])
    return _idx_images(read_idx(path))


def load_image_dir(path, num_classes, role='test'):
    """
    Directory with one sub-directory per class index ('0', '1', ...), each
    holding IDX image files.
    """
    root = Path(path)
    if not root.is_dir():
        raise NotFoundError(f"Image directory not found: {root}")
    images, labels = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if not sub.name.isdigit():
            logger.warning(f"Skipping non-class directory {sub}")
            continue
        block = load_idx_images(sub)
        images.append(block)
        labels.append(np.full(block.shape[0], int(sub.name)))
    if not images:
        raise NotFoundError(f"No class directories under {root}")
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), num_classes, role)


# ============================================================================
# SPLITS
# ============================================================================

def split_owner_attacker(pool, owner_fraction=0.8, seed=0):
    """Disjoint owner-train / attacker-holdout split of a training pool."""
    if not 0.0 < owner_fraction < 1.0:
        raise ValidationError("owner_fraction must lie in (0, 1)")
    n = len(pool)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(owner_fraction * n))
    if cut == 0 or cut == n:
        raise ValidationError(f"Split of {n} samples at {owner_fraction} leaves an empty side")
    owner = pool.subset(np.sort(order[:cut]), role='owner-train')
    attacker = pool.subset(np.sort(order[cut:]), role='attacker-holdout')
    return owner, attacker
