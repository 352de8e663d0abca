"""
Watermark samples: Content (alpha-blended glyph patch), Noise (one fixed
pattern per spec) and Unrelated (images from another domain, cycled).
"""
from dataclasses import dataclass, field

import numpy as np

from shared.errors import ValidationError
from shared.logger import get_logger
from services.watermark.datasets import LabeledDataset, load_idx_images, make_textures

logger = get_logger(__name__)

WATERMARK_KINDS = ('content', 'noise', 'unrelated')

# 3x5 bitmap font
GLYPHS = {
    'T': ('111', '010', '010', '010', '010'),
    'E': ('111', '100', '111', '100', '111'),
    'S': ('111', '100', '111', '001', '111'),
    'W': ('101', '101', '101', '111', '101'),
    'M': ('101', '111', '101', '101', '101'),
}


def render_text(text, scale=1):
    """Monochrome bitmap for `text`, one blank column between letters."""
    if not text:
        raise ValidationError("Glyph text must not be empty")
    columns = []
    for i, char in enumerate(text.upper()):
        if char not in GLYPHS:
            raise ValidationError(f"No glyph for character {char!r}")
        letter = np.array([[int(b) for b in row] for row in GLYPHS[char]], dtype=np.float64)
        if i:
            columns.append(np.zeros((5, 1)))
        columns.append(letter)
    bitmap = np.hstack(columns)
    if scale < 1:
        raise ValidationError("Glyph scale must be a positive integer")
    return np.kron(bitmap, np.ones((scale, scale)))


@dataclass(frozen=True)
class ContentTrigger:
    text: str = 'T'
    scale: int = 1
    # 'bottom-right', 'top-left' or explicit [row, col]
    position: object = 'bottom-right'
    transparency: float = 1.0
    # explicit patch pixels override the glyph
    patch: tuple = None


@dataclass(frozen=True)
class NoiseTrigger:
    seed: int = 0
    amplitude: float = 0.1


@dataclass(frozen=True)
class UnrelatedTrigger:
    # 'builtin' or a path to an IDX file / directory of IDX files
    source: str = 'builtin'
    count: int = 256


@dataclass(frozen=True)
class WatermarkSpec:
    kind: str = 'content'
    target_label: int = 0
    seed: int = 0
    content: ContentTrigger = field(default_factory=ContentTrigger)
    noise: NoiseTrigger = field(default_factory=NoiseTrigger)
    unrelated: UnrelatedTrigger = field(default_factory=UnrelatedTrigger)

    def validate(self, num_classes=None):
        problems = []
        if self.kind not in WATERMARK_KINDS:
            problems.append(f"watermark.kind: expected one of {WATERMARK_KINDS}")
        if not 0.0 <= self.content.transparency <= 1.0:
            problems.append("watermark.content.transparency: must lie in [0, 1]")
        if not 0.0 <= self.noise.amplitude <= 1.0:
            problems.append("watermark.noise.amplitude: must lie in [0, 1]")
        if self.content.scale < 1:
            problems.append("watermark.content.scale: must be >= 1")
        if self.target_label < 0 or (num_classes is not None and self.target_label >= num_classes):
            problems.append(f"watermark.target_label: must lie in [0, {num_classes})")
        if self.unrelated.count < 1:
            problems.append("watermark.unrelated.count: must be >= 1")
        if problems:
            raise ValidationError("Invalid watermark spec", problems)
        return self


class Watermarker:
    """Applies one WatermarkSpec to images of a fixed geometry."""

    def __init__(self, spec, image_shape):
        self.spec = spec
        self.image_shape = tuple(image_shape)
        c, h, w = self.image_shape
        self.patch = None
        self.pattern = None
        self.source = None
        if spec.kind == 'content':
            self.patch, self.origin = self._content_patch(h, w)
        elif spec.kind == 'noise':
            rng = np.random.default_rng(spec.noise.seed)
            a = spec.noise.amplitude
            self.pattern = rng.uniform(-1.0, 1.0, size=self.image_shape) * a
        elif spec.kind == 'unrelated':
            self.source = self._unrelated_source()
        else:
            raise ValidationError(f"Unknown watermark kind {spec.kind!r}")

    def _content_patch(self, h, w):
        content = self.spec.content
        if content.patch is not None:
            patch = np.asarray(content.patch, dtype=np.float64)
        else:
            patch = render_text(content.text, content.scale)
        ph, pw = patch.shape[-2:]
        if content.position == 'bottom-right':
            row, col = h - ph - 1, w - pw - 1
        elif content.position == 'top-left':
            row, col = 1, 1
        else:
            row, col = (int(v) for v in content.position)
        if row < 0 or col < 0 or row + ph > h or col + pw > w:
            raise ValidationError(
                f"Watermark patch {ph}x{pw} at ({row}, {col}) exceeds image {h}x{w}")
        return np.clip(patch, 0.0, 1.0), (row, col)

    def _unrelated_source(self):
        cfg = self.spec.unrelated
        if cfg.source == 'builtin':
            images = make_textures(cfg.count, self.image_shape, seed=self.spec.seed)
        else:
            images = load_idx_images(cfg.source)
        if tuple(images.shape[1:]) != self.image_shape:
            raise ValidationError(
                f"Unrelated images have shape {images.shape[1:]}, expected {self.image_shape}")
        return images

    def apply(self, image, cursor=0):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValidationError(f"Image shape {image.shape} does not match {self.image_shape}")
        kind = self.spec.kind
        if kind == 'content':
            out = image.copy()
            row, col = self.origin
            ph, pw = self.patch.shape[-2:]
            t = self.spec.content.transparency
            region = out[:, row:row + ph, col:col + pw]
            out[:, row:row + ph, col:col + pw] = (1.0 - t) * region + t * self.patch
            return np.clip(out, 0.0, 1.0)
        if kind == 'noise':
            return np.clip(image + self.pattern, 0.0, 1.0)
        # wraps around when the source is exhausted
        return self.source[cursor % self.source.shape[0]].copy()

    def apply_batch(self, images, start=0):
        return np.stack([self.apply(img, start + i) for i, img in enumerate(images)])


def apply_watermark(image, spec, cursor=0):
    image = np.asarray(image, dtype=np.float64)
    return Watermarker(spec, image.shape).apply(image, cursor)


def build_watermarked_trainset(clean, spec, fraction=0.01):
    """
    Move a seed-deterministic random `fraction` of `clean` into a watermark
    set relabeled to the target. Returns (clean_part, wm_part).
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError("Watermark fraction must lie in (0, 1)")
    spec.validate(clean.num_classes)
    n = len(clean)
    count = int(round(fraction * n))
    if count == 0:
        raise ValidationError(f"Fraction {fraction} of {n} samples selects no watermark samples")
    if count == n:
        raise ValidationError(f"Fraction {fraction} of {n} samples leaves no clean samples")
    chosen = np.sort(np.random.default_rng(spec.seed).permutation(n)[:count])
    keep = np.setdiff1d(np.arange(n), chosen)

    marker = Watermarker(spec, clean.image_shape)
    wm_images = marker.apply_batch(clean.images[chosen])
    wm_part = LabeledDataset(wm_images, np.full(count, spec.target_label), clean.num_classes,
                             clean.role, clean.source_index[chosen])
    clean_part = clean.subset(keep)
    logger.info("Watermark samples embedded in training set",
                extra={'fields': {'kind': spec.kind, 'watermarked': count, 'clean': len(keep)}})
    return clean_part, wm_part


def build_watermark_testset(test, spec, start=0):
    """
    Watermarked copies of held-out images; ground-truth labels retained for WSR.

    For the unrelated kind `start` is the first unused source cursor (the number
    of training keys), so test keys never repeat a training key. The test set
    is cut to the unseen source images when the source is shorter than `test`.
    """
    spec.validate(test.num_classes)
    marker = Watermarker(spec, test.image_shape)
    if spec.kind == 'unrelated':
        unseen = marker.source.shape[0] - start
        if unseen <= 0:
            raise ValidationError(
                f"Unrelated source has {marker.source.shape[0]} images, all used by {start} training keys")
        if unseen < len(test):
            logger.warning("Watermark test set cut to unseen unrelated images",
                           extra={'fields': {'requested': len(test), 'kept': unseen}})
            test = test.subset(np.arange(unseen))
    return LabeledDataset(marker.apply_batch(test.images, start), test.labels.copy(),
                          test.num_classes, test.role, test.source_index.copy())
