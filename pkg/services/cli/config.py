"""
Experiment configuration: one JSON document (schema_version 1) parsed into
frozen dataclasses. Every problem is collected with its field path before a
single ValidationError is raised.

Component seeds are never written in the document; they derive from the
global seed (overridable with --seed).
"""
from dataclasses import asdict, dataclass, field, fields, replace

from shared.errors import ValidationError
from shared.utils import canonical_json, derive_seed, read_json, sha256_bytes
from services.attacks.plans import AttackPlan
from services.embedders.plans import TrainPlan
from services.engine.model import ARCHITECTURES
from services.landscape.plans import GridSpec
from services.watermark.triggers import ContentTrigger, NoiseTrigger, UnrelatedTrigger, WatermarkSpec

SCHEMA_VERSION = 1

DATASET_KINDS = ('builtin', 'idx', 'image_dir')


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = 'builtin'
    num_classes: int = 6
    # builtin shapes dataset
    image_size: int = 16
    train_count: int = 3000
    test_count: int = 600
    noise: float = 0.05
    # idx
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    # image_dir
    train_dir: str = None
    test_dir: str = None
    seed: int = 0

    def problems(self, prefix='dataset'):
        out = []
        if self.kind not in DATASET_KINDS:
            out.append(f"{prefix}.kind: expected one of {DATASET_KINDS}")
        if self.num_classes < 2:
            out.append(f"{prefix}.num_classes: must be >= 2")
        if self.kind == 'builtin':
            if self.train_count < 10 or self.test_count < 1:
                out.append(f"{prefix}.train_count/test_count: too small")
            if self.image_size < 4 or self.image_size % 4:
                out.append(f"{prefix}.image_size: must be a positive multiple of 4")
        if self.kind == 'idx':
            for name in ('train_images', 'train_labels', 'test_images', 'test_labels'):
                if not getattr(self, name):
                    out.append(f"{prefix}.{name}: required for idx datasets")
        if self.kind == 'image_dir':
            for name in ('train_dir', 'test_dir'):
                if not getattr(self, name):
                    out.append(f"{prefix}.{name}: required for image_dir datasets")
        return out


@dataclass(frozen=True)
class SplitSpec:
    owner: float = 0.8
    attacker: float = 0.2
    seed: int = 0

    def problems(self, prefix='split'):
        out = []
        if not 0.0 < self.owner < 1.0 or not 0.0 < self.attacker < 1.0:
            out.append(f"{prefix}.owner/attacker: must lie in (0, 1)")
        elif abs(self.owner + self.attacker - 1.0) > 1e-9:
            out.append(f"{prefix}: owner + attacker must equal 1")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    architecture: str = 'tinycnn'
    watermark: WatermarkSpec = field(default_factory=WatermarkSpec)
    watermark_fraction: float = 0.01
    train: TrainPlan = field(default_factory=TrainPlan)
    attacks: tuple = ()
    landscape: GridSpec = field(default_factory=GridSpec)
    output_dir: str = 'runs/experiment'
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return sha256_bytes(canonical_json(self.to_dict()).encode())


# ============================================================================
# PARSING
# ============================================================================

def _section(data, name, cls, problems, reserved=('seed',), path=None):
    path = path or name
    raw = data.get(name, {})
    if not isinstance(raw, dict):
        problems.append(f"{path}: expected an object")
        return {}
    known = {f.name for f in fields(cls)} - set(reserved)
    for key in sorted(set(raw) - known):
        if key in reserved:
            problems.append(f"{path}.{key}: component seeds derive from the global seed")
        else:
            problems.append(f"{path}.{key}: unknown field")
    return {k: v for k, v in raw.items() if k in known}


def _watermark(data, seed, problems):
    raw = data.get('watermark', {})
    if not isinstance(raw, dict):
        problems.append("watermark: expected an object")
        return WatermarkSpec(seed=seed)
    nested = {'content': ContentTrigger, 'noise': NoiseTrigger, 'unrelated': UnrelatedTrigger}
    top = {k: v for k, v in raw.items() if k not in nested}
    for key in sorted(set(top) - {'kind', 'target_label'}):
        problems.append(f"watermark.{key}: unknown field")
    parts = {}
    for key, cls in nested.items():
        reserved = ('seed',) if cls is NoiseTrigger else ()
        values = _section(raw, key, cls, problems, reserved, path=f'watermark.{key}')
        if cls is NoiseTrigger:
            values['seed'] = derive_seed(seed, 'noise-pattern')
        if cls is ContentTrigger and 'patch' in values and values['patch'] is not None:
            values['patch'] = tuple(tuple(row) for row in values['patch'])
        if cls is ContentTrigger and isinstance(values.get('position'), list):
            values['position'] = tuple(values['position'])
        try:
            parts[key] = cls(**values)
        except TypeError as e:
            problems.append(f"watermark.{key}: {e}")
            parts[key] = cls()
    return WatermarkSpec(kind=top.get('kind', 'content'), target_label=top.get('target_label', 0),
                         seed=derive_seed(seed, 'watermark'), **parts)


def parse_config(data, seed=None):
    """ExperimentConfig from a decoded JSON document; `seed` overrides the global seed."""
    if not isinstance(data, dict):
        raise ValidationError("Invalid experiment config", ["<root>: expected an object"])
    problems = []
    if data.get('schema_version') != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in sorted(set(data) - known):
        problems.append(f"{key}: unknown field")

    seed = data.get('seed', 0) if seed is None else seed
    if not isinstance(seed, int) or seed < 0:
        problems.append("seed: must be a non-negative integer")
        seed = 0

    dataset = DatasetSpec(**_section(data, 'dataset', DatasetSpec, problems),
                          seed=derive_seed(seed, 'dataset'))
    problems += dataset.problems()
    split = SplitSpec(**_section(data, 'split', SplitSpec, problems), seed=derive_seed(seed, 'split'))
    problems += split.problems()

    architecture = data.get('architecture', 'tinycnn')
    if architecture not in ARCHITECTURES:
        problems.append(f"architecture: expected one of {sorted(ARCHITECTURES)}")

    watermark = _watermark(data, seed, problems)
    try:
        watermark.validate(dataset.num_classes)
    except ValidationError as e:
        problems += e.problems
    fraction = data.get('watermark_fraction', 0.01)
    if not isinstance(fraction, (int, float)) or not 0.0 < fraction < 1.0:
        problems.append("watermark_fraction: must lie in (0, 1)")

    train_values = _section(data, 'train', TrainPlan, problems)
    if 'arch' in train_values:
        problems.append("train.arch: set the top-level architecture instead")
    train_values['arch'] = architecture
    if 'milestones' in train_values:
        train_values['milestones'] = tuple(train_values['milestones'])
    train = TrainPlan(**train_values, seed=derive_seed(seed, 'train'))
    problems += train.problems()

    attacks = []
    raw_attacks = data.get('attacks', [])
    if not isinstance(raw_attacks, list):
        problems.append("attacks: expected a list")
        raw_attacks = []
    for i, raw in enumerate(raw_attacks):
        path = f"attacks[{i}]"
        values = _section({path: raw}, path, AttackPlan, problems)
        if not isinstance(raw, dict):
            continue
        plan = AttackPlan(**values, seed=derive_seed(seed, f'attack-{i}'))
        problems += plan.problems(path)
        attacks.append(plan)

    grid = GridSpec(**_section(data, 'landscape', GridSpec, problems), seed=derive_seed(seed, 'landscape'))
    problems += grid.problems()

    output_dir = data.get('output_dir', 'runs/experiment')
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("output_dir: must be a non-empty path")

    if problems:
        raise ValidationError("Invalid experiment config", problems)
    return ExperimentConfig(seed=seed, dataset=dataset, split=split, architecture=architecture,
                            watermark=watermark, watermark_fraction=float(fraction), train=train,
                            attacks=tuple(attacks), landscape=grid, output_dir=output_dir)


def load_config(path, seed=None):
    return parse_config(read_json(path), seed)


def with_output_dir(config, output_dir):
    return replace(config, output_dir=str(output_dir)) if output_dir else config
