from dataclasses import dataclass, field, fields

from shared.errors import ValidationError

EMBEDDERS = ('vanilla', 'ew', 'cw', 'app')


@dataclass(frozen=True)
class TrainPlan:
    embedder: str = 'app'
    arch: str = 'tinycnn'
    epochs: int = 20
    batch_size_clean: int = 128
    batch_size_wm: int = 64
    lr: float = 0.05
    milestones: tuple = (10, 15)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_bn_affine: bool = True
    alpha: float = 0.01
    epsilon: float = 0.02
    norm_scope: str = 'all'
    cbn: bool = True
    app_clean_mix: int = 0
    ew_temperature: float = 2.0
    pretrain_epochs: int = 20
    cw_levels: int = 4
    cw_sigma: float = 0.01
    cw_samples: int = 1
    seed: int = 0

    def lr_at(self, epoch):
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * (self.lr_decay ** passed)

    def problems(self, prefix='train'):
        out = []
        if self.embedder not in EMBEDDERS:
            out.append(f"{prefix}.embedder: expected one of {EMBEDDERS}")
        if self.epochs < 0:
            out.append(f"{prefix}.epochs: must be >= 0")
        if self.batch_size_clean < 1 or self.batch_size_wm < 1:
            out.append(f"{prefix}.batch_size_clean/batch_size_wm: must be >= 1")
        if self.lr <= 0:
            out.append(f"{prefix}.lr: must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"{prefix}.momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            out.append(f"{prefix}.weight_decay: must be >= 0")
        if self.alpha < 0:
            out.append(f"{prefix}.alpha: must be >= 0")
        if self.epsilon < 0:
            out.append(f"{prefix}.epsilon: must be >= 0")
        if self.norm_scope not in ('all', 'weights'):
            out.append(f"{prefix}.norm_scope: expected 'all' or 'weights'")
        if self.app_clean_mix < 0:
            out.append(f"{prefix}.app_clean_mix: must be >= 0")
        if self.ew_temperature <= 0:
            out.append(f"{prefix}.ew_temperature: must be > 0")
        if self.cw_levels < 1 or self.cw_samples < 1:
            out.append(f"{prefix}.cw_levels/cw_samples: must be >= 1")
        if self.cw_sigma < 0:
            out.append(f"{prefix}.cw_sigma: must be >= 0")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ValidationError("Invalid train plan", problems)
        return self

    @classmethod
    def from_dict(cls, data, prefix='train'):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError("Invalid train plan", [f"{prefix}.{k}: unknown field" for k in unknown])
        values = dict(data)
        if 'milestones' in values:
            values['milestones'] = tuple(values['milestones'])
        return cls(**values)


@dataclass
class TrainReport:
    embedder: str
    epochs: list = field(default_factory=list)
    clean_loss: list = field(default_factory=list)
    wm_loss: list = field(default_factory=list)
    ba: list = field(default_factory=list)
    wsr: list = field(default_factory=list)
    # per APP step: ||delta|| / (epsilon * ||theta||)
    perturbation_ratios: list = field(default_factory=list)
    skipped_perturbations: int = 0
    wall_clock: float = 0.0
    model: object = None

    HEADER = ('epoch', 'clean_loss', 'wm_loss', 'ba', 'wsr')

    def rows(self):
        return list(zip(self.epochs, self.clean_loss, self.wm_loss, self.ba, self.wsr))

    @property
    def final_ba(self):
        return self.ba[-1] if self.ba else None

    @property
    def final_wsr(self):
        return self.wsr[-1] if self.wsr else None


@dataclass(frozen=True)
class EvalSets:
    """Held-out data measured after every epoch."""
    test: object
    wm_test: object
    target: int
