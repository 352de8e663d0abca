import math
from dataclasses import dataclass, field, fields

from shared.errors import ValidationError

ATTACKS = ('ft', 'fp', 'anp')

LABELS = {'ft': 'FT', 'fp': 'FP', 'anp': 'ANP-lite'}


@dataclass(frozen=True)
class AttackPlan:
    attack: str = 'ft'
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    # lr *= lr_decay every decay_every epochs
    lr_decay: float = 0.5
    decay_every: int = 2
    weight_decay: float = 5e-4
    batch_size: int = 64
    prune_fraction: float = 0.9
    anp_rate: float = 0.6
    anp_eps: float = 0.4
    seed: int = 0

    @property
    def label(self):
        return LABELS.get(self.attack, self.attack)

    def lr_at(self, epoch):
        return self.lr * (self.lr_decay ** (epoch // self.decay_every))

    def problems(self, prefix='attack'):
        out = []
        if self.attack not in ATTACKS:
            out.append(f"{prefix}.attack: expected one of {ATTACKS}")
        if self.epochs < 0:
            out.append(f"{prefix}.epochs: must be >= 0")
        if self.lr < 0:
            out.append(f"{prefix}.lr: must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"{prefix}.momentum: must lie in [0, 1)")
        if self.decay_every < 1:
            out.append(f"{prefix}.decay_every: must be >= 1")
        if self.batch_size < 2:
            out.append(f"{prefix}.batch_size: must be >= 2")
        if not 0.0 <= self.prune_fraction < 1.0:
            out.append(f"{prefix}.prune_fraction: must lie in [0, 1)")
        if not 0.0 <= self.anp_rate < 1.0:
            out.append(f"{prefix}.anp_rate: must lie in [0, 1)")
        if self.anp_eps < 0:
            out.append(f"{prefix}.anp_eps: must be >= 0")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ValidationError("Invalid attack plan", problems)
        return self

    @classmethod
    def from_dict(cls, data, prefix='attack'):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError("Invalid attack plan", [f"{prefix}.{k}: unknown field" for k in unknown])
        return cls(**data)


def channels_to_prune(fraction, channels):
    """ceil(fraction * C), tolerant to float noise such as 0.6 * 5."""
    return math.ceil(round(fraction * channels, 9))


@dataclass
class AttackReport:
    attack: str
    epochs: list = field(default_factory=list)
    wsr: list = field(default_factory=list)
    ba: list = field(default_factory=list)
    layer: str = None
    pruned: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    model: object = None

    HEADER = ('epoch', 'wsr', 'ba')

    def record(self, epoch, wsr, ba):
        self.epochs.append(epoch)
        self.wsr.append(wsr)
        self.ba.append(ba)

    def rows(self):
        return list(zip(self.epochs, self.wsr, self.ba))

    @property
    def before_wsr(self):
        return self.wsr[0] if self.wsr else None

    @property
    def after_wsr(self):
        return self.wsr[-1] if self.wsr else None

    @property
    def after_ba(self):
        return self.ba[-1] if self.ba else None
