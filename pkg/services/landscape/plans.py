from dataclasses import dataclass, field, fields

import numpy as np

from shared.errors import ValidationError


def axis_values(low, high, step):
    """Inclusive grid from low to high; values rounded so that 0 lands exactly on 0.0."""
    count = int(round((high - low) / step)) + 1
    values = np.round(low + step * np.arange(count), 10) + 0.0
    return [float(v) for v in values]


@dataclass(frozen=True)
class GridSpec:
    alpha_min: float = -0.05
    alpha_max: float = 0.05
    alpha_step: float = 0.005
    beta_min: float = -0.05
    beta_max: float = 0.05
    beta_step: float = 0.005
    # fixed clean subset used to re-estimate BatchNorm in every cell
    bn_samples: int = 1024
    bn_passes: int = 1
    # origin cell vs the unmodified model, as a fraction (0.005 = 0.5 points)
    origin_tolerance: float = 0.005
    ft_iterations: int = 40
    ft_lr: float = 0.05
    ft_batch_size: int = 64
    seed: int = 0

    @property
    def alphas(self):
        return axis_values(self.alpha_min, self.alpha_max, self.alpha_step)

    @property
    def betas(self):
        return axis_values(self.beta_min, self.beta_max, self.beta_step)

    def problems(self, prefix='landscape'):
        out = []
        for axis in ('alpha', 'beta'):
            low, high, step = (getattr(self, f'{axis}_{k}') for k in ('min', 'max', 'step'))
            if step <= 0:
                out.append(f"{prefix}.{axis}_step: must be > 0")
            elif low > 0 or high < 0:
                out.append(f"{prefix}.{axis}_min/{axis}_max: range must contain 0")
            elif 0.0 not in axis_values(low, high, step):
                out.append(f"{prefix}.{axis}_step: grid does not pass through 0")
        if self.bn_samples < 2:
            out.append(f"{prefix}.bn_samples: must be >= 2")
        if self.bn_passes < 1:
            out.append(f"{prefix}.bn_passes: must be >= 1")
        if self.origin_tolerance < 0:
            out.append(f"{prefix}.origin_tolerance: must be >= 0")
        if self.ft_iterations < 0:
            out.append(f"{prefix}.ft_iterations: must be >= 0")
        if self.ft_lr <= 0:
            out.append(f"{prefix}.ft_lr: must be > 0")
        if self.ft_batch_size < 2:
            out.append(f"{prefix}.ft_batch_size: must be >= 2")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ValidationError("Invalid landscape grid", problems)
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data, prefix='landscape'):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError("Invalid landscape grid", [f"{prefix}.{k}: unknown field" for k in unknown])
        return cls(**data)


@dataclass
class DirectionPair:
    d_adv: dict
    d_ft: dict
    adv_norm: float
    ft_norm: float


@dataclass
class LandscapeGrid:
    alphas: list
    betas: list
    # (alpha, beta, wsr, ba) in row-major (alpha, beta) order
    cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    HEADER = ('alpha', 'beta', 'wsr', 'ba')

    def rows(self):
        return list(self.cells)

    def cell(self, alpha, beta):
        for a, b, rate, ba in self.cells:
            if a == alpha and b == beta:
                return rate, ba
        raise ValidationError(f"Grid has no cell ({alpha}, {beta})")

    @property
    def origin(self):
        return self.cell(0.0, 0.0)
