"""Pipeline configuration, stored as a TOML file with one section per stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import tomli
import tomli_w

from .losses import LossConfig
from .series import QuantileLevels, WindowSpec
from .student import StudentConfig, TrainerConfig
from .synthetic import SyntheticRecipe
from .teacher import RetrievalConfig

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class DataConfig:
    csv: str = ""  # empty -> synthetic recipe
    period: Optional[int] = None
    recipe: SyntheticRecipe = field(default_factory=SyntheticRecipe)


@dataclass(frozen=True)
class StudentSection:
    """Student settings not already implied by the window and level grid."""

    family: str = "tiny_transformer"
    patch: int = 8
    width: int = 32
    enc_layers: int = 2
    dec_layers: int = 1
    heads: int = 2
    ff_mult: int = 2
    periodic: bool = False
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    horizons: tuple[int, ...] = (6, 12, 24)
    grid_step: float = 0.05
    beta_step: float = 0.05


@dataclass(frozen=True)
class BenchSection:
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    warmup: int = 20
    queries: int = 200
    in_run_all: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    backbone: str = "seasonal_naive"
    levels: tuple[float, ...] = DEFAULT_LEVELS
    embed_patches: int = 8
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    data: DataConfig = field(default_factory=DataConfig)
    window: WindowSpec = field(default_factory=lambda: WindowSpec(96, 24, 1))
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    student: StudentSection = field(default_factory=StudentSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def __post_init__(self):
        if self.backbone not in ("seasonal_naive", "persistence"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        QuantileLevels(tuple(self.levels))
        if len(self.split) != 3:
            raise ValueError("split needs three fractions")

    @property
    def quantile_levels(self) -> QuantileLevels:
        return QuantileLevels(tuple(self.levels))

    @property
    def period(self) -> int:
        if self.data.csv:
            if not self.data.period:
                raise ValueError("CSV input needs data.period")
            return int(self.data.period)
        return self.data.recipe.period

    def student_config(self) -> StudentConfig:
        s = self.student
        return StudentConfig(lookback=self.window.lookback, horizon=self.window.horizon,
                             n_quantiles=len(self.levels), patch=s.patch, width=s.width,
                             enc_layers=s.enc_layers, dec_layers=s.dec_layers, heads=s.heads,
                             ff_mult=s.ff_mult, family=s.family,
                             period=self.period if s.periodic else None, seed=s.seed)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Propagate a master seed to every seeded component."""
        return replace(self, seed=seed,
                       data=replace(self.data, recipe=replace(self.data.recipe, seed=seed)),
                       student=replace(self.student, seed=seed),
                       trainer=replace(self.trainer, seed=seed))

    def to_dict(self) -> dict:
        return _strip_none(_plain(asdict(self)))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def _build(cls, d: dict):
    kw = {}
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    nested = {"data": DataConfig, "recipe": SyntheticRecipe, "window": WindowSpec,
              "retrieval": RetrievalConfig, "student": StudentSection, "trainer": TrainerConfig,
              "loss": LossConfig, "eval": EvalSection, "bench": BenchSection}
    for k, v in d.items():
        if k in nested and isinstance(v, dict):
            v = _build(nested[k], v)
        elif k == "shifts":
            v = tuple(tuple(x) for x in v)
        elif isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def from_dict(d: dict) -> PipelineConfig:
    return _build(PipelineConfig, d)


def dumps(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def loads(text: str) -> PipelineConfig:
    return from_dict(tomli.loads(text))


def load(path) -> PipelineConfig:
    with open(path, "rb") as fh:
        return from_dict(tomli.load(fh))


def save(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
