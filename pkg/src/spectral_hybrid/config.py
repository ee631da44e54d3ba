"""Run configuration: one YAML document covering data, model, training and evaluation.

Unknown keys are rejected at every level. Shipped configs live in the
``configs`` package directory (``*_desk.cfg`` for CI scale, ``*_full.cfg``
for the full-size setups).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .correction_model import DEFAULT_OUTPUT_SCALE, CorrectionConfig, Model
from .datagen import GenerationConfig
from .equations import make_equation, params_from_dict
from .integrators import SCHEMES, StepperConfig
from .neural import EpdConfig
from .spectral_core import FilterSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _filter(raw, where: str) -> Optional[FilterSpec]:
    return None if raw is None else _build(FilterSpec, raw, where)


@dataclass(frozen=True)
class SplitSection:
    seed_offset: int = 0
    samples: int = 16


@dataclass(frozen=True)
class DataSection:
    equation: str
    reference_resolution: int
    reference_dt: float
    warmup_time: float
    simulation_time: float
    target_resolutions: tuple
    nonlinear_form: str = "advective"
    params: dict = field(default_factory=dict)
    filter: Optional[dict] = field(default_factory=lambda: dataclasses.asdict(FilterSpec()))
    splits: dict = field(default_factory=lambda: {"train": {"seed_offset": 0, "samples": 16}})

    def __post_init__(self):
        object.__setattr__(self, "target_resolutions", tuple(self.target_resolutions))
        object.__setattr__(self, "splits", {k: _build(SplitSection, v, f"data.splits.{k}")
                                            if isinstance(v, dict) else v
                                            for k, v in self.splits.items()})
        params_from_dict(self.equation, self.params)
        _filter(self.filter, "data.filter")

    def generation(self, split: str, seed: int) -> GenerationConfig:
        if split not in self.splits:
            raise ConfigError(f"unknown data split {split!r}; have {sorted(self.splits)}")
        s = self.splits[split]
        return GenerationConfig(self.equation, self.reference_resolution, self.reference_dt,
                                self.warmup_time, self.simulation_time, self.target_resolutions,
                                s.samples, seed + s.seed_offset, dict(self.params),
                                self.nonlinear_form, _filter(self.filter, "data.filter"), split)


@dataclass(frozen=True)
class ModelSection:
    kind: str = "hybrid"
    resolution: int = 32
    nonlinear_form: str = "advective"
    filter: bool = True
    scheme: str = "imex_cn_rk4"
    representation: str = "identity_1d"
    mode: str = "split_operator"
    input_scale: float = 1.0
    output_scale: Optional[float] = None
    velocity_state: bool = False
    epd: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"model.scheme: unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class TrainSection:
    seeds: int = 3
    train_split: str = "train"
    val_split: str = "validation"
    unroll_steps: int = 8
    batch_size: int = 8
    total_steps: int = 5000
    learning_rate: float = 1e-3
    eval_every: int = 500
    eval_horizon: int = 500
    eval_samples: int = 8
    val_windows: int = 32
    ema_decay: float = 0.98
    patience: int = 20

    def train_config(self, seed: int) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(TrainConfig) if f.name != "seed"}
        return TrainConfig(seed=seed, **kw)


@dataclass(frozen=True)
class EvalModel:
    name: str
    kind: str = "spectral"
    resolution: int = 32
    nonlinear_form: Optional[str] = None
    filter: bool = True
    trained: bool = True  # hybrid only; False evaluates freshly initialised weights


@dataclass(frozen=True)
class EvalSection:
    split: str = "validation"
    resolution: int = 32
    horizon: int = 500
    threshold: float = 0.95
    models: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(
            m if isinstance(m, EvalModel) else _build(EvalModel, m, "evaluate.models[]")
            for m in self.models))
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError("evaluate.models: model names must be unique")


@dataclass(frozen=True)
class RunConfig:
    name: str
    data: DataSection
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluate: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs"

    # -- derived objects ----------------------------------------------------

    def spec(self, n: int, nonlinear_form: Optional[str] = None):
        d = self.data
        return make_equation(d.equation, n, params_from_dict(d.equation, d.params),
                             nonlinear_form or self.model.nonlinear_form)

    def data_dt(self, n: int) -> float:
        return self.data.reference_dt * (self.data.reference_resolution // n)

    def stepper(self, n: int, filtered: bool = True) -> StepperConfig:
        filt = _filter(self.data.filter, "data.filter") if filtered else None
        return StepperConfig(self.data_dt(n), filter=filt,
                             scheme=self.model.scheme)

    def correction(self) -> CorrectionConfig:
        m = self.model
        ndim = self.spec(m.resolution).grid.ndim
        state_ch = 2 if m.velocity_state else 1
        in_ch = 4 if m.mode == "nonlinear_term" else {
            "velocity": 2, "vorticity": 1, "velocity_and_vorticity": 3, "identity_1d": 1}.get(
                m.representation, 1)
        base = EpdConfig.for_1d(in_ch, state_ch) if ndim == 1 else EpdConfig.for_2d(in_ch, state_ch)
        try:
            epd = dataclasses.replace(base, **m.epd)
            scale = DEFAULT_OUTPUT_SCALE[self.data.equation] if m.output_scale is None else m.output_scale
            return CorrectionConfig(m.representation, m.input_scale, scale, m.mode, epd,
                                    m.velocity_state)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None

    def trained_model(self, params=None) -> Model:
        m = self.model
        if m.kind == "spectral":
            raise ConfigError("model.kind is spectral; there is nothing to train")
        return Model(m.kind, self.spec(m.resolution), self.stepper(m.resolution, m.filter),
                     self.correction(), {} if params is None else params)

    def eval_model(self, e: EvalModel, params=None) -> Model:
        if e.kind == "spectral":
            return Model("spectral", self.spec(e.resolution, e.nonlinear_form),
                         self.stepper(e.resolution, e.filter))
        if e.resolution != self.model.resolution or e.kind != self.model.kind:
            raise ConfigError(f"evaluate model {e.name}: trained models must match model.kind "
                              f"and model.resolution")
        return Model(e.kind, self.spec(e.resolution, e.nonlinear_form),
                     self.stepper(e.resolution, e.filter), self.correction(), params or {})

    def to_dict(self) -> dict:
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [plain(v) for v in x]
            return x
        return plain(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


def parse_config(raw: dict, where: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be a mapping")
    raw = dict(raw)
    sections = {"data": DataSection, "model": ModelSection, "train": TrainSection,
                "evaluate": EvalSection}
    for key, cls in sections.items():
        if key in raw:
            raw[key] = _build(cls, raw[key], f"{where}: {key}")
    if "data" not in raw:
        raise ConfigError(f"{where}: missing required section 'data'")
    cfg = _build(RunConfig, raw, where)
    for split in (cfg.train.train_split, cfg.train.val_split, cfg.evaluate.split):
        if split not in cfg.data.splits:
            raise ConfigError(f"{where}: split {split!r} is not defined under data.splits")
    for n in [cfg.model.resolution, cfg.evaluate.resolution] + [m.resolution for m in cfg.evaluate.models]:
        if n not in cfg.data.target_resolutions:
            raise ConfigError(f"{where}: resolution {n} is not among data.target_resolutions")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        name = path.name if path.suffix else path.name + ".cfg"
        builtin = resources.files("spectral_hybrid") / "configs" / name
        if path.parent == Path(".") and builtin.is_file():
            text = builtin.read_text(encoding="utf-8")
        else:
            raise ConfigError(f"config file not found: {path}")
    else:
        text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return parse_config(raw, str(path))


def shipped_configs() -> list:
    return sorted(p.name for p in (resources.files("spectral_hybrid") / "configs").iterdir()
                  if p.name.endswith(".cfg"))


__all__ = ["ConfigError", "RunConfig", "DataSection", "ModelSection", "TrainSection",
           "EvalSection", "EvalModel", "SplitSection", "parse_config", "load_config",
           "shipped_configs"]
