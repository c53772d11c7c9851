"""Run configuration: flat ``section.key = value`` files plus overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticConfig
from .model import ModelConfig
from .training import CONTRASTIVE_OPS, STRATEGIES, TASKS, PretextConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str] | str):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class DataSection:
    train: str = ""
    test: str = ""
    source: str = ""
    length: int = 0  # 0 keeps the stored length
    center: bool = False
    test_per_class: int = 0
    split_seed: int = 0
    labeled_fraction: float = 0.1


@dataclass
class SyntheticSection:
    num_classes: int = 10
    sequences_per_class: int = 50
    T: int = 200
    J: int = 25
    noise_std: float = 0.05
    seed: int = 0
    phase_jitter: float = 0.0
    amplitude_jitter: float = 0.0
    harmonics: int = 1
    source_seed: int = 1


@dataclass
class ModelSection:
    hidden: int = 30
    segments: int = 3
    t_prime: int = 50
    noise_std: float = 0.02
    num_classes: int = 0  # 0 takes the dataset's class count
    jigsaw_variant: str = "temporal"
    prediction_variant: str = "temporal"
    mask_fraction: float = 0.3
    contrastive_ops: str = "temporal_mask,temporal_jigsaw"
    body_parts: str = ""  # "0,1;2,3;4;5;6,7"
    temperature: float = 1.0


@dataclass
class TrainSection:
    strategy: str = "jointly"
    epochs: int = 30
    pretrain_epochs: int = 30
    moving_epochs: int = 10
    omega: float = 1.0
    batch: int = 32
    seed: int | None = None
    base_lr: float = 0.01
    floor_lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 100
    tasks: str = "prediction,jigsaw,contrastive"
    track_self: bool = False
    probe_epochs: int = 50


@dataclass
class SweepSection:
    subsets: str = "all"  # or "prediction;jigsaw+contrastive"


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ------------------------------------------------------------------
    # derived objects

    def synthetic_config(self, seed: int | None = None) -> SyntheticConfig:
        s = self.synthetic
        return SyntheticConfig(
            s.num_classes, s.sequences_per_class, s.T, s.J, s.noise_std,
            s.seed if seed is None else seed, s.phase_jitter, s.amplitude_jitter, s.harmonics,
        )

    def model_config(self, joints: int, num_classes: int) -> ModelConfig:
        m = self.model
        return ModelConfig(joints, m.hidden, m.num_classes or num_classes, m.segments, m.jigsaw_variant)

    def pretext_config(self) -> PretextConfig:
        m = self.model
        parts = None
        if m.body_parts:
            parts = tuple(tuple(int(j) for j in grp.split(",") if j.strip()) for grp in m.body_parts.split(";"))
        return PretextConfig(
            m.t_prime, m.noise_std, m.prediction_variant, m.mask_fraction,
            _csv(m.contrastive_ops), parts, m.temperature,
        )

    def train_config(self, pretraining: bool = False) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.pretrain_epochs if pretraining else t.epochs,
            batch_size=t.batch,
            base_lr=t.base_lr,
            floor_lr=t.floor_lr,
            decay=t.decay,
            decay_every=t.decay_every,
            moving_epochs=t.moving_epochs,
            omega=t.omega,
            tasks=_csv(t.tasks),
            track_self=t.track_self,
        )

    def subsets(self) -> list[tuple[str, ...]]:
        if self.sweep.subsets.strip() == "all":
            from .evaluation import all_task_subsets

            return all_task_subsets()
        return [tuple(x for x in grp.split("+") if x) for grp in self.sweep.subsets.split(";") if grp.strip()]

    # ------------------------------------------------------------------

    def validate(self, need_seed: bool = False) -> None:
        errs = []
        s = self.synthetic
        for name in ("num_classes", "sequences_per_class", "T", "J", "harmonics"):
            if getattr(s, name) < 1:
                errs.append(f"synthetic.{name} must be >= 1")
        if s.noise_std < 0:
            errs.append("synthetic.noise_std must be >= 0")
        m = self.model
        if m.hidden < 1:
            errs.append("model.hidden must be >= 1")
        if not 1 <= m.segments <= 6:
            errs.append("model.segments must be in [1, 6]")
        if m.t_prime < 1:
            errs.append("model.t_prime must be >= 1")
        if m.noise_std < 0:
            errs.append("model.noise_std must be >= 0")
        if m.num_classes < 0:
            errs.append("model.num_classes must be >= 0")
        if m.jigsaw_variant not in ("temporal", "spatial"):
            errs.append("model.jigsaw_variant must be temporal or spatial")
        if m.prediction_variant not in ("temporal", "spatial"):
            errs.append("model.prediction_variant must be temporal or spatial")
        if not 0 < m.mask_fraction < 1:
            errs.append("model.mask_fraction must be in (0, 1)")
        bad_ops = set(_csv(m.contrastive_ops)) - set(CONTRASTIVE_OPS)
        if bad_ops or not _csv(m.contrastive_ops):
            errs.append(f"model.contrastive_ops must list operators from {', '.join(CONTRASTIVE_OPS)}")
        if m.body_parts:
            try:
                self.pretext_config()
            except ValueError:
                errs.append("model.body_parts must look like '0,1;2,3;4;5;6,7'")
        if m.temperature <= 0:
            errs.append("model.temperature must be > 0")
        t = self.train
        if t.strategy not in STRATEGIES:
            errs.append(f"train.strategy must be one of {', '.join(STRATEGIES)}")
        for name in ("epochs", "pretrain_epochs", "batch", "decay_every", "probe_epochs"):
            if getattr(t, name) < 1:
                errs.append(f"train.{name} must be >= 1")
        if t.moving_epochs < 0:
            errs.append("train.moving_epochs must be >= 0")
        if t.omega < 0:
            errs.append("train.omega must be >= 0")
        if t.base_lr <= 0 or t.floor_lr <= 0 or t.floor_lr > t.base_lr:
            errs.append("train learning rates must satisfy 0 < floor_lr <= base_lr")
        if not 0 < t.decay <= 1:
            errs.append("train.decay must be in (0, 1]")
        unknown = set(_csv(t.tasks)) - set(TASKS)
        if unknown:
            errs.append(f"train.tasks has unknown tasks {sorted(unknown)}")
        if need_seed and t.seed is None:
            errs.append("train.seed is required for training commands")
        d = self.data
        if not 0 < d.labeled_fraction <= 1:
            errs.append("data.labeled_fraction must be in (0, 1]")
        if d.length < 0 or d.test_per_class < 0:
            errs.append("data.length and data.test_per_class must be >= 0")
        try:
            self.subsets()
        except ValueError:
            errs.append("sweep.subsets is malformed")
        if errs:
            raise ConfigError(errs)


def _csv(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    if typ in ("int | None", typing.Optional[int]):
        if raw.lower() in ("", "none"):
            return None
        typ = int
    if typ in (bool, "bool"):
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    if key.count(".") != 1:
        raise ConfigError(f"config key {key!r} must look like section.key")
    section, name = key.split(".")
    sec = getattr(cfg, section, None) if section in {f.name for f in dataclasses.fields(cfg)} else None
    if sec is None:
        raise ConfigError(f"unknown config section {section!r}")
    types = {f.name: f.type for f in dataclasses.fields(sec)}
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(sec, name, _coerce(raw, types[name], key))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from exc


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    errs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errs.append(f"{source}:{n}: expected 'section.key = value'")
            continue
        key, raw = (p.strip() for p in line.split("=", 1))
        try:
            set_value(cfg, key, raw)
        except ConfigError as exc:
            errs.extend(f"{source}:{n}: {e}" for e in exc.errors)
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config_text(text, str(path))
    else:
        cfg = RunConfig()
    errs = []
    for item in overrides:
        if "=" not in item:
            errs.append(f"override {item!r} must look like section.key=value")
            continue
        key, raw = item.split("=", 1)
        try:
            set_value(cfg, key.strip(), raw)
        except ConfigError as exc:
            errs.extend(exc.errors)
    if errs:
        raise ConfigError(errs)
    return cfg


def dumps_config(cfg: RunConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{sec.name}.{f.name} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"
