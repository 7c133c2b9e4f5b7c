"""Run configuration: profiles, INI/JSON files, overrides, provenance echo."""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .data import SplitSpec
from .distill import KAPPA, T_MIN, KDLossConfig
from .errors import ValidationError
from .train import TrainConfig

PROFILES = ("desk", "paper")


@dataclass
class DataSection:
    n_per_class: int = 300
    image_size: int = 64
    seed: int = 42
    train_fraction: float = 0.70
    val_fraction: float = 0.20
    split_seed: int = 42


@dataclass
class ModelSection:
    width: float = 0.75
    dropout_rate: float = 0.1


@dataclass
class KDSection:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 1e-5
    t_init: float | None = None
    t_min: float = T_MIN
    kappa: float = KAPPA
    tau_fixed: float = 4.0


@dataclass
class AugmentSection:
    p_trigger: float = 0.5
    alpha_mixup: float = 0.2
    alpha_cutmix: float = 1.0


@dataclass
class TrainSection:
    seed: int = 42
    teacher_epochs: int = 15
    teacher_batch_size: int = 16
    teacher_lr: float = 1e-3
    teacher_weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    student_epochs: int = 30
    student_batch_size: int = 32
    student_lr: float = 2e-3
    student_weight_decay: float = 0.0
    T_0: int = 10
    T_mult: int = 2
    eta_min: float | None = None
    grad_clip: float = 5.0


@dataclass
class BenchSection:
    n_warmup: int = 10
    n_runs: int = 30
    batch_throughput_size: int = 32


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "kd": KDSection,
    "augment": AugmentSection,
    "train": TrainSection,
    "bench": BenchSection,
}

PROFILE_OVERRIDES = {
    "desk": {},
    "paper": {
        "data": {"image_size": 224},
        "train": {"teacher_epochs": 30, "student_epochs": 80},
    },
}


@dataclass
class RunConfig:
    profile: str = "desk"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    kd: KDSection = field(default_factory=KDSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @classmethod
    def for_profile(cls, profile: str = "desk") -> "RunConfig":
        if profile not in PROFILES:
            raise ValidationError(f"unknown profile {profile!r}; choose from {PROFILES}")
        cfg = cls(profile=profile)
        return cfg.merged(PROFILE_OVERRIDES[profile])

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with ``{section: {key: value}}`` applied; unknown names are rejected."""
        out = replace(self)
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise ValidationError(f"unknown config section [{section}]")
            current = getattr(out, section)
            known = {f.name: f for f in fields(current)}
            changes = {}
            for key, raw in values.items():
                if key not in known:
                    raise ValidationError(f"unknown config key {section}.{key}")
                changes[key] = _coerce(raw, getattr(SECTIONS[section](), key), f"{section}.{key}")
            setattr(out, section, replace(current, **changes))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    # views consumed by the training entry points

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.data.train_fraction, self.data.val_fraction, self.data.split_seed)

    def teacher_train(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.teacher_epochs, batch_size=t.teacher_batch_size, lr=t.teacher_lr,
            weight_decay=t.teacher_weight_decay, label_smoothing=t.label_smoothing, seed=t.seed,
            T_0=t.T_0, T_mult=t.T_mult, eta_min=t.eta_min, grad_clip=t.grad_clip,
        )

    def student_train(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.student_epochs, batch_size=t.student_batch_size, lr=t.student_lr,
            weight_decay=t.student_weight_decay, seed=t.seed,
            T_0=t.T_0, T_mult=t.T_mult, eta_min=t.eta_min, grad_clip=t.grad_clip,
        )

    def kd_loss(self) -> KDLossConfig:
        return KDLossConfig(self.kd.alpha, self.kd.beta, self.kd.gamma)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.augment.p_trigger, self.augment.alpha_mixup, self.augment.alpha_cutmix)


def _coerce(raw, default, name: str):
    if raw is None:
        return None
    if isinstance(raw, str) and raw.strip().lower() in ("", "none", "null"):
        return None
    kind = type(default) if default is not None else float
    try:
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError("not an integer")
            return int(raw)
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def _read_file(path: Path) -> tuple[str | None, dict]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        profile = raw.pop("profile", None)
        for section, values in raw.items():
            if not isinstance(values, dict):
                raise ValidationError(f"{path}: section {section!r} must be an object")
        return profile, raw
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep T_0 / T_mult case
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    sections = {name: dict(parser[name]) for name in parser.sections()}
    profile = None
    if "run" in sections:
        run = sections.pop("run")
        profile = run.pop("profile", None)
        if run:
            raise ValidationError(f"unknown config key run.{next(iter(run))}")
    return profile, sections


def load_config(path: str | Path | None = None, profile: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < profile < config file < flag overrides."""
    file_profile, file_values = (None, {}) if path is None else _read_file(Path(path))
    cfg = RunConfig.for_profile(profile or file_profile or "desk")
    cfg = cfg.merged(file_values)
    if overrides:
        cfg = cfg.merged({s: {k: v for k, v in kv.items() if v is not None} for s, kv in overrides.items()})
    return cfg


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved-config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
