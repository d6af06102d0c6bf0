"""Versioned JSON run configuration.

Every section maps onto a frozen dataclass; unknown keys, wrong types and
out-of-range values raise :class:`~resinv.errors.ConfigError` naming the
dotted field path (and the line/column for malformed JSON). A run manifest
embeds the full config under ``"config"`` and can be fed back in as-is.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .bimd import BimdConfig
from .denoiser import DenoiserConfig, DenoiserParams, load_weights, save_weights, train
from .errors import ConfigError, ResinvError
from .glyphs import make_dataset
from .inversion import METHODS, NTI_EARLY_STOP, NTI_INNER_ITERS, NTI_LR
from .schedule import NoiseSchedule, default_schedule, make_linear_schedule

CONFIG_VERSION = 1
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float | None = None  # None: rescaled DDPM range for this T
    beta_end: float | None = None

    def build(self) -> NoiseSchedule:
        if self.beta_start is None and self.beta_end is None:
            return default_schedule(self.T)
        if self.beta_start is None or self.beta_end is None:
            raise ConfigError("set both beta_start and beta_end or neither", field="schedule")
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainConfig:
    samples: int = 8192
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 128
    data_seed: int = 1
    narrow_fraction: float = 0.0
    control_prob: float = 0.0


@dataclass(frozen=True)
class ModelSection:
    model: DenoiserConfig
    train: TrainConfig


@dataclass(frozen=True)
class InversionConfig:
    guidance: float = 3.0
    inner_iters: int = NTI_INNER_ITERS
    lr: float = NTI_LR
    early_stop_eps: float = NTI_EARLY_STOP
    methods: tuple[str, ...] = METHODS
    repeats: int = 5
    inner_sweep: tuple[int, ...] = (1, 5, 10, 25)


@dataclass(frozen=True)
class PipelineConfig:
    guidance: float = 1.0
    seeds: tuple[int, ...] = tuple(range(20))


@dataclass(frozen=True)
class FusionConfig:
    mss_sweep: tuple[int, ...] = (0, 12, 25, 37, 50)
    seeds: tuple[int, ...] = tuple(range(10))


def _base_section() -> ModelSection:
    return ModelSection(DenoiserConfig(kind="base"),
                        TrainConfig(data_seed=2, control_prob=0.3))


def _personalized_section() -> ModelSection:
    return ModelSection(DenoiserConfig(kind="personalized"),
                        TrainConfig(data_seed=1, narrow_fraction=0.7))


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    schedule: ScheduleConfig = ScheduleConfig()
    base: ModelSection = field(default_factory=_base_section)
    personalized: ModelSection = field(default_factory=_personalized_section)
    inversion: InversionConfig = InversionConfig()
    bimd: BimdConfig = BimdConfig()
    pipeline: PipelineConfig = PipelineConfig()
    fusion: FusionConfig = FusionConfig()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def section(self, kind: str) -> ModelSection:
        if kind not in ("base", "personalized"):
            raise ConfigError(f"unknown model kind {kind!r}", field="kind")
        return getattr(self, kind)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, annotation: str, path: str):
    """Check a JSON value against the (string) annotation of a dataclass field."""
    ann = annotation.replace(" ", "")
    optional = ann.endswith("|None")
    if optional:
        if value is None:
            return None
        ann = ann[: -len("|None")]
    if ann.startswith("tuple["):
        if not isinstance(value, list):
            raise ConfigError("expected a list", field=path)
        inner = ann[len("tuple["):-1].split(",")[0]
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    raise ConfigError(f"unsupported field type {annotation}", field=path)


_SECTIONS: dict[str, type] = {
    "ScheduleConfig": ScheduleConfig, "TrainConfig": TrainConfig, "ModelSection": ModelSection,
    "InversionConfig": InversionConfig, "BimdConfig": BimdConfig,
    "PipelineConfig": PipelineConfig, "FusionConfig": FusionConfig,
    "DenoiserConfig": DenoiserConfig,
}


def _build(cls, doc, path: str, default=None):
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", field=path or "<root>")
    names = {f.name: f for f in fields(cls)}
    extra = sorted(set(doc) - set(names))
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise ConfigError(f"unknown key (allowed: {sorted(names)})", field=where)
    kw: dict[str, Any] = {}
    for name, f in names.items():
        sub = f"{path}.{name}" if path else name
        current = getattr(default, name) if default is not None else None
        if name not in doc:
            if current is not None or default is not None:
                kw[name] = current
            continue
        ann = f.type if isinstance(f.type, str) else f.type.__name__
        nested = _SECTIONS.get(ann)
        if nested is not None:
            kw[name] = _build(nested, doc[name], sub, current)
        else:
            kw[name] = _coerce(doc[name], ann, sub)
    try:
        return cls(**kw)
    except ConfigError as exc:
        if exc.field and path and not exc.field.startswith(path):
            raise ConfigError(str(exc).split("] ", 1)[-1], field=f"{path}.{exc.field}") from None
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=path or "<root>") from None


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno, column=exc.colno) from None
    if isinstance(doc, dict) and "config" in doc and "command" in doc:
        doc = doc["config"]  # a run manifest
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})",
                          field="version")
    cfg = _build(RunConfig, doc, "", RunConfig())
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.schedule.build()
    except ConfigError:
        raise
    except ResinvError as exc:
        raise ConfigError(str(exc), field="schedule") from None
    T = cfg.schedule.T
    if cfg.bimd.mss > T:
        raise ConfigError(f"mss {cfg.bimd.mss} exceeds T={T}", field="bimd.mss")
    for i, m in enumerate(cfg.fusion.mss_sweep):
        if not 0 <= m <= T:
            raise ConfigError(f"mss {m} outside [0, {T}]", field=f"fusion.mss_sweep[{i}]")
    for i, m in enumerate(cfg.inversion.methods):
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", field=f"inversion.methods[{i}]")
    if cfg.inversion.repeats < 3:
        raise ConfigError("timing needs at least 3 repeats", field="inversion.repeats")
    if cfg.inversion.inner_iters < 1:
        raise ConfigError("must be >= 1", field="inversion.inner_iters")
    for kind in ("base", "personalized"):
        sec = cfg.section(kind)
        if sec.model.kind != kind:
            raise ConfigError(f"model kind must be {kind!r}", field=f"{kind}.model.kind")
        tr = sec.train
        if tr.samples < 1 or tr.epochs < 1 or tr.batch_size < 1:
            raise ConfigError("samples, epochs and batch_size must be positive", field=f"{kind}.train")
        if not 0.0 <= tr.narrow_fraction <= 1.0 or not 0.0 <= tr.control_prob <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]", field=f"{kind}.train")


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", field=str(path)) from None
    return parse_config(text)


# -- models from config -------------------------------------------------------

def section_digest(cfg: RunConfig, kind: str) -> str:
    """Hash of everything that determines the trained weights of ``kind``."""
    doc = {"section": _plain(asdict(cfg.section(kind))), "schedule": _plain(asdict(cfg.schedule)),
           "seed": cfg.seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def train_model(cfg: RunConfig, kind: str, on_epoch=None):
    sec = cfg.section(kind)
    tr = sec.train
    data = make_dataset(tr.samples, tr.data_seed, narrow_fraction=tr.narrow_fraction,
                        control_prob=tr.control_prob)
    return train(sec.model, data, epochs=tr.epochs, lr=tr.lr, seed=cfg.seed,
                 batch_size=tr.batch_size, schedule=cfg.schedule.build(), on_epoch=on_epoch)


def _cache_path(cfg: RunConfig, kind: str, cache_dir) -> Path:
    return Path(cache_dir) / f"{kind}-{section_digest(cfg, kind)[:16]}.rinv"


def cached_model(cfg: RunConfig, kind: str, cache_dir) -> DenoiserParams:
    """Load ``kind`` from ``cache_dir`` if trained before under the same settings.

    A fresh training run also leaves its per-epoch losses next to the weights
    (see :func:`cached_losses`).
    """
    path = _cache_path(cfg, kind, cache_dir)
    if path.exists():
        return load_weights(path)
    log.info("training %s model (cache miss: %s)", kind, path.name)
    result = train_model(cfg, kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".loss.json").write_text(json.dumps(result.epoch_losses))
    tmp = path.with_suffix(".tmp")
    save_weights(result.params, tmp)
    tmp.replace(path)
    return result.params


def cached_losses(cfg: RunConfig, kind: str, cache_dir) -> list[float] | None:
    """Per-epoch training losses recorded by :func:`cached_model`, if any."""
    path = _cache_path(cfg, kind, cache_dir).with_suffix(".loss.json")
    return json.loads(path.read_text()) if path.exists() else None
