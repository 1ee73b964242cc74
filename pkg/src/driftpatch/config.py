"""Declarative experiment configuration (TOML).

Every section maps onto a frozen dataclass.  Unknown keys are rejected and
all defaults are materialized, so ``dumps(load(text))`` is a complete echo of
what a run used and re-parses to an equal config.
"""
from __future__ import annotations

import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .adaptation import (MODEL_IDS, AdaptationError, OptimizerConfig, PatchConfig, parse_model_id)
from .evaluation import RECOVERY_MODES, STANDARD_ARCHITECTURES, parse_arch, EvaluationError
from .streams import (PRESETS, Appear, Flip, Remap, Reoccur, Rotate, ScenarioError, ScenarioSpec,
                      Transfer, preset)

DATA_ENV = "DRIFTPATCH_DATA"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = ""


@dataclass(frozen=True)
class ScenarioConfig:
    """A preset name with optional size overrides, or a fully custom scenario.

    Custom scenarios set ``kind`` plus the fields that kind needs; change
    points and ramps are stream positions (instance indices).
    """
    name: str
    preset: str = ""
    kind: str = ""
    init: int = 0
    total: int = 0
    chunks: int = 0
    change_points: list = field(default_factory=list)
    ramp_start: int = 0
    ramp_end: int = 0
    max_degrees: float = 180.0
    initial_classes: list = field(default_factory=list)
    label_map: list = field(default_factory=list)
    first_classes: list = field(default_factory=list)
    second_classes: list = field(default_factory=list)

    def to_spec(self, seed: int) -> ScenarioSpec:
        try:
            if self.preset:
                base = preset(self.preset, seed)
                if self.kind:
                    raise ConfigError(f"scenario {self.name}: give either preset or kind, not both")
                return replace(base, name=self.name, init_count=self.init or base.init_count,
                               total=self.total or base.total, chunks=self.chunks or base.chunks)
            cps = [int(c) for c in self.change_points]
            drift = {
                "flip": lambda: Flip(cps[0]),
                "rotate": lambda: Rotate(self.ramp_start, self.ramp_end, self.max_degrees),
                "appear": lambda: Appear(tuple(self.initial_classes), cps[0]),
                "remap": lambda: Remap(tuple((int(a), int(b)) for a, b in self.label_map), cps[0]),
                "transfer": lambda: Transfer(tuple(self.first_classes), tuple(self.second_classes), cps[0]),
                "reoccur": lambda: Reoccur(cps[0], cps[1]),
            }
            if self.kind not in drift:
                raise ConfigError(f"scenario {self.name}: unknown kind {self.kind!r}")
            return ScenarioSpec(self.name, drift[self.kind](), self.init, self.total, self.chunks, seed)
        except IndexError:
            raise ConfigError(f"scenario {self.name}: missing change_points") from None
        except ScenarioError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class BaseConfig:
    arch: str = "fcnn"
    epochs: int = 10
    minibatch: int = 64
    stagnation_window: int = 0
    stagnation_tol: float = 1e-3
    max_retries: int = 3
    train_on: str = "init"


@dataclass(frozen=True)
class PatchSection:
    engagement_layer: str = "auto"
    tap_point: str = "post"
    hidden: list = field(default_factory=lambda: [512])
    dropout_in: float = 0.25
    dropout_hidden: float = 0.5
    init: str = "random_glorot"
    epochs_per_chunk: int = 1
    minibatch: int = 64
    threshold: float = 0.5
    estimator_first: bool = True
    freezing_tail: str = "transfer"


@dataclass(frozen=True)
class RunConfig:
    models: list = field(default_factory=lambda: ["baseline", "incl_noEE"])
    seeds: list = field(default_factory=lambda: [0])
    master_seed: int = 0
    out: str = "results"
    recovery_mode: str = "final"
    jobs: int = 1


@dataclass(frozen=True)
class SweepConfig:
    kind: str = "layers"
    taps: list = field(default_factory=lambda: ["pre", "post"])
    layers: list = field(default_factory=list)
    architectures: list = field(default_factory=lambda: list(STANDARD_ARCHITECTURES))


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: list
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    patch: PatchSection = field(default_factory=PatchSection)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def patch_config(self) -> PatchConfig:
        p = self.patch
        layer = p.engagement_layer
        if isinstance(layer, str) and layer.lstrip("-").isdigit():
            layer = int(layer)
        return PatchConfig(engagement_layer=layer, tap_point=p.tap_point, hidden=tuple(int(w) for w in p.hidden),
                           dropout_in=p.dropout_in, dropout_hidden=p.dropout_hidden, init=p.init,
                           epochs_per_chunk=p.epochs_per_chunk, minibatch=p.minibatch, threshold=p.threshold,
                           estimator_first=p.estimator_first, optimizer=self.optimizer)

    def data_root(self) -> Path:
        root = os.environ.get(DATA_ENV) or self.data.root
        if not root:
            raise ConfigError(f"no dataset root: set [data] root or {DATA_ENV}")
        return Path(root)


_SECTIONS = {"data": DataConfig, "base": BaseConfig, "optimizer": OptimizerConfig,
             "patch": PatchSection, "run": RunConfig, "sweep": SweepConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    missing = [n for n, f in known.items()
               if n not in raw and f.default is MISSING and f.default_factory is MISSING]
    if missing:
        raise ConfigError(f"[{where}] missing required keys: {', '.join(missing)}")
    out = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default if f.default is not MISSING else (f.default_factory() if f.default_factory is not MISSING else None)
        out[name] = _coerce(value, default, f"{where}.{name}")
    return cls(**out)


def _coerce(value, default, where):
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, (str, int)) and not isinstance(value, bool):
        return str(value)
    if isinstance(default, list) and isinstance(value, list):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    allowed = set(_SECTIONS) | {"scenarios"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    scen_raw = raw.pop("scenarios", None)
    if not scen_raw or not isinstance(scen_raw, list):
        raise ConfigError("at least one [[scenarios]] entry is required")
    scenarios = [_build(ScenarioConfig, s, f"scenarios[{i}]") for i, s in enumerate(scen_raw)]
    sections = {k: _build(cls, raw.get(k, {}), k) for k, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(scenarios=scenarios, **sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    names = [s.name for s in cfg.scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")
    for s in cfg.scenarios:
        if s.preset and s.preset not in PRESETS:
            raise ConfigError(f"scenario {s.name}: unknown preset {s.preset!r}")
        s.to_spec(0)
    if not cfg.run.models:
        raise ConfigError("[run] models must list at least one model")
    if not cfg.run.seeds:
        raise ConfigError("[run] seeds must list at least one seed")
    if len(set(cfg.run.models)) != len(cfg.run.models):
        raise ConfigError("[run] models contains duplicates")
    try:
        for m in cfg.run.models:
            parse_model_id(m)
        cfg.patch_config()
    except AdaptationError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.run.recovery_mode not in RECOVERY_MODES:
        raise ConfigError("[run] recovery_mode must be final or predrift")
    if cfg.run.jobs < 1:
        raise ConfigError("[run] jobs must be >= 1")
    if cfg.base.arch not in ("fcnn", "cnn"):
        raise ConfigError("[base] arch must be fcnn or cnn")
    if cfg.base.train_on not in ("init", "mnist_train"):
        raise ConfigError("[base] train_on must be init or mnist_train")
    if cfg.optimizer.kind not in ("adam", "sgd"):
        raise ConfigError("[optimizer] kind must be adam or sgd")
    if cfg.patch.freezing_tail not in ("transfer", "random"):
        raise ConfigError("[patch] freezing_tail must be transfer or random")
    if cfg.sweep.kind not in ("layers", "arch"):
        raise ConfigError("[sweep] kind must be layers or arch")
    if cfg.sweep.kind == "arch" and not cfg.sweep.architectures:
        raise ConfigError("[sweep] architectures is empty")
    try:
        for a in cfg.sweep.architectures:
            parse_arch(a)
    except EvaluationError as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    return {"scenarios": d.pop("scenarios"), **d}


def dumps(cfg: ExperimentConfig) -> str:
    """Effective config with every default spelled out."""
    return tomli_w.dumps(to_dict(cfg))


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, out: str | None = None,
                   jobs: int | None = None, recovery_mode: str | None = None) -> ExperimentConfig:
    run = cfg.run
    if seed is not None:
        run = replace(run, seeds=[seed])
    if out is not None:
        run = replace(run, out=str(out))
    if jobs is not None:
        run = replace(run, jobs=jobs)
    if recovery_mode is not None:
        run = replace(run, recovery_mode=recovery_mode)
    cfg = replace(cfg, run=run)
    validate(cfg)
    return cfg


__all__ = ["ConfigError", "ExperimentConfig", "load", "loads", "dumps", "from_dict", "to_dict",
           "with_overrides", "DATA_ENV", "MODEL_IDS"]
