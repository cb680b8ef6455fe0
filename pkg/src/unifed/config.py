"""Strict JSON experiment configuration.

Unknown keys are rejected and every missing required key is reported with
its dotted path.  ``resolve`` returns the configuration with all defaults
filled in; that document is what run directories store.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    N: int
    d: int
    M: int
    shift: str = "scale"
    severity: float = 3.0
    teacher: str = "linear-classification"
    noise_std: float = 0.0
    binary: bool = False
    split: list = field(default_factory=lambda: [0.8, 0.2])


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32, 32])
    bn: bool = True
    eps: float = 1e-5
    bn_momentum: float = 0.9          # running-stat momentum during training
    var_center: str = "running"


@dataclass
class FLConfig:
    T: int = 100
    strategy: str = "fedavg"
    exclude_bn: bool = True
    client_weights: list | None = None
    prox_mu: float = 0.01
    server_lr: float = 0.01
    betas: list = field(default_factory=lambda: [0.9, 0.99])
    adam_eps: float = 1e-3
    local_epochs: int = 1
    local_lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    loss: str = "cross-entropy"
    participation: float = 1.0
    reset_momentum: bool = True
    invariant_checks: bool = False
    checkpoints: str = "best_and_final"   # or "every"


@dataclass
class ExternalSpec:
    factor: float = 4.0               # covariance = factor * mean training covariance
    M: int = 4096
    seed_offset: int = 1000


@dataclass
class TestConfig:
    momentum: float = 0.9             # re-estimation momentum at test time
    batch_size: int = 32
    order_seed: int | None = None
    reset_stats: bool | None = None   # None: reset exactly when global BN was never aggregated
    var_center: str = "running"
    external: list = field(default_factory=lambda: [ExternalSpec()])
    batch_sizes: list = field(default_factory=lambda: [2, 4, 8, 16, 32, 64, 128, 256, 512])
    taus: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(10)])
    n_orders: int = 10


@dataclass
class NTKConfig:
    N: int = 3
    M: int = 4
    d: int = 8
    shift: str = "scale"
    severity: float = 2.0
    alpha: float = 1.0
    estimator: str = "closed-form"
    mc_samples: int = 1_000_000
    m: int = 2048
    steps: int = 200
    lr: float = 1.0


@dataclass
class AnalysisConfig:
    ntk: bool = False
    divergence: bool = False


@dataclass
class ExperimentConfig:
    format_version: int
    run_id: str
    seed: int
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    test: TestConfig = field(default_factory=TestConfig)
    ntk: NTKConfig = field(default_factory=NTKConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "fl"): FLConfig,
    (ExperimentConfig, "test"): TestConfig,
    (ExperimentConfig, "ntk"): NTKConfig,
    (ExperimentConfig, "analysis"): AnalysisConfig,
}
_LISTS = {(TestConfig, "external"): ExternalSpec}

_SCALAR_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,)}


def _check_type(value, annotation: str, path: str):
    base = annotation.replace(" | None", "")
    if value is None:
        if "None" in annotation:
            return value
        raise ConfigError(f"{path}: null is not allowed")
    if base in _SCALAR_TYPES:
        ok = _SCALAR_TYPES[base]
        if isinstance(value, bool) and base != "bool":
            raise ConfigError(f"{path}: expected {base}, got a boolean")
        if not isinstance(value, ok):
            raise ConfigError(f"{path}: expected {base}, got {type(value).__name__}")
        return float(value) if base == "float" else value
    if base == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return value
    return value


def _missing(cls, doc, path: str) -> list:
    """Dotted paths of every required key absent from ``doc``, at any depth."""
    if not isinstance(doc, dict):
        return []
    out = []
    for f in fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name not in doc:
            if f.default is MISSING and f.default_factory is MISSING:
                out.append(sub)
        elif (cls, f.name) in _NESTED:
            out += _missing(_NESTED[(cls, f.name)], doc[f.name], sub)
        elif (cls, f.name) in _LISTS and isinstance(doc[f.name], list):
            for k, v in enumerate(doc[f.name]):
                out += _missing(_LISTS[(cls, f.name)], v, f"{sub}[{k}]")
    return out


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    missing = []
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name not in doc:
            if f.default is MISSING and f.default_factory is MISSING:
                missing.append(sub)
            continue
        value = doc[name]
        if (cls, name) in _NESTED:
            kwargs[name] = _build(_NESTED[(cls, name)], value, sub)
        elif (cls, name) in _LISTS:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[name] = [_build(_LISTS[(cls, name)], v, f"{sub}[{k}]") for k, v in enumerate(value)]
        else:
            kwargs[name] = _check_type(value, str(f.type), sub)
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    return cls(**kwargs)


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if "format_version" not in doc:
        raise ConfigError("missing required key(s): format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ConfigError(f"format_version: unsupported value {doc['format_version']!r} (expected {FORMAT_VERSION})")
    missing = _missing(ExperimentConfig, doc, "")
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    cfg = _build(ExperimentConfig, doc, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)


def validate(cfg: ExperimentConfig) -> None:
    from .datagen import SHIFT_KINDS, TEACHER_KINDS
    from .fl import STRATEGIES

    checks = [
        (cfg.data.N >= 2, "data.N must be >= 2"),
        (cfg.data.d >= 2, "data.d must be >= 2"),
        (cfg.data.M >= 2, "data.M must be >= 2"),
        (cfg.data.shift in SHIFT_KINDS, f"data.shift must be one of {SHIFT_KINDS}"),
        (cfg.data.severity > 0, "data.severity must be > 0"),
        (cfg.data.teacher in TEACHER_KINDS, f"data.teacher must be one of {TEACHER_KINDS}"),
        (cfg.fl.strategy in STRATEGIES, f"fl.strategy must be one of {STRATEGIES}"),
        (cfg.fl.T >= 1, "fl.T must be >= 1"),
        (cfg.fl.loss in ("cross-entropy", "squared"), "fl.loss must be cross-entropy or squared"),
        (cfg.fl.checkpoints in ("best_and_final", "every"), "fl.checkpoints must be best_and_final or every"),
        (0.0 <= cfg.test.momentum < 1.0, "test.momentum must be in [0, 1)"),
        (cfg.test.batch_size >= 1, "test.batch_size must be >= 1"),
        (cfg.ntk.estimator in ("closed-form", "monte-carlo"), "ntk.estimator must be closed-form or monte-carlo"),
        (all(int(h) >= 1 for h in cfg.model.hidden), "model.hidden sizes must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    classification = cfg.data.teacher == "linear-classification" or cfg.data.binary
    if classification != (cfg.fl.loss == "cross-entropy"):
        raise ConfigError("fl.loss must be cross-entropy exactly when labels are binary")


def resolve(doc_or_cfg) -> dict:
    cfg = doc_or_cfg if isinstance(doc_or_cfg, ExperimentConfig) else parse_config(doc_or_cfg)
    return cfg.to_dict()
