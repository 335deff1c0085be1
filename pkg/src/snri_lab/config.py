"""The run configuration: one versioned JSON document holding every module's settings.

Unknown keys and version mismatches are rejected, so a typo never silently
falls back to a default.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio import NOISE_KINDS, SAMPLE_RATE
from .errors import ConfigError, InvalidParams, IoError
from .models import BackendConfig, PredNetConfig, SnriNetConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1


@dataclass
class CorpusConfig:
    n_per_class: int = 20
    n_noise_per_kind: int = 20
    seed: int = 1
    duration_s: float = 1.0
    n_classes: int = 10
    sample_rate: int = SAMPLE_RATE
    prefix: str = ""

    def __post_init__(self):
        if self.n_per_class < 1 or self.n_noise_per_kind < 1:
            raise InvalidParams("corpus needs at least one item per class and noise kind")


@dataclass
class EvalConfig:
    targets: list[float] = field(default_factory=lambda: [3.0, 6.0, 9.0, 12.0])
    input_snrs: list[float] = field(default_factory=lambda: [-5.0, 5.0])
    noise_kinds: list[str] = field(default_factory=lambda: list(NOISE_KINDS))
    n_utterances: int = 24
    mix_snr_min: float = -5.0
    mix_snr_max: float = 20.0
    seed: int = 7
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(
        n_per_class=3, n_noise_per_kind=6, seed=99, prefix="test_"))

    def __post_init__(self):
        if self.n_utterances < 1:
            raise InvalidParams("n_utterances must be >= 1")
        bad = [k for k in self.noise_kinds if k not in NOISE_KINDS]
        if bad:
            raise InvalidParams(f"unknown noise kinds {bad}")


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    run_id: str = "run"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    snri_net: SnriNetConfig = field(default_factory=SnriNetConfig)
    pred_net: PredNetConfig = field(default_factory=PredNetConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}, expected {CONFIG_VERSION}")
        return _build(cls, doc, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(str(exc)) from exc
        return cls.from_json(text)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


_NESTED = {
    (RunConfig, "corpus"): CorpusConfig,
    (RunConfig, "snri_net"): SnriNetConfig,
    (RunConfig, "pred_net"): PredNetConfig,
    (RunConfig, "backend"): BackendConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (EvalConfig, "corpus"): CorpusConfig,
}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub else value
    try:
        return cls(**kwargs)
    except (InvalidParams, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc
