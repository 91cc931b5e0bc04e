"""Run configuration: a plain-text ``section.key = value`` file plus command-line overrides.

Sections are ``corpus``, ``model``, ``train``, ``pipeline`` and ``degrade``;
``seed`` stands alone. Blank lines and ``#`` comments are ignored. Tuples are
comma-separated, ``none`` is the null value for optional numbers. Unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields

from .encoders import ModelConfig
from .errors import ConfigError
from .pipeline import PipelineConfig
from .synthcorpus import CorpusConfig, DegradationSpec
from .training import TrainConfig

SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "pipeline": PipelineConfig,
    "degrade": DegradationSpec,
}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    degrade: DegradationSpec = field(default_factory=DegradationSpec)
    seed: int = 0

    def items(self) -> list[tuple[str, str]]:
        out = [("seed", str(self.seed))]
        for name in SECTIONS:
            obj = getattr(self, name)
            for f in fields(obj):
                out.append((f"{name}.{f.name}", format_value(getattr(obj, f.name))))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        """New config with raw string values applied; every section is re-validated."""
        seed = self.seed
        updates: dict[str, dict[str, typing.Any]] = {s: {} for s in SECTIONS}
        for key, raw in pairs.items():
            if key == "seed":
                seed = _parse(raw, int, key)
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            types = _field_types(SECTIONS[section])
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            updates[section][name] = _parse(raw, types[name], key)
        kw = {s: dataclasses.replace(getattr(self, s), **updates[s]) for s in SECTIONS}
        return RunConfig(seed=seed, **kw)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse(raw: str, tp, key: str):
    raw = raw.strip()
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if origin is typing.Union or (args and type(None) in args and origin is not tuple):
            if raw.lower() == "none":
                return None
            return _parse(raw, next(a for a in args if a is not type(None)), key)
        if origin is tuple:
            return tuple(_parse(x, args[0], key) for x in raw.split(",") if x.strip())
        if tp is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except (ValueError, StopIteration) as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def parse_pairs(lines) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = cfg.with_overrides(parse_pairs(fh))
    if overrides:
        cfg = cfg.with_overrides(parse_pairs(overrides))
    return cfg
