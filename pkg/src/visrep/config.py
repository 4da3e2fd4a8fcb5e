"""Run configuration: a typed, sectioned key=value file format.

The format is deliberately plain: `[section]` headers, one `key = value`
per line, `#` comments. Every known key belongs to a dataclass field and
parses by that field's annotation; unknown sections or keys are rejected
with their full field path so typos never pass silently. Writing is
canonical (fixed section and field order, round-trippable value forms),
so a config can be rewritten byte-for-byte and compared.

One master seed fans out through labeled hashing into independent
sub-seeds (init, sampler, data), so adding a consumer never perturbs the
streams of existing ones.
"""

from __future__ import annotations

import hashlib
import os
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .arch import ArchSpec
from .errors import ConfigError
from .train import TrainPlan

SEED_ENV_VAR = "VISREP_SEED"

__all__ = [
    "ModelConfig",
    "DataConfig",
    "EvalConfig",
    "RunConfig",
    "parse_config",
    "write_config",
    "load_config",
    "save_config",
    "derive_seed",
    "SEED_ENV_VAR",
]


@dataclass
class ModelConfig:
    family: str = "convnet"
    input_h: int = 32
    input_w: int = 32
    depth_per_stage: list[int] = field(default_factory=lambda: [1, 1])
    width_per_stage: list[int] = field(default_factory=lambda: [8, 16])
    stages: int = 2
    heads: int = 1
    patch_size: int = 16
    downsamples: int | None = None
    vit_pooling: str = "mean"
    embed_dim: int = 64
    head_style: str = "conv_pool"
    normalize: bool = True

    def to_arch_spec(self) -> ArchSpec:
        return ArchSpec(
            family=self.family,
            input_size=(self.input_h, self.input_w, 3),
            depth_per_stage=list(self.depth_per_stage),
            width_per_stage=list(self.width_per_stage),
            stages=self.stages,
            heads=self.heads,
            patch_size=self.patch_size,
            downsamples=self.downsamples,
            vit_pooling=self.vit_pooling,
        )


@dataclass
class DataConfig:
    manifests: list[str] = field(default_factory=list)
    synthetic: bool = True
    n_listings: int = 60
    image_size: int = 32
    queries_per_listing: int = 1


@dataclass
class EvalConfig:
    retrieval: list[str] = field(default_factory=list)
    ks: list[int] = field(default_factory=lambda: [5, 10])


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "run_out"


# keys owned by the enclosing run, not a subsection dataclass
_RUN_KEYS = ("seed", "output_dir")
_SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "train": TrainPlan,
    "data": DataConfig,
    "eval": EvalConfig,
}
# derived fields that never appear in the file
_HIDDEN = {"train": {"seed"}}


def derive_seed(master: int, label: str) -> int:
    """Stable labeled split of one master seed into an independent stream."""
    digest = hashlib.sha256(f"{master}:{label}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


def _parse_value(raw: str, kind, path: str):
    origin = typing.get_origin(kind)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if raw.strip().lower() == "none":
            return None
        return _parse_value(raw, args[0], path)
    if origin is list:
        (inner,) = typing.get_args(kind)
        raw = raw.strip()
        if not raw:
            return []
        return [_parse_value(part.strip(), inner, path) for part in raw.split(",")]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {raw!r} as {kind.__name__}")
    raise ConfigError(f"{path}: unsupported field type {kind!r}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    sections: dict[str, dict[str, str]] = {"run": {}}
    current = "run"
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current != "run" and current not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section '{current}'")
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key '{current}.{key}'")
        sections[current][key] = raw

    run_raw = sections.pop("run")
    for key in run_raw:
        if key not in _RUN_KEYS:
            raise ConfigError(f"run.{key}: unknown key")
    kwargs = {}
    if "seed" in run_raw:
        kwargs["seed"] = _parse_value(run_raw["seed"], int, "run.seed")
    if "output_dir" in run_raw:
        kwargs["output_dir"] = _parse_value(run_raw["output_dir"], str, "run.output_dir")

    for name, cls in _SECTIONS.items():
        raw = sections.get(name, {})
        hints = typing.get_type_hints(cls)
        allowed = {
            f.name for f in fields(cls) if f.name not in _HIDDEN.get(name, set())
        }
        values = {}
        for key, rawval in raw.items():
            if key not in allowed:
                raise ConfigError(f"{name}.{key}: unknown key")
            values[key] = _parse_value(rawval, hints[key], f"{name}.{key}")
        kwargs[name] = cls(**values)
    return RunConfig(**kwargs)


def write_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}"]
    for name in _SECTIONS:
        lines.append("")
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            if f.name in _HIDDEN.get(name, set()):
                continue
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path, apply_env: bool = True) -> RunConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    if apply_env:
        override = os.environ.get(SEED_ENV_VAR)
        if override is not None:
            try:
                cfg.seed = int(override)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR}={override!r} is not an integer")
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(write_config(cfg), encoding="utf-8")
