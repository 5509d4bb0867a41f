"""Run configuration: defaults, YAML file, ``--set`` overrides, validation and hashing.

Keys live in five sections (``data``, ``model``, ``train``, ``eval``, ``run``).
A key may be written fully qualified (``train.lr``) or by its bare name
(``lr``); bare names are unique across sections. Precedence is
overrides > file > defaults.

``train.crop`` and ``train.fps`` are the single source for the model's frame
size and frame rate, and ``run.seed`` is the master seed that every
component seed is derived from.
"""

from __future__ import annotations

import dataclasses
import difflib
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from hfn.errors import MissingInputError, ValidationError
from hfn.model import ModelConfig
from hfn.training import TrainConfig, config_hash

_DERIVED_MODEL_KEYS = {"frame_size", "fps"}
_DERIVED_TRAIN_KEYS = {"seed"}


@dataclass
class DataConfig:
    manifest: str = ""
    label_mode: str = "binary"
    merge_ambiguous: bool = False
    cache: bool = True
    cache_dir: str = ""
    synthetic_n: int = 600
    synthetic_k: int = 4
    synthetic_planted: str = "video"
    synthetic_noise: float = 0.5
    synthetic_missing_audio: float = 0.2
    synthetic_missing_text: float = 0.2


@dataclass
class EvalConfig:
    repetition: int = 0
    full_protocol: bool = False
    ablation: str = "modality"
    profile_repeats: int = 5
    probe_size: int = 8


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/hfn"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(frame_size=32, sr=1000))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    def to_json(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "model": {k: v for k, v in dataclasses.asdict(self.model).items() if k not in _DERIVED_MODEL_KEYS},
            "train": {k: v for k, v in dataclasses.asdict(self.train).items() if k not in _DERIVED_TRAIN_KEYS},
            "eval": dataclasses.asdict(self.eval),
            "run": dataclasses.asdict(self.run),
        }

    @property
    def hash(self) -> str:
        """Hash of the keys that can change results; output and cache locations are left out."""
        tree = self.to_json()
        for section, key in _LOCATION_KEYS:
            tree[section].pop(key)
        return config_hash(tree)

    @property
    def synthetic(self) -> bool:
        return not self.data.manifest


_LOCATION_KEYS = (("run", "out"), ("data", "cache"), ("data", "cache_dir"))

_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "run": RunSection}


def _section_keys() -> dict[str, dict[str, type]]:
    out = {}
    for name, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        skip = _DERIVED_MODEL_KEYS if name == "model" else _DERIVED_TRAIN_KEYS if name == "train" else set()
        out[name] = {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}
    return out


KEYS = _section_keys()
_BARE = {}
for _sec, _fields in KEYS.items():
    for _key in _fields:
        if _key in _BARE:
            raise RuntimeError(f"bare config key {_key!r} is defined twice")
        _BARE[_key] = _sec


def all_keys() -> list[str]:
    return [f"{s}.{k}" for s, fields in KEYS.items() for k in fields]


def _resolve(key: str) -> tuple[str, str]:
    if "." in key:
        sec, _, name = key.partition(".")
        if sec in KEYS and name in KEYS[sec]:
            return sec, name
    elif key in _BARE:
        return _BARE[key], key
    candidates = all_keys() + list(_BARE)
    near = difflib.get_close_matches(key, candidates, n=3, cutoff=0.6)
    hint = f"; did you mean {', '.join(repr(n) for n in near)}?" if near else ""
    raise ValidationError(f"unknown config key {key!r}{hint}")


def _coerce(key: str, value, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        typ = next(a for a in args if a is not type(None))
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "yes", "1", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if typ is str:
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                raise ValueError
            return str(value)
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ValidationError(f"config key {key!r}: cannot use {value!r} as {getattr(typ, '__name__', typ)}")


def _flatten(obj, prefix="") -> dict:
    flat = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not prefix and k in KEYS:
            flat.update(_flatten(v, f"{k}."))
        else:
            flat[key] = v
    return flat


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values: dict[tuple[str, str], object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingInputError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ValidationError(f"config file {p} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"config file {p} must hold a mapping of keys to values")
        for key, value in _flatten(loaded).items():
            values[_resolve(str(key))] = value
    for key, value in (overrides or {}).items():
        values[_resolve(key)] = value

    sections = {name: {} for name in KEYS}
    for (sec, name), value in values.items():
        sections[sec][name] = _coerce(f"{sec}.{name}", value, KEYS[sec][name])

    data = DataConfig(**sections["data"])
    train = TrainConfig(**sections["train"], seed=sections["run"].get("seed", RunSection.seed))
    model_kwargs = {"frame_size": train.crop, "fps": train.fps, "sr": 1000, **sections["model"]}
    if data.manifest and "sr" not in sections["model"]:
        model_kwargs["sr"] = ModelConfig.sr
    cfg = RunConfig(
        data=data,
        model=ModelConfig(**model_kwargs),
        train=train,
        eval=EvalConfig(**sections["eval"]),
        run=RunSection(**sections["run"]),
    )
    validate(cfg)
    return cfg


def default_config() -> RunConfig:
    return parse_config()


def validate(cfg: RunConfig) -> None:
    if cfg.data.label_mode not in ("binary", "ternary"):
        raise ValidationError(f"data.label_mode must be 'binary' or 'ternary', got {cfg.data.label_mode!r}")
    if cfg.data.merge_ambiguous and cfg.data.label_mode != "ternary":
        raise ValidationError("data.merge_ambiguous only applies to the ternary label mode")
    if cfg.eval.ablation not in ("modality", "fusion"):
        raise ValidationError(f"eval.ablation must be 'modality' or 'fusion', got {cfg.eval.ablation!r}")
    if not 0 <= cfg.eval.repetition < cfg.train.repetitions:
        raise ValidationError(f"eval.repetition must be in [0, {cfg.train.repetitions})")
    if cfg.eval.probe_size < 1:
        raise ValidationError("eval.probe_size must be positive")
