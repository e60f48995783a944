"""Experiment configuration: nested sections, strict parsing, one seed.

The config file is YAML with sections mirroring the pipeline modules. Parsing
is strict — an unknown key anywhere is an error — so ablation flags can't be
silently misspelled. All runtime randomness derives from the single top-level
``seed`` unless a section explicitly pins its own; the resolved config's hash
is stamped into checkpoints and reports for provenance.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import types
import typing

import yaml

from .discriminator import DiscriminatorConfig
from .errors import InvalidConfig
from .evaluation import SegTrainConfig
from .generator import FinalActivation, GeneratorConfig
from .losses import LossWeights
from .training import AblationFlags, TrainConfig


@dataclasses.dataclass(frozen=True)
class SynthSection:
    n_cases: int = 40
    size: tuple[int, int, int] = (64, 64, 64)
    num_blobs: tuple[int, int] = (3, 8)
    blob_radius: tuple[float, float] = (4.0, 9.0)
    noise_sigma: float = 0.03
    transform: str = "INVERT_SMOOTH"
    smooth_sigma: float = 1.0
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class DataSection:
    manifest: str | None = None
    spacing_from_train_only: bool = False
    synth: SynthSection = SynthSection()


@dataclasses.dataclass(frozen=True)
class LossSection:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0001
    perception_backbone: str = "standin"
    perception_weights: str | None = None

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


@dataclasses.dataclass(frozen=True)
class InferSection:
    patch_size: tuple[int, int, int] = (96, 96, 96)
    overlap: float = 0.5
    sigma_scale: float = 0.125


@dataclasses.dataclass(frozen=True)
class EvalSection:
    metric_backbone: str = "standin"
    metric_weights: str | None = None
    seg: SegTrainConfig = SegTrainConfig()


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataSection = DataSection()
    model_g: GeneratorConfig = GeneratorConfig()
    model_d: DiscriminatorConfig = DiscriminatorConfig()
    loss: LossSection = LossSection()
    train: TrainConfig = TrainConfig()
    infer: InferSection = InferSection()
    eval: EvalSection = EvalSection()


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _coerce(tp, value, path: str):
    tp = _unwrap_optional(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise InvalidConfig(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build_dataclass(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        candidates = (value, str(value).upper()) if isinstance(value, str) else (value,)
        for candidate in candidates:
            try:
                return tp(candidate)
            except ValueError:
                continue
        raise InvalidConfig(f"{path}: {value!r} is not one of {[e.value for e in tp]}")
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise InvalidConfig(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidConfig(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise InvalidConfig(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build_dataclass(cls, mapping: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    unknown = set(mapping) - set(fields)
    if unknown:
        raise InvalidConfig(
            f"unknown config key{'s' if len(unknown) > 1 else ''} "
            f"{sorted(unknown)} under '{path or cls.__name__}'"
        )
    kwargs = {}
    for name, value in mapping.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise InvalidConfig(f"{path or cls.__name__}: {exc}") from exc


def load_config(path: str | None) -> tuple[ExperimentConfig, dict]:
    """Parse the YAML config file; None yields pure defaults.

    Returns the config and the raw mapping (for has-the-user-set-this checks).
    """
    if path is None:
        return ExperimentConfig(), {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"malformed YAML in {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    return _build_dataclass(ExperimentConfig, raw), raw


def derive_seed(seed: int, role: str) -> int:
    """Stable per-role stream from the single top-level seed."""
    digest = hashlib.sha256(f"{seed}:{role}".encode()).hexdigest()
    return int(digest[:12], 16) % (2**31)


def resolve_seeds(config: ExperimentConfig, raw: dict) -> ExperimentConfig:
    """Fill section seeds from the top-level seed unless the file pinned them."""
    train = config.train
    if "seed" not in raw.get("train", {}):
        train = dataclasses.replace(train, seed=derive_seed(config.seed, "train"))
    synth = config.data.synth
    if "seed" not in raw.get("data", {}).get("synth", {}):
        synth = dataclasses.replace(synth, seed=derive_seed(config.seed, "synth"))
    seg = config.eval.seg
    if "seed" not in raw.get("eval", {}).get("seg", {}):
        seg = dataclasses.replace(seg, seed=derive_seed(config.seed, "segmenter"))
    return dataclasses.replace(
        config,
        train=train,
        data=dataclasses.replace(config.data, synth=synth),
        eval=dataclasses.replace(config.eval, seg=seg),
    )


def _jsonable(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _jsonable(dataclasses.asdict(config))


def config_hash(config: ExperimentConfig) -> str:
    """Short provenance hash of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
