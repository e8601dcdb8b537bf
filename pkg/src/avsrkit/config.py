"""Plain-text key=value configuration files.

One flat keyspace covers the model and training dataclasses; values are
coerced to the field's declared type and unknown keys are rejected.  The
training CTC weight (alpha) is the ``ctc_weight`` key; decode-time weights
come from decode flags, not config files.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .dataflow import AugmentPolicy
from .errors import ConfigError
from .harness import TrainConfig
from .model import ModelConfig


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(value: str, target_type, key: str):
    try:
        if target_type is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is tuple:
            parts = [v.strip() for v in value.split(",")]
            out = []
            for part in parts:
                try:
                    out.append(int(part))
                except ValueError:
                    out.append(float(part))
            return tuple(out)
        return value
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {target_type.__name__}") from err


def _field_types(cls) -> dict[str, type]:
    types = {}
    for f in dataclasses.fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}.get(t, str)
        types[f.name] = t
    return types


def apply_keys(instance, kv: dict[str, str], consumed: set[str]):
    """Return a copy of a dataclass with matching keys applied."""
    types = _field_types(type(instance))
    updates = {}
    for key, value in kv.items():
        if key in types:
            updates[key] = _coerce(value, types[key], key)
            consumed.add(key)
    return dataclasses.replace(instance, **updates) if updates else instance


def build_train_configs(
    kv: dict[str, str],
    model_base: ModelConfig | None = None,
    train_base: TrainConfig | None = None,
) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key=value dict across ModelConfig and TrainConfig.

    ``ctc_weight`` belongs to training (the hybrid loss alpha).  Unknown
    keys are rejected by name.
    """
    consumed: set[str] = set()
    train = apply_keys(train_base or TrainConfig.desk(), kv, consumed)
    model_kv = {k: v for k, v in kv.items() if k != "ctc_weight"}
    model = apply_keys(model_base or ModelConfig.desk(), model_kv, consumed)
    unknown = sorted(set(kv) - consumed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return model, train


def build_augment_policy(kv: dict[str, str]) -> AugmentPolicy:
    consumed: set[str] = set()
    policy = apply_keys(AugmentPolicy(), kv, consumed)
    unknown = sorted(set(kv) - consumed)
    if unknown:
        raise ConfigError(f"unknown augment policy keys: {', '.join(unknown)}")
    return policy
