"""Flat ``key = value`` run configuration covering every tunable in the pipeline."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig
from .fasttext import SubwordConfig
from .fusion import FusionConfig, TrainConfig
from .odt import DEFAULT_RULES, DecodePolicy, FilterRules, Mode, Policy
from .swa import EncoderConfig
from .tensorio import parse_kv

ENV_VAR = "OPSHIELD_CONFIG"


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 42
    stratified: bool = True

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios):
            raise InvalidConfig("every split ratio must be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise InvalidConfig(f"split ratios sum to {sum(ratios)}, not 1")

    @property
    def ratios(self) -> tuple:
        return (self.train, self.val, self.test)


def _default_encoder() -> EncoderConfig:
    # vocab_size is filled in from the training data
    return EncoderConfig(vocab_size=1)


@dataclass(frozen=True)
class RunConfig:
    rules: FilterRules = DEFAULT_RULES
    decode: DecodePolicy = DecodePolicy()
    embed: SubwordConfig = SubwordConfig()
    encoder: EncoderConfig = field(default_factory=_default_encoder)
    fusion: FusionConfig = FusionConfig()
    train: TrainConfig = TrainConfig()
    split: SplitSpec = SplitSpec()
    mode: Mode = Mode.ODT
    lambda_grid: tuple = tuple(round(0.1 * i, 1) for i in range(11))

    def __post_init__(self):
        if self.fusion.d_fused != self.encoder.d_model:
            raise InvalidConfig("fusion.d_fused must equal encoder.d_model")

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed (embedder, training, split) set to ``seed``."""
        return replace(
            self,
            embed=replace(self.embed, seed=seed),
            train=replace(self.train, seed=seed),
            split=replace(self.split, seed=seed),
        )


_SECTIONS = {
    "decode": DecodePolicy,
    "embed": SubwordConfig,
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "split": SplitSpec,
}
_RENAMES = {("fusion", "lambda"): "lam"}


def _coerce(kind: str, key: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise InvalidConfig(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def _names(raw: str) -> frozenset:
    return frozenset(x.strip() for x in raw.split(",") if x.strip())


def known_keys() -> list[str]:
    keys = ["rules.keep", "rules.drop", "rules.default_policy", "mode", "lambda.grid"]
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if section == "encoder" and f.name == "vocab_size":
                continue
            name = "lambda" if (section, f.name) == ("fusion", "lam") else f.name
            keys.append(f"{section}.{name}")
    return keys


def from_mapping(kv: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply flat settings on top of ``base``; unknown keys are rejected."""
    cfg = base or RunConfig()
    allowed = set(known_keys())
    unknown = sorted(set(kv) - allowed)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
    updates: dict = {}
    try:
        for key, raw in kv.items():
            section, _, name = key.partition(".")
            if section in _SECTIONS:
                attr = _RENAMES.get((section, name), name)
                kind = {f.name: f.type for f in fields(_SECTIONS[section])}[attr]
                updates.setdefault(section, {})[attr] = _coerce(kind, key, str(raw))
        rules = cfg.rules
        if "rules.keep" in kv or "rules.drop" in kv or "rules.default_policy" in kv:
            rules = FilterRules(
                _names(kv["rules.keep"]) if "rules.keep" in kv else rules.keep,
                _names(kv["rules.drop"]) if "rules.drop" in kv else rules.drop,
                Policy(kv["rules.default_policy"]) if "rules.default_policy" in kv else rules.default_policy,
            )
        new = {section: replace(getattr(cfg, section), **vals) for section, vals in updates.items()}
        if "mode" in kv:
            new["mode"] = Mode(kv["mode"].lower())
        if "lambda.grid" in kv:
            new["lambda_grid"] = tuple(float(x) for x in str(kv["lambda.grid"]).split(",") if x.strip())
        return replace(cfg, rules=rules, **new)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(str(exc)) from None


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a config file (or ``$OPSHIELD_CONFIG``) and apply ``overrides`` on top."""
    kv: dict = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        kv.update(parse_kv(Path(path).read_text(encoding="utf-8")))
    kv.update(overrides or {})
    return from_mapping(kv)


def dump_config(cfg: RunConfig) -> str:
    lines = [
        f"rules.keep = {','.join(sorted(cfg.rules.keep))}",
        f"rules.drop = {','.join(sorted(cfg.rules.drop))}",
        f"rules.default_policy = {cfg.rules.default_policy.value}",
        f"mode = {cfg.mode.value}",
        f"lambda.grid = {','.join(str(x) for x in cfg.lambda_grid)}",
    ]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if section == "encoder" and f.name == "vocab_size":
                continue
            name = "lambda" if (section, f.name) == ("fusion", "lam") else f.name
            lines.append(f"{section}.{name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"

