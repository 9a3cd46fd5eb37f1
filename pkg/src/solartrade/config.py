"""Experiment configuration: sectioned ``key = value`` files.

Example::

    [run]
    seed = 42

    [data]
    source = synthetic
    n_days = 365

    [ppo]
    long_epochs = 1000

Every key has a default, so an empty file is a valid config. Overrides use
``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigurationError


@dataclass
class RunSection:
    seed: int = 42
    out: str = "results"


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | csv | dataset
    seed: int = 42
    n_days: int = 365
    solar_csv: str = ""
    prices_csv: str = ""
    dataset_csv: str = ""
    price_base: float = 15.0
    price_amplitude: float = 6.0
    price_noise: float = 1.5
    price_phase: float = math.pi / 2
    gen_base: float = 10.0
    gen_amplitude: float = 5.0
    gen_noise: float = 1.5
    gen_phase: float = -math.pi / 2


@dataclass
class SplitSection:
    test_fraction: float = 0.3
    moe_test_fraction: float = 0.3


@dataclass
class PPOSection:
    short_epochs: int = 30
    long_epochs: int = 1000
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    update_passes: int = 4
    minibatch_size: int = 32
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    entropy_coef: float = 0.01
    actor_hidden: str = "64,64,64"
    critic_hidden: str = "64,64"
    activation: str = "tanh"
    normalize_advantages: bool = True
    sell_transitions_only: bool = False
    gae_form: str = "standard"
    reward_balance_timing: str = "post"
    reward_scale: str = "auto"
    rollouts_per_epoch: int = 1

    def trader_params(self, epochs: int, seed: int) -> dict:
        params = {f.name: getattr(self, f.name) for f in fields(self)
                  if f.name not in ("short_epochs", "long_epochs")}
        params["actor_hidden"] = _int_tuple(self.actor_hidden)
        params["critic_hidden"] = _int_tuple(self.critic_hidden)
        if self.reward_scale != "auto":
            params["reward_scale"] = float(self.reward_scale)
        return dict(params, epochs=epochs, random_state=seed)


@dataclass
class MoESection:
    embedding: str = "soliton"
    dim: int = 128
    n_experts: int = 6
    top_k: int = 2
    expert_hidden: int = 64
    embed_hidden: int = 64
    lr: float = 1e-3
    epochs: int = 2000
    augment: bool = True
    input_scale: float = 366.0
    soliton_tail: str = "sin_of_ratio"
    soliton_profile: str = "sec"
    importance_coef: float = 0.0
    # embedding comparison rows, "kind/dim/experts/expert_hidden" separated by commas
    compare: str = "table/128/2/128, table/128/2/64, table/128/4/64, table/128/6/64, soliton/128/6/64"
    leak_free_variant: bool = True

    def model_params(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name not in ("compare", "leak_free_variant")}

    def compare_rows(self) -> list[dict]:
        rows = []
        for item in filter(None, (s.strip() for s in self.compare.split(","))):
            parts = item.split("/")
            if len(parts) != 4:
                raise ConfigurationError(f"bad comparison row {item!r}; expected kind/dim/experts/expert_hidden")
            kind, dim, experts, hidden = parts
            try:
                rows.append({"embedding": kind, "dim": int(dim), "n_experts": int(experts),
                             "expert_hidden": int(hidden)})
            except ValueError:
                raise ConfigurationError(f"bad comparison row {item!r}") from None
        return rows


@dataclass
class EpisodeSection:
    ppo: int = 30
    moe: int = 30
    random: int = 5
    sell_only: int = 1


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    ppo: PPOSection = field(default_factory=PPOSection)
    moe: MoESection = field(default_factory=MoESection)
    episodes: EpisodeSection = field(default_factory=EpisodeSection)

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        if not name:
            raise ConfigurationError(f"override {key!r} must look like section.key")
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise ConfigurationError(f"unknown config section {section!r}")
        types = {f.name: f.type for f in fields(sec)}
        if name not in types:
            raise ConfigurationError(f"unknown key {name!r} in section [{section}]")
        setattr(sec, name, _coerce(value, types[name], key))

    def validate(self) -> "ExperimentConfig":
        for section in ("ppo", "moe", "random", "sell_only"):
            if getattr(self.episodes, section) < 1:
                raise ConfigurationError(f"episodes.{section} must be positive")
        if self.data.source not in ("synthetic", "csv", "dataset"):
            raise ConfigurationError(f"data.source must be synthetic, csv or dataset, got {self.data.source!r}")
        if self.data.source == "csv":
            for key in ("solar_csv", "prices_csv"):
                path = getattr(self.data, key)
                if not path or not Path(path).exists():
                    raise ConfigurationError(f"data.{key} does not exist: {path!r}")
        if self.data.source == "dataset" and not Path(self.data.dataset_csv).exists():
            raise ConfigurationError(f"data.dataset_csv does not exist: {self.data.dataset_csv!r}")
        for key in ("test_fraction", "moe_test_fraction"):
            if not 0.0 < getattr(self.split, key) < 1.0:
                raise ConfigurationError(f"split.{key} must lie in (0, 1)")
        if self.ppo.short_epochs < 0 or self.ppo.long_epochs < 0:
            raise ConfigurationError("ppo epochs must be >= 0")
        self.moe.compare_rows()
        return self

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        """Short digest of everything that affects results (output directory excluded)."""
        text = "\n".join(line for line in self.to_text().splitlines() if not line.startswith("out ="))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, kind, key: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot interpret {text!r} as {kind}") from None
    return text


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        cfg.set(key.strip(), value)
    return cfg
