"""Run configuration and its flat ``key = value`` file format.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Nested sections use dotted keys (``env.goal_distance = 2.0``,
``relabel.K = 0.1``).  Values are typed by the dataclass field they land in;
tuples of widths are comma separated (``policy_hidden = 64, 64``).  Unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Union

from htr.envsim import EnvSpec
from htr.errors import InvalidArgumentError
from htr.relabel import RelabelConfig

SECTIONS = {"env": EnvSpec, "relabel": RelabelConfig}


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSpec = field(default_factory=EnvSpec)
    n_train_tasks: int = 100
    n_test_tasks: int = 100
    meta_batch: int = 16
    total_iters: int = 500
    train_steps_per_iter: int = 100
    episodes_per_task_per_iter: int = 2
    latent_dim: int = 5
    policy_hidden: tuple = (300, 300, 300)
    encoder_hidden: tuple = (200, 200, 200)
    lr: float = 3e-4
    alpha: float = 0.2
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    context_size: int = 64
    kl_weight: float = 0.1
    buffer_capacity: int = 100_000
    # 0 means the whole buffer
    recency_window: int = 0
    relabel: RelabelConfig = field(default_factory=RelabelConfig)
    oracle_dense: bool = False
    # feed the encoder sparse rewards even when the dense oracle trains on dense ones
    oracle_sparse_context: bool = False
    eval_every: int = 10
    eval_episodes: int = 3
    n_eval_train_tasks: int = 20
    checkpoint_every: int = 0
    prior_rollouts: int = 300

    def validate(self) -> None:
        self.env.validate()
        self.relabel.validate()
        positive = (
            "n_train_tasks", "n_test_tasks", "meta_batch", "train_steps_per_iter",
            "episodes_per_task_per_iter", "latent_dim", "batch_size", "context_size",
            "buffer_capacity", "eval_every", "eval_episodes",
        )
        for key in positive:
            if getattr(self, key) < 1:
                raise InvalidArgumentError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("total_iters", "recency_window", "checkpoint_every", "prior_rollouts", "n_eval_train_tasks"):
            if getattr(self, key) < 0:
                raise InvalidArgumentError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.meta_batch > self.n_train_tasks:
            raise InvalidArgumentError("meta_batch cannot exceed n_train_tasks")
        for key in ("policy_hidden", "encoder_hidden"):
            widths = getattr(self, key)
            if not widths or any(w < 1 for w in widths):
                raise InvalidArgumentError(f"{key} widths must be >= 1, got {widths}")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if not self.alpha > 0:
            raise InvalidArgumentError("alpha must be > 0")
        if not 0 < self.gamma < 1:
            raise InvalidArgumentError("gamma must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise InvalidArgumentError("tau must lie in (0, 1]")
        if self.kl_weight < 0:
            raise InvalidArgumentError("kl_weight must be >= 0")


# ---------------------------------------------------------------------------
# flat key/value view


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def known_keys() -> dict[str, Any]:
    """Every settable dotted key mapped to its annotated type."""
    out = {}
    for name, tp in _field_types(RunConfig).items():
        if name in SECTIONS:
            for sub, stp in _field_types(SECTIONS[name]).items():
                out[f"{name}.{sub}"] = stp
        else:
            out[name] = tp
    return out


def _parse_value(key: str, raw: str, tp) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is tuple or origin is tuple:
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
        if origin is typing.Literal:
            if raw not in typing.get_args(tp):
                raise ValueError(raw)
            return raw
        return raw
    except ValueError:
        raise InvalidArgumentError(f"{key}: cannot parse {raw!r}") from None


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def to_flat(cfg: RunConfig) -> dict[str, Any]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sf in fields(v):
                out[f"{f.name}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[f.name] = v
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """New config with string-valued dotted ``overrides`` applied."""
    keys = known_keys()
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, raw in overrides.items():
        if key not in keys:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        value = _parse_value(key, raw, keys[key])
        if "." in key:
            section, sub = key.split(".", 1)
            nested[section][sub] = value
        else:
            top[key] = value
    for section, values in nested.items():
        if values:
            top[section] = dataclasses.replace(getattr(cfg, section), **values)
    return dataclasses.replace(cfg, **top)


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise InvalidArgumentError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = raw
    return apply_overrides(base or RunConfig(), pairs)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in to_flat(cfg).items())


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read a config file, or a shipped profile by name (``desk``, ``full``)."""
    p = Path(path)
    if not p.exists() and str(path) in PROFILES:
        return profile(str(path))
    return parse_config(p.read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


PROFILES = ("desk", "full")


def profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise InvalidArgumentError(f"unknown profile {name!r}; choose from {PROFILES}")
    text = resources.files("htr.configs").joinpath(f"{name}.cfg").read_text(encoding="utf-8")
    return parse_config(text)
