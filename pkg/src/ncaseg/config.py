"""Run configuration: one flat TOML file covering data generation, the
architecture, training, and the experiment grid.

Unknown keys are rejected rather than ignored (typos must not silently fall
back to defaults), and every command echoes its fully resolved configuration
into the output directory so a run can be reproduced from its artifacts
alone.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields

from .datagen import DEFAULT_DOMAINS, DomainSpec
from .nca_core import NcaConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "load_config", "write_config"]


class ConfigError(ValueError):
    """Configuration file or flag is invalid."""


@dataclass
class RunConfig:
    # paths and seeding
    seed: int = 0
    out: str = "runs/out"
    data_dir: str = "data/synth"
    reproducible: bool = False
    # data generation
    n_per_domain: int = 200
    image_size: list = field(default_factory=lambda: [64, 64])
    domains: list = field(default_factory=lambda: [asdict(d) for d in DEFAULT_DOMAINS])
    # architecture
    d_img: int = 1
    n_cls: int = 4
    state_dim: int = 32
    hidden_dim: int = 128
    fire_rate: float = 0.5
    # training
    epochs: int = 100
    batch_size: int = 32
    t_min: int = 64
    t_max: int = 256
    t_eval: int = 128
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0
    grad_chunk: int = 8
    selection_metric: str = "val_dice_loss"
    train_domains: list = field(default_factory=list)
    val_fraction: float = 0.2
    # experiment grid
    n_runs: int = 5
    targets: list = field(default_factory=list)

    def nca_config(self) -> NcaConfig:
        try:
            return NcaConfig(
                d_img=self.d_img,
                n_cls=self.n_cls,
                state_dim=self.state_dim,
                hidden_dim=self.hidden_dim,
                fire_rate=self.fire_rate,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                t_min=self.t_min,
                t_max=self.t_max,
                t_eval=self.t_eval,
                lr=self.lr,
                fire_rate=self.fire_rate,
                seed=self.seed,
                selection_metric=self.selection_metric,
                beta1=self.beta1,
                beta2=self.beta2,
                adam_eps=self.adam_eps,
                weight_decay=self.weight_decay,
                grad_clip=self.grad_clip,
                grad_chunk=self.grad_chunk,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def domain_specs(self) -> list[DomainSpec]:
        specs = []
        for entry in self.domains:
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError("each [[domains]] entry needs at least a name")
            known = {f.name for f in fields(DomainSpec)}
            unknown = set(entry) - known
            if unknown:
                raise ConfigError(f"unknown domain keys: {sorted(unknown)}")
            try:
                specs.append(DomainSpec(**entry))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"domain {entry.get('name')!r}: {exc}") from exc
        if len({s.name for s in specs}) != len(specs):
            raise ConfigError("duplicate domain names")
        return specs


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus flag overrides."""
    values: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for name in ("seed", "n_per_domain", "epochs", "batch_size"):
        if not isinstance(getattr(cfg, name), int):
            raise ConfigError(f"{name} must be an integer")
    if (
        not isinstance(cfg.image_size, (list, tuple))
        or len(cfg.image_size) != 2
        or not all(isinstance(v, int) for v in cfg.image_size)
    ):
        raise ConfigError("image_size must be [I, J]")
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)} to TOML")


def write_config(cfg: RunConfig, path) -> None:
    """Echo the resolved config as TOML, fields in declaration order."""
    lines = []
    tables = [asdict(s) for s in cfg.domain_specs()]  # fully resolved, not the raw dicts
    for f in fields(RunConfig):
        if f.name == "domains":
            continue
        lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
    for entry in tables:
        lines.append("")
        lines.append("[[domains]]")
        for key, val in entry.items():
            lines.append(f"{key} = {_toml_value(val)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
