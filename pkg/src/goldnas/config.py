"""Flat INI experiment profiles with sections
[shape] [optimizer] [scheduler] [data] [augment].

Every SchedulerConfig / OptimizerConfig field has a key of the same name;
command-line flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Optional, Tuple

from .data import AugmentationConfig
from .scheduler import SchedulerConfig
from .space import NetworkShapeConfig
from .supernet import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10
    num_classes: int = 4
    samples_per_class: int = 500
    resolution: int = 16
    path: str = ""
    limit: int = 0  # cap on example count for cifar10; 0 = all


@dataclass
class Profile:
    shape: NetworkShapeConfig
    optimizer: OptimizerConfig
    scheduler: SchedulerConfig
    data: DataConfig
    augment: AugmentationConfig


def _section(cp, name):
    return cp[name] if cp.has_section(name) else {}


def _get(sec, key, cast, default):
    if key not in sec:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        if cast is bool:
            return str(sec[key]).strip().lower() in ("1", "true", "yes", "on")
        return cast(sec[key])
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {sec[key]!r}") from e


def load_profile(path: str) -> Profile:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    try:
        s = _section(cp, "shape")
        num_cells = _get(s, "num_cells", int, None)
        if "reduction_cells" in s:
            # an explicitly empty value means no reduction cells at all
            text = s["reduction_cells"].strip()
            reduction_cells = tuple(int(x) for x in text.split(",")) if text else ()
        else:
            reduction_cells = NetworkShapeConfig.default_reductions(num_cells)
        shape = NetworkShapeConfig(
            num_cells=num_cells,
            nodes_per_cell=_get(s, "nodes_per_cell", int, None),
            initial_channels=_get(s, "initial_channels", int, None),
            input_height=_get(s, "input_height", int, None),
            input_width=_get(s, "input_width", int, None),
            reduction_cells=reduction_cells,
        )
        o = _section(cp, "optimizer")
        optimizer = OptimizerConfig(
            eta_omega=_get(o, "eta_omega", float, 0.01),
            eta_alpha=_get(o, "eta_alpha", float, 1.0),
            momentum_omega=_get(o, "momentum_omega", float, 0.9),
            momentum_alpha=_get(o, "momentum_alpha", float, 0.9),
            weight_decay_omega=_get(o, "weight_decay_omega", float, 3e-4),
            batch_size=_get(o, "batch_size", int, 96),
        )
        c = _section(cp, "scheduler")
        scheduler = SchedulerConfig(
            flops_min=int(_get(c, "flops_min", float, None)),
            n0=_get(c, "n0", int, 4),
            lambda0=_get(c, "lambda0", float, 1e-5),
            c0=_get(c, "c0", float, 2.0),
            xi_max=_get(c, "xi_max", float, 0.05),
            xi_min=_get(c, "xi_min", float, 0.01),
            t0=_get(c, "t0", int, 3),
            mu=_get(c, "mu", float, 0.0),
            max_epochs=_get(c, "max_epochs", int, 500),
            mean_scope=_get(c, "mean_scope", str, "edge"),
        )
        d = _section(cp, "data")
        data = DataConfig(
            source=_get(d, "source", str, "synthetic"),
            num_classes=_get(d, "num_classes", int, 4),
            samples_per_class=_get(d, "samples_per_class", int, 500),
            resolution=_get(d, "resolution", int, 16),
            path=_get(d, "path", str, ""),
            limit=_get(d, "limit", int, 0),
        )
        a = _section(cp, "augment")
        augment = AugmentationConfig(
            enabled=_get(a, "enabled", bool, False),
            flip_prob=_get(a, "flip_prob", float, 0.5),
            crop_padding=_get(a, "crop_padding", int, 2),
            cutout_length=_get(a, "cutout_length", int, 0),
        )
    except (ValueError, ConfigError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return Profile(shape=shape, optimizer=optimizer, scheduler=scheduler,
                   data=data, augment=augment)
