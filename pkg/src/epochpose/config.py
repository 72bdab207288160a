"""Run configuration: one JSON document with a section per stage.

Every field defaults to the reference training setup where one exists; the
rest carry desk-scale values. Unknown keys are rejected so typos surface early.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticConfig
from .flow import FlowConfig
from .liftnet import LiftConfig
from .regnet import RegConfig

CONFIG_ENV = "EPOCH_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class FeatureConfig:
    width: int = 128
    noise: float = 0.01
    seed: int = 0


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def to_dict(self) -> dict:
        return {"synthetic": self.synthetic.to_dict(), "flow": asdict(self.flow),
                "lift": self.lift.to_dict(), "reg": self.reg.to_dict(),
                "features": asdict(self.features)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        extra = set(d) - {"synthetic", "flow", "lift", "reg", "features"}
        if extra:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")
        base = cls()
        try:
            return cls(
                synthetic=SyntheticConfig.from_dict({**base.synthetic.to_dict(),
                                                     **_checked(SyntheticConfig, d.get("synthetic"))}),
                flow=FlowConfig(**{**asdict(base.flow), **_checked(FlowConfig, d.get("flow"))}),
                lift=LiftConfig.from_dict({**base.lift.to_dict(), **_checked(LiftConfig, d.get("lift"))}),
                reg=RegConfig.from_dict({**base.reg.to_dict(), **_checked(RegConfig, d.get("reg"))}),
                features=FeatureConfig(**{**asdict(base.features),
                                          **_checked(FeatureConfig, d.get("features"))}),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _checked(kind, section) -> dict:
    section = dict(section or {})
    known = {f.name for f in fields(kind)}
    bad = set(section) - known
    if bad:
        raise ConfigError(f"unknown {kind.__name__} field(s): {', '.join(sorted(bad))}")
    return section


def load_config(path=None) -> RunConfig:
    """Read ``path``, else the file named by ``$EPOCH_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return RunConfig.from_dict(json.loads(p.read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: line {e.lineno}: {e.msg}") from None


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
