"""Pipeline-level configuration: one JSON file covering every stage."""

import dataclasses
import json
import os

from .errors import ConfigError, MissingArtifactError
from .gmldm.model import GMLDMConfig
from .refiner import RefinerConfig
from .trajdit import TrajDiTConfig


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    trajdit: TrajDiTConfig = dataclasses.field(default_factory=TrajDiTConfig)
    gmldm: GMLDMConfig = dataclasses.field(default_factory=GMLDMConfig)
    refiner: RefinerConfig = dataclasses.field(default_factory=RefinerConfig)

    def validate(self):
        self.trajdit.validate()
        self.gmldm.validate()
        self.refiner.validate()
        if self.trajdit.timesteps != self.gmldm.timesteps:
            raise ConfigError("trajdit and gmldm must share the timestep count")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["refiner"].pop("weight_fn", None)  # callable hook, not serializable
        return d


def _from_dict(cls, data):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def load_config(path) -> PipelineConfig:
    if not os.path.exists(path):
        raise MissingArtifactError(f"config file not found: {path}")
    with open(path) as f:
        data = json.load(f)
    cfg = PipelineConfig(
        seed=int(data.get("seed", 0)),
        trajdit=_from_dict(TrajDiTConfig, data.get("trajdit", {})),
        gmldm=_from_dict(GMLDMConfig, data.get("gmldm", {})),
        refiner=_from_dict(RefinerConfig, data.get("refiner", {})),
    )
    cfg.validate()
    return cfg


def save_config(path, cfg: PipelineConfig):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
