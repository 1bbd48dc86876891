"""Experiment configuration: one JSON document drives gen/train/eval."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .network import NetConfig
from .persist import read_json
from .scenes import PairConfig, SceneConfig
from .training import (DEFAULT_MATCH_MARGIN, DEFAULT_SEG_MARGIN, MATCH_VARIANTS,
                       SEG_VARIANTS)

TASKS = ("segmentation", "matching")
SEG_ONLY_VARIANTS = ("se", "au")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    variant: str
    seed: int
    net: NetConfig = field(default_factory=NetConfig)
    scene: Optional[SceneConfig] = None
    pair: Optional[PairConfig] = None
    n_train: int = 64
    n_eval: int = 16
    margin: Optional[float] = None         # task default when omitted
    metric_weight: float = 1.0
    epochs: int = 30
    stage_epochs: tuple = (40, 30)
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    triplets_per_step: int = 256
    ces_neighborhood: int = 16
    correlated: bool = False
    au_samples: int = 10
    num_bins: int = 10
    out_dir: str = "runs"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.seed is None:
            raise ValueError("seed is required")
        if self.task == "segmentation":
            if self.variant not in SEG_VARIANTS:
                raise ValueError(f"variant {self.variant!r} invalid for segmentation")
        else:
            if self.variant in SEG_ONLY_VARIANTS:
                raise ValueError(f"variant {self.variant!r} is segmentation-only")
            if self.variant not in MATCH_VARIANTS:
                raise ValueError(f"variant {self.variant!r} invalid for matching")
        if self.task == "segmentation" and self.scene is None:
            object.__setattr__(self, "scene", SceneConfig(seed=self.seed))
        if self.task == "matching" and self.pair is None:
            object.__setattr__(self, "pair", PairConfig(seed=self.seed))
        if self.margin is None:
            default = (DEFAULT_SEG_MARGIN if self.task == "segmentation"
                       else DEFAULT_MATCH_MARGIN)
            object.__setattr__(self, "margin", default)
        if self.task == "segmentation" and self.net.num_classes is None:
            object.__setattr__(
                self, "net", replace(self.net, num_classes=self.scene.num_classes))
        if self.variant == "mcd" and self.net.dropout == 0.0:
            object.__setattr__(self, "net", replace(self.net, dropout=0.1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"]["hidden"] = list(self.net.hidden)
        d["net"]["head_hidden"] = list(self.net.head_hidden)
        d["stage_epochs"] = list(self.stage_epochs)
        if self.scene is None:
            d.pop("scene")
        if self.pair is None:
            d.pop("pair")
        return d


def _sub_config(cls, data: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "net" in data:
        net = dict(data["net"])
        if "hidden" in net:
            net["hidden"] = tuple(net["hidden"])
        if "head_hidden" in net:
            net["head_hidden"] = tuple(net["head_hidden"])
        data["net"] = _sub_config(NetConfig, net)
    if "scene" in data and data["scene"] is not None:
        data["scene"] = _sub_config(SceneConfig, dict(data["scene"]))
    if "pair" in data and data["pair"] is not None:
        data["pair"] = _sub_config(PairConfig, dict(data["pair"]))
    if "stage_epochs" in data:
        data["stage_epochs"] = tuple(data["stage_epochs"])
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**data)


def load_experiment_config(path, seed_override: Optional[int] = None,
                           out_override: Optional[str] = None) -> ExperimentConfig:
    data = read_json(path)
    if seed_override is not None:
        data["seed"] = seed_override
    if out_override is not None:
        data["out_dir"] = out_override
    return experiment_from_dict(data)
