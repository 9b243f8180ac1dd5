"""Run configuration: a JSON document with ``model``, ``data``, ``train`` and ``schedule`` sections.

Unknown keys are rejected so that sweep scripts fail loudly on typos.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .data import CorpusConfig
from .nn import ModelConfig
from .schedule import HeatingConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float
    batch_sequences: int
    epochs: int
    dense_steps: int | None = None
    dense_epochs: int | None = None
    target_ppl: float | None = None
    seed: int = 0
    reset_heating_at_sparsify: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.batch_sequences < 1:
            raise ConfigError("train.batch_sequences must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if (self.dense_steps is None) == (self.dense_epochs is None):
            raise ConfigError("set exactly one of train.dense_steps and train.dense_epochs")
        if (self.dense_steps or 0) < 0 or (self.dense_epochs or 0) < 0:
            raise ConfigError("dense phase length must be >= 0")
        if self.target_ppl is not None and not self.target_ppl > 1:
            raise ConfigError("train.target_ppl must be > 1")


@dataclass
class ScheduleConfig:
    t_s: float
    k: float


@dataclass
class RunConfig:
    model: ModelConfig
    data: CorpusConfig
    train: TrainConfig
    schedule: ScheduleConfig

    @property
    def heating(self) -> HeatingConfig:
        return HeatingConfig(self.schedule.t_s, self.schedule.k, self.train.epochs)

    @property
    def experts(self) -> int:
        return self.model.experts

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model.pop("num_tasks")
        data = asdict(self.data)
        data.pop("vocab")
        return {"model": model, "data": data, "train": asdict(self.train), "schedule": asdict(self.schedule)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _strict(d, {"model", "data", "train", "schedule"}, "config")
        for sec in ("model", "data", "train", "schedule"):
            if sec not in d:
                raise ConfigError(f"missing section {sec!r}")
        try:
            model_keys = {f.name for f in fields(ModelConfig)} - {"num_tasks"}
            data_keys = {f.name for f in fields(CorpusConfig)} - {"vocab"}
            _strict(d["model"], model_keys, "model")
            _strict(d["data"], data_keys, "data")
            _strict(d["train"], {f.name for f in fields(TrainConfig)}, "train")
            _strict(d["schedule"], {"t_s", "k"}, "schedule")
            model = ModelConfig(num_tasks=d["data"]["num_tasks"], **d["model"])
            data = CorpusConfig(vocab=d["model"]["vocab"], **d["data"])
            train = TrainConfig(**d["train"])
            sched = ScheduleConfig(**d["schedule"])
            HeatingConfig(sched.t_s, sched.k, train.epochs)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model, data, train, sched)


def _strict(section, allowed: set, name: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
