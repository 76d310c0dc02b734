"""JSON experiment configuration: schema, strict loading and normalization.

Sections map onto (mostly) the library's own dataclasses; every key is
optional except ``method``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

from ..codist import CodistSchedule, DistillConfig
from ..data import DataPlan, PartitionSpec, SyntheticTaskSpec
from ..errors import ConfigSyntaxError, ConfigValidationError
from ..fedcore import RoundConfig
from ..numerics import MlpSpec
from ..optim import LinearSchedule

Method = Literal["fedavg", "periodic", "merged"]
Split = Literal["test_mixed", "test_domain_a", "test_domain_b", "heldout"]
ALL_SPLITS: tuple[str, ...] = ("test_mixed", "test_domain_a", "test_domain_b", "heldout")


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (16,)
    activation: Literal["relu", "tanh"] = "relu"


@dataclass(frozen=True)
class DistillSection:
    temperature_cross: float = 1.0
    temperature_self: float = 1.0
    self_reg_lambda: float = 0.0
    batch_size: int = 64
    lr_small: float = 1e-3
    lr_large: float = 1e-3
    student_temperature: bool = True
    mixup_beta: Optional[float] = None


@dataclass(frozen=True)
class ScheduleSection:
    period_p: int = 200
    steps_s: Optional[int] = None  # None -> 200 for periodic, 32 for merged
    alpha: float = 0.5
    skip_distill_at_alpha_one: bool = False


@dataclass(frozen=True)
class DistillSetSection:
    source: Literal["excise_from_train", "generate_out_of_domain"] = "excise_from_train"
    # number of examples, "full", or a percentage string such as "10%"
    size: Union[int, str] = "full"
    ood_shift: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    method: Method
    total_rounds: int = 200
    seed: int = 0
    eval_every: int = 10
    eval_splits: tuple[Split, ...] = ALL_SPLITS
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    partition: PartitionSpec = PartitionSpec()
    data: DataPlan = DataPlan()
    round: RoundConfig = RoundConfig()
    small_model: ModelSection = ModelSection((16,))
    large_model: ModelSection = ModelSection((64, 64))
    server_lr_small: float = 0.01
    server_lr_large: float = 0.01
    distill: DistillSection = DistillSection()
    schedule: ScheduleSection = ScheduleSection()
    distill_set: DistillSetSection = DistillSetSection()

    def __post_init__(self):
        if not self.total_rounds >= 1:
            raise ConfigValidationError("total_rounds", "must be positive")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigValidationError("seed", "must fit in 64 bits")
        if self.eval_every < 1 or self.total_rounds % self.eval_every:
            raise ConfigValidationError("eval_every", "must be positive and divide total_rounds")
        if not self.eval_splits or len(set(self.eval_splits)) != len(self.eval_splits):
            raise ConfigValidationError("eval_splits", "must be a non-empty list without repeats")
        for name in ("server_lr_small", "server_lr_large"):
            if not getattr(self, name) >= 0:
                raise ConfigValidationError(name, "must be non-negative")
        for name in ("lr_small", "lr_large"):
            if not getattr(self.distill, name) >= 0:
                raise ConfigValidationError(f"distill.{name}", "must be non-negative")
        if self.small_spec.parameter_count >= self.large_spec.parameter_count:
            raise ConfigValidationError(
                "small_model",
                f"small model has {self.small_spec.parameter_count} parameters, "
                f"large model {self.large_spec.parameter_count}; small must be strictly smaller",
            )
        size = self.distill_set.size
        if isinstance(size, str):
            if size != "full" and not _is_percent(size):
                raise ConfigValidationError("distill_set.size", "must be an integer, 'full' or 'N%'")
        elif size < 0:
            raise ConfigValidationError("distill_set.size", "must be non-negative")
        if self.method != "fedavg":
            if self.round.client_lr < 0:
                raise ConfigValidationError("round.client_lr", "must be non-negative")
            try:
                self.codist_schedule
                self.distill_config("small")
            except ValueError as exc:
                raise ConfigValidationError("schedule", str(exc)) from exc

    @property
    def small_spec(self) -> MlpSpec:
        return MlpSpec(self.task.input_dim, self.small_model.hidden_dims, self.task.num_classes,
                       self.small_model.activation)

    @property
    def large_spec(self) -> MlpSpec:
        return MlpSpec(self.task.input_dim, self.large_model.hidden_dims, self.task.num_classes,
                       self.large_model.activation)

    @property
    def server_schedule_small(self) -> LinearSchedule:
        return LinearSchedule(self.server_lr_small, self.total_rounds)

    @property
    def server_schedule_large(self) -> LinearSchedule:
        return LinearSchedule(self.server_lr_large, self.total_rounds)

    @property
    def codist_schedule(self) -> CodistSchedule:
        mode = "merged" if self.method == "merged" else "periodic"
        s = self.schedule
        return CodistSchedule(mode, s.period_p, s.steps_s, s.alpha, s.skip_distill_at_alpha_one)

    def distill_config(self, model: str) -> DistillConfig:
        d = self.distill
        lr = d.lr_small if model == "small" else d.lr_large
        return DistillConfig(
            temperature_cross=d.temperature_cross,
            temperature_self=d.temperature_self,
            self_reg_lambda=d.self_reg_lambda,
            steps_s=self.codist_schedule.steps_s,
            distill_batch_size=d.batch_size,
            student_lr_schedule=LinearSchedule(lr, self.total_rounds),
            student_temperature=d.student_temperature,
            mixup_beta=d.mixup_beta,
        )


def _is_percent(s: str) -> bool:
    if not s.endswith("%"):
        return False
    try:
        return 0.0 <= float(s[:-1]) <= 100.0
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Generic strict dataclass <-> dict conversion.


def _convert(tp, value: Any, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Literal:
        if value not in args:
            raise ConfigValidationError(path, f"must be one of {list(args)}, got {value!r}")
        return value
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for option in (a for a in args if a is not type(None)):
            try:
                return _convert(option, value, path)
            except ConfigValidationError as exc:
                errors.append(str(exc))
        raise ConfigValidationError(path, f"invalid value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(path, "must be a list")
        item = args[0]
        return tuple(_convert(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(path, "must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(path, f"must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(path, f"must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(path, "must be a string")
        return value
    raise TypeError(f"unsupported config type {tp!r}")


def _build(cls, data: Any, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigValidationError(path or "<root>", "must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigValidationError(f"{path}.{unknown[0]}".lstrip("."), "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{path}.{f.name}".lstrip(".")
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], key)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigValidationError(key, "required")
    try:
        return cls(**kwargs)
    except ConfigValidationError as exc:
        if path:
            raise ConfigValidationError(f"{path}.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(path or "<root>", str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def config_to_dict(cfg) -> dict:
    """Fully expanded, JSON-ready form of a config (defaults filled in)."""

    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def normalize(data: dict) -> dict:
    return config_to_dict(config_from_dict(data))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigSyntaxError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def patch(data: dict, dotted: str, value) -> dict:
    """Copy of ``data`` with the field at ``dotted`` replaced."""
    out = json.loads(json.dumps(data))
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigValidationError(dotted, "not a config field")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigValidationError(dotted, "not a config field")
    node[keys[-1]] = value
    return out
