"""Search configuration documents (YAML) and shipped presets."""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .searchspace import CONV_OPS, RECURRENT_ACTS, CellTemplate, make_conv_template, make_recurrent_template

PRESETS = ("cifar-like.toy", "ptb-like.toy", "tabular-bench")


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CellSpec(_Model):
    kind: Literal["conv", "recurrent"] = "conv"
    num_nodes: int = Field(6, ge=2)
    ops: Optional[list[str]] = None

    def templates(self, task: str) -> list[CellTemplate]:
        if self.kind == "recurrent":
            return [make_recurrent_template(self.num_nodes, self.ops or RECURRENT_ACTS)]
        ops = self.ops or CONV_OPS
        if task == "conv":
            return [make_conv_template(self.num_nodes, ops, k) for k in ("conv_normal", "conv_reduction")]
        return [make_conv_template(self.num_nodes, ops)]


class OracleSpec(_Model):
    seed: int = 0
    noise: float = Field(0.0, ge=0)
    margin: float = Field(0.3, gt=0, lt=1)
    table: Optional[str] = None


class DataSpec(_Model):
    seed: int = 0
    n_train: int = Field(256, gt=0)
    n_valid: int = Field(64, gt=0)
    num_classes: int = Field(4, ge=2)
    image_size: int = Field(8, ge=2)
    image_channels: int = Field(3, ge=1)
    noise: float = 0.3
    corpus: Optional[str] = None
    repeats: int = Field(8, ge=1)


class NetworkSpec(_Model):
    cells_per_stage: int = Field(1, ge=1)
    num_reduction: int = Field(1, ge=0)
    channels: int = Field(4, ge=2)
    embed_size: int = Field(16, ge=1)
    hidden_size: int = Field(16, ge=1)
    seq_len: int = Field(8, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)


class SearchConfig(_Model):
    task: Literal["tabular", "conv", "recurrent"]
    seed: int = 0
    epochs: int = Field(10, gt=0)
    cell: CellSpec = CellSpec()
    network: NetworkSpec = NetworkSpec()
    data: DataSpec = DataSpec()
    oracle: OracleSpec = OracleSpec()

    batch_size: int = Field(16, gt=0)
    valid_batch_size: int = Field(16, gt=0)
    child_steps_per_epoch: Optional[int] = Field(None, gt=0)
    policy_steps_per_epoch: Optional[int] = Field(None, gt=0)
    child_lr: Optional[float] = Field(None, ge=0)
    child_momentum: Optional[float] = Field(None, ge=0, lt=1)
    nesterov: bool = True
    grad_clip: Optional[float] = Field(None, gt=0)

    policy_lr: Optional[float] = Field(None, gt=0)
    policy_batch: int = Field(1, gt=0)
    temperature: float = Field(1.0, gt=0)
    baseline_decay: float = Field(0.95, gt=0, lt=1)
    reward_c: Optional[float] = Field(None, gt=0)
    fixed_reward_batch: bool = False

    derive_samples: int = Field(100, gt=0)
    derive_resample_batch: bool = False
    workers: int = Field(1, gt=0)

    snapshot_every: int = Field(1, gt=0)
    checkpoint_every: int = Field(1, gt=0)
    ledger_bucket: int = Field(50, gt=0)

    @model_validator(mode="after")
    def _fill_defaults(self):
        recurrent = self.task == "recurrent"
        if self.task == "recurrent" and self.cell.kind != "recurrent":
            raise ValueError("task 'recurrent' needs cell.kind: recurrent")
        if self.task == "conv" and self.cell.kind != "conv":
            raise ValueError("task 'conv' needs cell.kind: conv")
        if self.cell.kind == "conv" and self.cell.num_nodes < 3:
            raise ValueError("conv cells need cell.num_nodes >= 3")
        if self.policy_lr is None:
            self.policy_lr = 3e-3 if recurrent else 3.5e-4
        if self.child_lr is None:
            self.child_lr = 20.0 if recurrent else 0.05
        if self.child_momentum is None:
            self.child_momentum = 0.0 if recurrent else 0.9
        if self.grad_clip is None and recurrent:
            self.grad_clip = 0.25
        return self

    def templates(self) -> list[CellTemplate]:
        return self.cell.templates(self.task)

    def dumps(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _line_of(node, loc) -> int | None:
    """Best-effort source line of a pydantic error location inside a YAML node tree."""
    line = node.start_mark.line + 1 if node is not None else None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(part)), None)
            key = next((k for k, v in node.value if k.value == str(part)), None)
            if match is None:
                return line
            line, node = key.start_mark.line + 1, match
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> SearchConfig:
    try:
        tree = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ConfigError(f"{source}: {where}: malformed YAML: {getattr(e, 'problem', e)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: config must be a mapping")
    data.update(overrides or {})
    try:
        return SearchConfig.model_validate(data)
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            field = ".".join(str(p) for p in err["loc"]) or "<root>"
            line = _line_of(tree, err["loc"])
            msgs.append(f"{source}: line {line}: field '{field}': {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("decoupled_nas").joinpath("presets", f"{name}.yaml").read_text()


def load_config(path_or_preset: str, overrides: dict | None = None) -> SearchConfig:
    """Read a config file, or a shipped preset by name."""
    p = Path(path_or_preset)
    if not p.exists() and path_or_preset in PRESETS:
        return parse_config(preset_text(path_or_preset), path_or_preset, overrides)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"{path_or_preset}: cannot read config: {e.strerror}") from None
    return parse_config(text, str(p), overrides)
