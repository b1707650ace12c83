from pathlib import Path
from typing import Annotated, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.config import settings
from ..enums import BaselineKind, Command, Schedule, Stage, TriggerMode


class BackboneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_layers: Annotated[int, Field(gt=0)] = 2
    n_heads: Annotated[int, Field(gt=0)] = 2
    d_model: Annotated[int, Field(gt=0)] = 32
    d_ff: Annotated[int, Field(gt=0)] = 64
    vocab_size: Annotated[int, Field(gt=0)] = 64
    max_positions: Annotated[int, Field(gt=0)] = 512
    rotary_base: Annotated[float, Field(gt=0)] = 10000.0

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @model_validator(mode="after")
    def check_head_split(self):
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.d_k % 2:
            raise ValueError(f"head dimension d_k ({self.d_k}) must be even for rotary encoding")
        return self


class ProcessorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_p: Annotated[int, Field(gt=0, description="Hidden size of each per-layer block")] = 32
    d_p_ff: Annotated[int, Field(gt=0, description="Intermediate size of the block MLP")] = 64
    heads: Annotated[int, Field(gt=0)] = 2
    k: Annotated[int, Field(ge=0, description="Reconsolidation budget per layer")] = 32
    g0: Annotated[float, Field(description="Gate initialization (pre-sigmoid)")] = -4.0

    @model_validator(mode="after")
    def check_widths(self):
        if self.d_p_ff < self.d_p:
            raise ValueError(f"d_p_ff ({self.d_p_ff}) must be at least d_p ({self.d_p})")
        if self.d_p % self.heads:
            raise ValueError(f"d_p ({self.d_p}) must be divisible by heads ({self.heads})")
        return self


class TrainConfig(BaseModel):
    stage: Stage = Stage.SFT
    batch_size: Annotated[int, Field(gt=0)] = 8
    lr: Annotated[float, Field(gt=0)] = 1e-3
    schedule: Schedule = Schedule.CONSTANT
    warmup_ratio: Annotated[float, Field(ge=0, lt=1)] = 0.05
    weight_decay: Annotated[float, Field(ge=0)] = 0.0
    epochs: Annotated[int, Field(ge=0)] = 1
    seed: int = settings.seed
    max_len: Annotated[int, Field(gt=0)] = settings.max_trace_len
    k: Annotated[int, Field(ge=0)] = 32
    trigger: TriggerMode = TriggerMode.NEWLINE
    R: Optional[int] = None

    @model_validator(mode="after")
    def check_trigger(self):
        if self.trigger == TriggerMode.EVERY_R and (self.R is None or self.R < 1):
            raise ValueError("R must be at least 1 when trigger is every_R")
        if self.stage == Stage.PROCESSOR and self.trigger == TriggerMode.NONE:
            raise ValueError("processor training needs a trigger (newline or every_R)")
        return self


class BaselineConfig(BaseModel):
    kind: BaselineKind = BaselineKind.PAUSE
    n_special: Annotated[int, Field(ge=0)] = 16


class SynthTaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    modulus: Annotated[int, Field(description="Values live in Z_m")] = 10
    chain_length: Annotated[int, Field(description="Relevant update facts per problem")] = 3
    n_distractors: Annotated[int, Field(ge=0)] = 4
    n_variables: Annotated[int, Field(gt=0)] = 4
    vocab_size: Annotated[int, Field(gt=0)] = 64
    seed: int = settings.seed
    operators: tuple[str, ...] = ("+", "-", "*")

    @field_validator("modulus")
    def modulus_validator(cls, value: int):
        if value < 2:
            raise ValueError(f"modulus must be at least 2, got {value}")
        return value

    @field_validator("chain_length")
    def chain_length_validator(cls, value: int):
        if value < 1:
            raise ValueError(f"chain_length must be at least 1, got {value}")
        return value

    @field_validator("operators")
    def operators_validator(cls, value: tuple[str, ...]):
        unknown = set(value) - {"+", "-", "*"}
        if not value or unknown:
            raise ValueError(f"operators must be a non-empty subset of + - *, got {value}")
        return value

    @model_validator(mode="after")
    def check_distractor_variables(self):
        if self.n_distractors and self.n_variables < 2:
            raise ValueError("distractor facts need at least 2 variables")
        if self.n_variables > 26:
            raise ValueError(f"at most 26 variables are supported, got {self.n_variables}")
        return self


_REQUIRED_INPUTS: dict[Command, tuple[str, ...]] = {
    Command.GEN_DATA: (),
    Command.TRAIN_BACKBONE: ("data_path",),
    Command.TRAIN_PROCESSOR: ("data_path", "backbone_path"),
    Command.EVAL: ("heldout_path", "backbone_path"),
    Command.ABLATE_K: ("data_path", "heldout_path", "backbone_path"),
    Command.ABLATE_RSW: ("data_path", "heldout_path", "backbone_path"),
    Command.ABLATE_SIZE: ("data_path", "heldout_path", "backbone_path"),
    Command.EPOCH_MATCHED: ("data_path", "heldout_path"),
    Command.INSTRUMENT: ("heldout_path", "backbone_path"),
    Command.IB_VERIFY: (),
}

FLAG_NAMES: dict[str, str] = {
    "data_path": "--data",
    "heldout_path": "--heldout",
    "backbone_path": "--backbone",
    "processor_path": "--processor",
}


class RunConfig(BaseModel):
    """
    One experiment run, parsed from a JSON document and overridden by CLI flags.

    Run-level keys are flat; model and optimizer hyperparameters sit in one
    section each (`backbone`, `processor`, `train`, `baseline`, `task`).
    """

    command: Command
    data_path: Optional[Path] = None
    heldout_path: Optional[Path] = None
    backbone_path: Optional[Path] = None
    processor_path: Optional[Path] = None
    output_dir: Path = settings.output_dir
    trigger: TriggerMode = TriggerMode.NEWLINE
    k: Annotated[int, Field(ge=0)] = 32
    R: Optional[int] = None
    seeds: list[int] = [0]
    grid: list[int] = []
    n_train: Annotated[int, Field(ge=0)] = 2000
    n_heldout: Annotated[int, Field(ge=0)] = 200
    max_new: Annotated[int, Field(ge=0)] = 96
    trials: Annotated[int, Field(ge=0)] = 1000
    bound_trials: Annotated[int, Field(ge=0)] = 200
    workers: Annotated[int, Field(gt=0)] = 1
    instrument: bool = False
    backbone: BackboneConfig = BackboneConfig()
    processor: ProcessorConfig = ProcessorConfig()
    train: TrainConfig = TrainConfig()
    baseline: Optional[BaselineConfig] = None
    task: SynthTaskSpec = SynthTaskSpec()

    @field_validator("data_path", "heldout_path", "backbone_path", "processor_path")
    def path_exists_validator(cls, value: Optional[Path], info):
        if value is not None and not value.exists():
            raise ValueError(f"{FLAG_NAMES[info.field_name]}: path does not exist: {value}")
        return value

    @model_validator(mode="after")
    def check_command_inputs(self):
        for name in _REQUIRED_INPUTS[self.command]:
            if getattr(self, name) is None:
                raise ValueError(f"{FLAG_NAMES[name]} is required for {self.command.value}")
        if self.trigger == TriggerMode.EVERY_R and (self.R is None or self.R < 1):
            raise ValueError("--R must be at least 1 when --trigger is every_R")
        return self

    def train_config(self, stage: Stage, **overrides) -> TrainConfig:
        """
        Derive the stage's training config, carrying the run-level trigger, k and R.
        """
        update = {"stage": stage, "k": self.k, "trigger": self.trigger, "R": self.R}
        update.update(overrides)
        return TrainConfig.model_validate({**self.train.model_dump(), **update})

    def processor_config(self, **overrides) -> ProcessorConfig:
        return ProcessorConfig.model_validate(
            {**self.processor.model_dump(), "k": self.k, **overrides}
        )
