from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Task(str, Enum):
    NEXT_ACTIVITY = "next_activity"
    NEXT_TIME = "next_time"
    REMAINING_TIME = "remaining_time"

    @property
    def is_regression(self) -> bool:
        return self is not Task.NEXT_ACTIVITY


class ColumnMapping(BaseModel):
    case_column: str = "case:concept:name"
    activity_column: str = "concept:name"
    timestamp_column: str = "time:timestamp"
    timestamp_format: str = "ISO8601"  # or any strftime pattern

    @model_validator(mode="after")
    def _distinct_columns(self):
        columns = {self.case_column, self.activity_column, self.timestamp_column}
        if len(columns) != 3:
            raise ValueError("case, activity and timestamp columns must be distinct")
        return self


class ModelConfig(BaseModel):
    vocab_size: int = Field(ge=1)
    max_len: int = Field(ge=1)
    embed_dim: int = Field(default=36, ge=1)
    num_heads: int = Field(default=4, ge=1)
    num_blocks: int = Field(default=1, ge=1)
    ff_hidden: int = Field(default=64, ge=1)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    dense_units: Tuple[int, int] = (32, 128)
    task: Task = Task.NEXT_ACTIVITY
    seed: int = 42

    @model_validator(mode="after")
    def _heads_divide_embedding(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_classes(self) -> int:
        """Activities plus the PAD and UNK ids."""
        return self.vocab_size + 2

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task is Task.NEXT_ACTIVITY else 1


class TrainConfig(BaseModel):
    epochs: int = Field(default=100, ge=0)
    # lr = 0 is accepted so that a run can be checked to leave parameters untouched
    learning_rate: float = Field(default=1e-2, ge=0.0)
    batch_size: int = Field(default=128, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    seed: int = 42
    shuffle_each_epoch: bool = True
    class_weighting: bool = True
    micro_batch_size: int = Field(default=32, ge=1)
    threads: int = Field(default=1, ge=1)
    show_progress: bool = False


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    seconds: float = 0.0


class TrainReport(BaseModel):
    task: Task
    metric_name: str
    epochs: List[EpochRecord] = []
    best_epoch: Optional[int] = None

    def to_csv(self, include_timings: bool = False) -> str:
        header = ["epoch", "train_loss", "val_loss", "val_metric"]
        if include_timings:
            header.append("seconds")
        lines = [",".join(header)]
        for record in self.epochs:
            row = [str(record.epoch), repr(record.train_loss), repr(record.val_loss), repr(record.val_metric)]
            if include_timings:
                row.append(f"{record.seconds:.3f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def summary(self, include_timings: bool = False) -> Dict:
        exclude = None if include_timings else {"epochs": {"__all__": {"seconds"}}}
        return self.model_dump(mode="json", exclude=exclude)


class PrefixGroupResult(BaseModel):
    count: int
    metrics: Dict[str, float]


class EvalReport(BaseModel):
    task: Task
    headline: str
    per_k: Dict[int, PrefixGroupResult]
    averaged: Dict[str, float]
    overall: Dict[str, float]

    def to_csv(self) -> str:
        names = sorted(self.overall)
        lines = [",".join(["k", "count", *names])]
        for k in sorted(self.per_k):
            group = self.per_k[k]
            lines.append(",".join([str(k), str(group.count), *(repr(group.metrics[n]) for n in names)]))
        return "\n".join(lines) + "\n"


class DatasetSummary(BaseModel):
    source_name: str
    cases: int
    events: int
    activities: int
    max_case_length: int
    avg_case_length: float
    max_duration_days: float
    avg_duration_days: float
    train_traces: int = 0
    test_traces: int = 0
    train_samples: int = 0
    test_samples: int = 0
    skipped_short_traces: int = 0
    max_len: int = 0


class RunConfig(BaseModel):
    """Merged view of flags, config file and environment for one CLI run."""

    model_config = ConfigDict(extra="forbid")

    command: str
    log: Optional[Path] = None
    data: Optional[Path] = None
    model: Optional[Path] = None
    out: Path = Path("out")

    case_col: str = "case:concept:name"
    activity_col: str = "concept:name"
    time_col: str = "time:timestamp"
    time_format: str = "ISO8601"

    task: Task = Task.NEXT_ACTIVITY
    epochs: int = Field(default=100, ge=0)
    lr: float = Field(default=1e-2, ge=0.0)
    batch_size: int = Field(default=128, ge=1)
    heads: int = Field(default=4, ge=1)
    embed_dim: int = Field(default=36, ge=1)
    max_len: Optional[int] = Field(default=None, ge=1)
    seed: int = 42
    threads: int = Field(default=1, ge=1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    split: str = "test"

    prefix: Optional[str] = None
    timestamps: Optional[str] = None
    top_k: int = Field(default=5, ge=1)

    class_weighting: bool = True
    timings: bool = False
    verbose: bool = False
    quiet: bool = False

    @field_validator("split")
    @classmethod
    def _known_split(cls, value: str) -> str:
        if value not in ("test", "all"):
            raise ValueError("split must be 'test' or 'all'")
        return value

    @field_validator("log", "data", "model")
    @classmethod
    def _exists_when_given(cls, value: Optional[Path], info) -> Optional[Path]:
        # the model path is an output of `train`, so it is only checked when read
        if value is not None and info.field_name != "model" and not value.exists():
            raise ValueError(f"{info.field_name} path does not exist: {value}")
        return value

    def column_mapping(self) -> ColumnMapping:
        return ColumnMapping(
            case_column=self.case_col,
            activity_column=self.activity_col,
            timestamp_column=self.time_col,
            timestamp_format=self.time_format,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            threads=self.threads,
            class_weighting=self.class_weighting,
            show_progress=not self.quiet,
        )

    def build_model_config(self, vocab_size: int, max_len: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            max_len=self.max_len or max_len,
            embed_dim=self.embed_dim,
            num_heads=self.heads,
            task=self.task,
            seed=self.seed,
        )
