"""Named experiment presets: a task definition plus model and train configs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import tasks
from .model import ModelConfig
from .tasks import Batch
from .training import BatchSource, TrainConfig, WindowSource

TASK_KINDS = ("varass", "copy", "parity", "lm")
EVAL_INDEX = 10**9  # stream index reserved for held-out evaluation samples
TUNE_INDEX = 10**9 + 1


@dataclass(frozen=True)
class TaskDef:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")

    # -- shapes -----------------------------------------------------------------
    def varass_spec(self) -> tasks.VarAssignSpec:
        keys = ("num_vars", "num_values", "num_assignments", "ood_num_values")
        return tasks.VarAssignSpec(**{k: self.params[k] for k in keys if k in self.params})

    def copy_spec(self) -> tasks.CopySpec:
        return tasks.CopySpec(**{k: self.params[k] for k in ("max_len", "num_symbols") if k in self.params})

    @property
    def parity_length(self) -> int:
        return int(self.params.get("length", 50))

    def dims(self) -> tuple[int, int]:
        """(context_size, vocab_size) the model must have for this task."""
        if self.kind == "varass":
            s = self.varass_spec()
            return s.seq_len, s.vocab_size
        if self.kind == "copy":
            s = self.copy_spec()
            return s.context_size, s.vocab_size
        if self.kind == "parity":
            return self.parity_length + 1, 4
        return int(self.params.get("context_size", 256)), tasks.BYTE_VOCAB

    @property
    def pad_id(self) -> int:
        return tasks.BYTE_PAD if self.kind == "lm" else tasks.PAD

    @property
    def default_metric(self) -> str:
        return {"varass": "answer_accuracy", "copy": "token_accuracy", "parity": "token_accuracy"}.get(self.kind, "log_perplexity")

    # -- data -------------------------------------------------------------------
    def _stream(self, seed: int, ood: bool = False) -> tasks.TaskStream:
        if self.kind == "varass":
            return tasks.varass_stream(self.varass_spec(), seed, ood=ood)
        if self.kind == "copy":
            return tasks.copy_stream(self.copy_spec(), seed)
        return tasks.parity_stream(self.parity_length, seed)

    def _corpus(self, data_paths=None) -> tuple[Batch, Batch]:
        paths = data_paths or self.params.get("paths")
        if not paths:
            raise ValueError("the lm task needs corpus file(s): pass --data PATH")
        for p in paths:
            if not Path(p).is_file():
                raise FileNotFoundError(f"corpus file not found: {p}")
        windows = tasks.load_corpus(paths, self.dims()[0])
        return tasks.split_corpus(windows, float(self.params.get("val_fraction", 0.1)), int(self.params.get("split_seed", 0)))

    def train_source(self, seed: int, data_paths=None) -> BatchSource:
        if self.kind == "lm":
            return WindowSource(self._corpus(data_paths)[0], seed)
        return self._stream(seed)

    def eval_set(self, count: int, seed: int = 0, ood: bool = False, data_paths=None) -> Batch:
        if ood and self.kind != "varass":
            raise ValueError("--ood only applies to the varass task")
        if self.kind == "lm":
            val = self._corpus(data_paths)[1]
            return val.subset(slice(0, count))
        return self._stream(seed, ood).sample_set(count, EVAL_INDEX)

    def tune_set(self, count: int, seed: int = 0, data_paths=None) -> Batch:
        if self.kind == "lm":
            train = self._corpus(data_paths)[0]
            return train.subset(slice(0, count))
        return self._stream(seed).sample_set(count, TUNE_INDEX)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskDef":
        unknown = set(data) - {"kind", "params"}
        if unknown:
            raise ValueError(f"unknown task field(s): {sorted(unknown)}")
        return cls(data["kind"], dict(data.get("params", {})))


@dataclass(frozen=True)
class Preset:
    task: TaskDef
    model: ModelConfig
    train: TrainConfig

    @property
    def metric(self) -> str:
        return self.task.default_metric

    def with_(self, **changes) -> "Preset":
        return replace(self, **changes)


def _make(task: TaskDef, d: int, train: TrainConfig) -> Preset:
    context, vocab = task.dims()
    return Preset(task, ModelConfig(d=d, context_size=context, vocab_size=vocab), train)


PRESETS = {
    "varass": _make(
        TaskDef("varass", {"num_vars": 3, "num_values": 1000, "num_assignments": 128, "ood_num_values": 2}),
        3,
        TrainConfig(steps=20000, batch_size=256, micro_batch_size=32, eval_every=500, eval_samples=512),
    ),
    "copy": _make(
        TaskDef("copy", {"max_len": 24, "num_symbols": 16}),
        3,
        TrainConfig(steps=20000, batch_size=64, eval_every=500, eval_samples=512),
    ),
    "parity": _make(
        TaskDef("parity", {"length": 50}),
        3,
        TrainConfig(steps=20000, batch_size=64, eval_every=500, eval_samples=512),
    ),
    "lm-tiny": _make(
        TaskDef("lm", {"context_size": 256, "val_fraction": 0.1}),
        4,
        TrainConfig(steps=30000, batch_size=32, eval_every=1000, eval_samples=256),
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
