"""plmkit: a small, fully deterministic transformer toolkit.

Seeded backbone + tokenizer, task heads (classification, cloze verbalizers,
labeling, span pointers, choice ranking), parameter-efficient tuning with
exact accounting, a reproducible trainer with JSONL tracking, Monte-Carlo
dropout self-training, and an instruction-driven universal extractor with a
CLI and HTTP service.
"""

from .config import DropoutMode, ModelConfig, derive_seed
from .tokenizer import Tokenizer, build_tokenizer
from .backbone import SeededDropout, TransformerBackbone, TransformerLM
from .data import Example, CharSpan, load_dataset
from .tasks import TaskModel, build_task_model
from .peft import TuningPlan, apply_tuning, count_parameters
from .training import TrainConfig, evaluate, load_task_model, save_task_model, train
from .semisup import mc_dropout_predict, select_confident, self_train
from . import synth  # noqa: F401  (registers the built-in datasets)

__version__ = "0.1.0"

__all__ = [
    "DropoutMode",
    "ModelConfig",
    "derive_seed",
    "Tokenizer",
    "build_tokenizer",
    "SeededDropout",
    "TransformerBackbone",
    "TransformerLM",
    "Example",
    "CharSpan",
    "load_dataset",
    "TaskModel",
    "build_task_model",
    "TuningPlan",
    "apply_tuning",
    "count_parameters",
    "TrainConfig",
    "train",
    "evaluate",
    "save_task_model",
    "load_task_model",
    "mc_dropout_predict",
    "select_confident",
    "self_train",
    "__version__",
]
