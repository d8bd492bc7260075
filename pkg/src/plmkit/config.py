"""Model configuration and deterministic seed plumbing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path


class DropoutMode(Enum):
    """How dropout layers behave during a forward pass.

    TRAIN: masks sampled from the model's seeded stream, gradients flow.
    EVAL: dropout disabled; repeated passes on the same input are bit-identical.
    MC_INFERENCE: masks resampled per pass (for Monte Carlo uncertainty) while
    the caller runs under no_grad. Kept distinct from TRAIN so stochastic
    inference is auditable.
    """

    TRAIN = "train"
    EVAL = "eval"
    MC_INFERENCE = "mc_inference"


@dataclass
class ModelConfig:
    """Hyperparameters of the small transformer backbone."""

    vocab_size: int
    hidden_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 128
    dropout_p: float = 0.1
    architecture: str = "encoder"  # "encoder" | "decoder"
    seed: int = 42
    ff_dim: int | None = None  # defaults to 4*hidden_size

    def __post_init__(self):
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if self.hidden_size <= 0 or self.num_layers <= 0 or self.max_seq_len <= 0:
            raise ValueError("hidden_size, num_layers and max_seq_len must be positive")
        if self.num_heads <= 0 or self.hidden_size % self.num_heads != 0:
            raise ValueError("num_heads must be positive and divide hidden_size")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.architecture not in ("encoder", "decoder"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.ff_dim is None:
            self.ff_dim = 4 * self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_seed(base_seed: int, name: str) -> int:
    """Derive a stable 63-bit sub-stream seed from a base seed and a label.

    Components (heads, dropout streams, per-epoch shuffles, MC passes) each get
    their own stream so adding one consumer never shifts another's draws.
    """
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
