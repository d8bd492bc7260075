"""Parameter-efficient tuning: freezing, LoRA, adapters, prefix vectors, BitFit.

Every strategy is applied to an already-built model and reports exact
trainable/total parameter counts. LoRA and adapters are injection-neutral:
immediately after injection the model's outputs are unchanged (LoRA's up
matrix and the adapter's up projection start at zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .backbone import INIT_STD, PrefixParams, TransformerBackbone
from .config import derive_seed


@dataclass
class TuningPlan:
    """What to train. strategy in {"full", "freeze", "lora", "adapter", "prefix", "bitfit"}."""

    strategy: str = "full"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    adapter_dim: int = 16
    prefix_len: int = 8

    STRATEGIES = ("full", "freeze", "lora", "adapter", "prefix", "bitfit")

    def __post_init__(self):
        if self.strategy not in self.STRATEGIES:
            raise ValueError(f"unknown tuning strategy {self.strategy!r}")
        if self.lora_rank < 1 or self.adapter_dim < 1 or self.prefix_len < 1:
            raise ValueError("tuning dimensions must be positive")


@dataclass
class ParamReport:
    total: int
    trainable: int
    by_group: dict[str, int] = field(default_factory=dict)

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0


def count_parameters(model: nn.Module) -> ParamReport:
    """Exact parameter accounting, grouped by top-level child name."""
    total = trainable = 0
    by_group: dict[str, int] = {}
    for name, p in model.named_parameters():
        n = p.numel()
        total += n
        if p.requires_grad:
            trainable += n
        group = name.split(".")[0]
        by_group[group] = by_group.get(group, 0) + n
    return ParamReport(total, trainable, by_group)


def freeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def unfreeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(True)


class LoRALinear(nn.Module):
    """Linear layer wrapped with a rank-r additive update.

    forward(x) = base(x) + (alpha / r) * B(A(x)); A ~ normal(0, 0.02),
    B = 0, so injection changes nothing until training moves B.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(
            torch.empty(rank, base.in_features, dtype=base.weight.dtype)
        )
        self.lora_b = nn.Parameter(
            torch.zeros(base.out_features, rank, dtype=base.weight.dtype)
        )
        with torch.no_grad():
            self.lora_a.normal_(0.0, INIT_STD, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T @ self.lora_b.T) * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)


def apply_lora(backbone: TransformerBackbone, plan: TuningPlan) -> None:
    """Freeze the backbone; wrap every q_proj/v_proj with trainable LoRA."""
    freeze_module(backbone)
    gen = torch.Generator().manual_seed(derive_seed(backbone.config.seed, "peft:lora"))
    for layer in backbone.layers:
        layer.attn.q_proj = LoRALinear(layer.attn.q_proj, plan.lora_rank, plan.lora_alpha, gen)
        layer.attn.v_proj = LoRALinear(layer.attn.v_proj, plan.lora_rank, plan.lora_alpha, gen)


def merge_lora(backbone: TransformerBackbone) -> None:
    """Fold LoRA updates into the base weights and drop the wrappers."""
    with torch.no_grad():
        for layer in backbone.layers:
            for attr in ("q_proj", "v_proj"):
                mod = getattr(layer.attn, attr)
                if isinstance(mod, LoRALinear):
                    mod.base.weight.copy_(mod.merged_weight())
                    setattr(layer.attn, attr, mod.base)


class Adapter(nn.Module):
    """Bottleneck residual block: down-project, ReLU, up-project.

    The up projection starts at zero so a fresh adapter is the identity
    in the surrounding residual (x + adapter(x) == x).
    """

    def __init__(self, hidden_size: int, adapter_dim: int, generator: torch.Generator,
                 dtype: torch.dtype):
        super().__init__()
        self.down = nn.Linear(hidden_size, adapter_dim)
        self.up = nn.Linear(adapter_dim, hidden_size)
        with torch.no_grad():
            self.down.weight.normal_(0.0, INIT_STD, generator=generator)
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(torch.relu(self.down(x)))


def apply_adapter(backbone: TransformerBackbone, plan: TuningPlan) -> None:
    """Freeze the backbone; add one adapter after each attn and ffn sublayer."""
    freeze_module(backbone)
    gen = torch.Generator().manual_seed(derive_seed(backbone.config.seed, "peft:adapter"))
    d = backbone.config.hidden_size
    dt = backbone.param_dtype
    for layer in backbone.layers:
        layer.attn_adapter = Adapter(d, plan.adapter_dim, gen, dt)
        layer.ffn_adapter = Adapter(d, plan.adapter_dim, gen, dt)


def apply_prefix(backbone: TransformerBackbone, plan: TuningPlan) -> None:
    """Freeze the backbone; attach trainable per-layer K/V prefix vectors.

    Prefixes consume attention slots: sequences longer than
    max_seq_len - prefix_len are rejected at encode time. Unlike LoRA and
    adapters, injection changes outputs immediately (each position now
    attends over the extra keys).
    """
    cfg = backbone.config
    if plan.prefix_len >= cfg.max_seq_len:
        raise ValueError("prefix_len must leave room for at least one real token")
    freeze_module(backbone)
    prefix = PrefixParams(cfg.num_layers, plan.prefix_len, cfg.hidden_size)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "peft:prefix"))
    with torch.no_grad():
        prefix.keys.normal_(0.0, INIT_STD, generator=gen)
        prefix.values.normal_(0.0, INIT_STD, generator=gen)
    prefix.to(backbone.param_dtype)
    backbone.prefix = prefix


def apply_bitfit(backbone: TransformerBackbone) -> None:
    """Freeze everything except bias vectors."""
    for name, p in backbone.named_parameters():
        p.requires_grad_(name.endswith(".bias"))


def apply_tuning(backbone: TransformerBackbone, plan: TuningPlan,
                 head: nn.Module | None = None) -> ParamReport:
    """Apply a tuning strategy; the head (if any) always stays trainable.

    Returns the parameter report for the combined (backbone + head) set.
    """
    if plan.strategy == "full":
        unfreeze_module(backbone)
    elif plan.strategy == "freeze":
        freeze_module(backbone)
    elif plan.strategy == "lora":
        apply_lora(backbone, plan)
    elif plan.strategy == "adapter":
        apply_adapter(backbone, plan)
    elif plan.strategy == "prefix":
        apply_prefix(backbone, plan)
    elif plan.strategy == "bitfit":
        apply_bitfit(backbone)
    if head is not None:
        unfreeze_module(head)
        holder = nn.ModuleDict({"backbone": backbone, "head": head})
        return count_parameters(holder)
    return count_parameters(backbone)


PEFT_NAME_PARTS = {"lora_a", "lora_b", "attn_adapter", "ffn_adapter", "prefix"}


def is_peft_param(name: str) -> bool:
    return bool(PEFT_NAME_PARTS.intersection(name.split(".")))


def peft_parameters(module: nn.Module) -> dict[str, torch.Tensor]:
    """Named tensors introduced by PEFT injection (for slim checkpoints)."""
    return {
        name: p.detach() for name, p in module.named_parameters() if is_peft_param(name)
    }


def expected_lora_params(backbone: TransformerBackbone, plan: TuningPlan) -> int:
    """r * (d_in + d_out) per wrapped projection (q and v in every layer)."""
    d = backbone.config.hidden_size
    return backbone.config.num_layers * 2 * plan.lora_rank * (d + d)


def expected_adapter_params(backbone: TransformerBackbone, plan: TuningPlan) -> int:
    d, m = backbone.config.hidden_size, plan.adapter_dim
    per_adapter = d * m + m + m * d + d
    return backbone.config.num_layers * 2 * per_adapter


def expected_prefix_params(backbone: TransformerBackbone, plan: TuningPlan) -> int:
    return 2 * backbone.config.num_layers * plan.prefix_len * backbone.config.hidden_size
