"""Small deterministic transformer backbone (encoder and decoder variants).

All randomness flows through explicit torch.Generator streams derived from
ModelConfig.seed, so two backbones built from equal configs are bit-identical
and training runs are reproducible on the same machine.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from .config import DropoutMode, ModelConfig, derive_seed

INIT_STD = 0.02
NEG_INF = float("-inf")


class _DropoutState:
    """Shared dropout mode + mask-sampling stream for one backbone."""

    __slots__ = ("mode", "generator")

    def __init__(self, seed: int):
        self.mode = DropoutMode.EVAL
        self.generator = torch.Generator().manual_seed(seed)


class SeededDropout(nn.Module):
    """Dropout driven by an explicit generator and a three-way mode.

    TRAIN and MC_INFERENCE sample masks from the shared stream; EVAL is the
    identity. Distinct from nn.Dropout so Monte-Carlo inference is auditable
    and never entangled with torch's global RNG.
    """

    def __init__(self, p: float, state: _DropoutState):
        super().__init__()
        self.p = float(p)
        self._state = state

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p <= 0.0 or self._state.mode is DropoutMode.EVAL:
            return x
        keep = 1.0 - self.p
        mask = torch.rand(x.shape, generator=self._state.generator, dtype=x.dtype) < keep
        return x * mask.to(x.dtype) / keep

    def extra_repr(self) -> str:
        return f"p={self.p}"


def init_module_params(module: nn.Module, generator: torch.Generator, std: float = INIT_STD) -> None:
    """Initialize weights in registration order from one seeded stream.

    Linear/Embedding weights ~ normal(0, std); biases zero; LayerNorm at
    identity. Overwrites torch's default init so nothing depends on the
    global RNG.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.Embedding):
                m.weight.normal_(0.0, std, generator=generator)
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


class PrefixParams(nn.Module):
    """Trainable per-layer key/value vectors prepended inside attention."""

    def __init__(self, num_layers: int, prefix_len: int, hidden_size: int):
        super().__init__()
        self.prefix_len = prefix_len
        self.keys = nn.Parameter(torch.empty(num_layers, prefix_len, hidden_size))
        self.values = nn.Parameter(torch.empty(num_layers, prefix_len, hidden_size))


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden_size: int, num_heads: int, dropout_p: float, state: _DropoutState):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.q_proj = nn.Linear(hidden_size, hidden_size)
        self.k_proj = nn.Linear(hidden_size, hidden_size)
        self.v_proj = nn.Linear(hidden_size, hidden_size)
        self.o_proj = nn.Linear(hidden_size, hidden_size)
        self.attn_dropout = SeededDropout(dropout_p, state)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        attn_bias: torch.Tensor,
        prefix_k: torch.Tensor | None = None,
        prefix_v: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, l, _ = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        if prefix_k is not None:
            p = prefix_k.shape[0]
            pk = prefix_k.view(p, self.num_heads, self.head_dim).permute(1, 0, 2)
            pv = prefix_v.view(p, self.num_heads, self.head_dim).permute(1, 0, 2)
            k = torch.cat([pk.unsqueeze(0).expand(b, -1, -1, -1), k], dim=2)
            v = torch.cat([pv.unsqueeze(0).expand(b, -1, -1, -1), v], dim=2)
            # prefix positions are always attendable
            attn_bias = torch.cat(
                [attn_bias.new_zeros(*attn_bias.shape[:-1], p), attn_bias], dim=-1
            )
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores + attn_bias, dim=-1)
        probs = self.attn_dropout(probs)
        out = (probs @ v).transpose(1, 2).reshape(b, l, -1)
        return self.o_proj(out)


class TransformerLayer(nn.Module):
    """Post-norm transformer block; adapter slots filled by PEFT injection."""

    def __init__(self, cfg: ModelConfig, state: _DropoutState):
        super().__init__()
        d = cfg.hidden_size
        self.attn = MultiHeadAttention(d, cfg.num_heads, cfg.dropout_p, state)
        self.attn_norm = nn.LayerNorm(d)
        self.attn_out_dropout = SeededDropout(cfg.dropout_p, state)
        self.ff_in = nn.Linear(d, cfg.ff_dim)
        self.ff_out = nn.Linear(cfg.ff_dim, d)
        self.ff_norm = nn.LayerNorm(d)
        self.ff_out_dropout = SeededDropout(cfg.dropout_p, state)
        self.attn_adapter: nn.Module | None = None
        self.ffn_adapter: nn.Module | None = None

    def forward(
        self,
        x: torch.Tensor,
        attn_bias: torch.Tensor,
        prefix_k: torch.Tensor | None = None,
        prefix_v: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.attn(x, attn_bias, prefix_k, prefix_v)
        x = self.attn_norm(x + self.attn_out_dropout(h))
        if self.attn_adapter is not None:
            x = x + self.attn_adapter(x)
        h = self.ff_out(torch.nn.functional.gelu(self.ff_in(x)))
        x = self.ff_norm(x + self.ff_out_dropout(h))
        if self.ffn_adapter is not None:
            x = x + self.ffn_adapter(x)
        return x


class TransformerBackbone(nn.Module):
    """Token/position embeddings plus a stack of attention layers.

    architecture == "decoder" applies a causal mask; "encoder" is fully
    bidirectional. PAD positions (attention_mask == 0) are never attended
    to by other positions.
    """

    def __init__(self, config: ModelConfig, dtype: torch.dtype | None = None):
        super().__init__()
        self.config = config
        self._dropout_state = _DropoutState(derive_seed(config.seed, "backbone:dropout"))
        d = config.hidden_size
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_seq_len, d)
        self.emb_norm = nn.LayerNorm(d)
        self.emb_dropout = SeededDropout(config.dropout_p, self._dropout_state)
        self.layers = nn.ModuleList(
            TransformerLayer(config, self._dropout_state) for _ in range(config.num_layers)
        )
        self.prefix: PrefixParams | None = None
        init_module_params(
            self, torch.Generator().manual_seed(derive_seed(config.seed, "backbone:init"))
        )
        if dtype is not None:
            self.to(dtype)

    # -- mode / rng plumbing -------------------------------------------------

    @property
    def mode(self) -> DropoutMode:
        return self._dropout_state.mode

    def set_mode(self, mode: DropoutMode) -> None:
        self._dropout_state.mode = mode
        self.train(mode is DropoutMode.TRAIN)

    def reseed_dropout(self, seed: int) -> None:
        """Restart the mask-sampling stream (one derived seed per MC pass)."""
        self._dropout_state.generator.manual_seed(seed)

    def attach_dropout_state(self, module: nn.Module) -> None:
        """Let head-side SeededDropout share this backbone's mode/stream."""
        for m in module.modules():
            if isinstance(m, SeededDropout):
                m._state = self._dropout_state

    @property
    def param_dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    # -- forward -------------------------------------------------------------

    def _attn_bias(self, attention_mask: torch.Tensor, L: int) -> torch.Tensor:
        bias = torch.zeros(
            attention_mask.shape[0], 1, L, L, dtype=self.param_dtype
        )
        key_pad = attention_mask[:, None, None, :] == 0
        bias = bias.masked_fill(key_pad, NEG_INF)
        if self.config.architecture == "decoder":
            causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
            bias = bias.masked_fill(causal[None, None], NEG_INF)
        return bias

    def forward(
        self,
        ids: torch.Tensor,
        attention_mask: torch.Tensor,
        mode: DropoutMode | None = None,
    ) -> torch.Tensor:
        """Contextual hidden states [B, L, hidden_size]."""
        if mode is not None:
            self.set_mode(mode)
        if ids.dim() != 2:
            raise ValueError("ids must be [batch, seq_len]")
        b, l = ids.shape
        prefix_len = self.prefix.prefix_len if self.prefix is not None else 0
        if l + prefix_len > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {l} plus prefix {prefix_len} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise ValueError("token id exceeds vocabulary")
        positions = torch.arange(l).unsqueeze(0).expand(b, l)
        x = self.tok_emb(ids) + self.pos_emb(positions)
        x = self.emb_dropout(self.emb_norm(x))
        bias = self._attn_bias(attention_mask, l)
        for i, layer in enumerate(self.layers):
            if self.prefix is not None:
                x = layer(x, bias, self.prefix.keys[i], self.prefix.values[i])
            else:
                x = layer(x, bias)
        return x


class LmLoss(NamedTuple):
    loss: torch.Tensor
    num_targets: int
    no_targets: bool  # warning flag: empty-sum convention hit


class TransformerLM(nn.Module):
    """Backbone plus a vocabulary projection head (MLM or CLM surface)."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype | None = None):
        super().__init__()
        self.backbone = TransformerBackbone(config, dtype=dtype)
        self.head = nn.Linear(config.hidden_size, config.vocab_size)
        init_module_params(
            self.head, torch.Generator().manual_seed(derive_seed(config.seed, "head:lm"))
        )
        if dtype is not None:
            self.head.to(dtype)

    @property
    def config(self) -> ModelConfig:
        return self.backbone.config

    def set_mode(self, mode: DropoutMode) -> None:
        self.backbone.set_mode(mode)

    def logits(
        self,
        ids: torch.Tensor,
        attention_mask: torch.Tensor,
        mode: DropoutMode | None = None,
    ) -> torch.Tensor:
        """Vocabulary logits [B, L, vocab_size] at every position."""
        return self.head(self.backbone(ids, attention_mask, mode))

    def mlm_logits(
        self,
        ids: torch.Tensor,
        attention_mask: torch.Tensor,
        mode: DropoutMode | None = None,
    ) -> torch.Tensor:
        if self.config.architecture != "encoder":
            raise ValueError("masked language modeling requires an encoder backbone")
        return self.logits(ids, attention_mask, mode)

    @torch.no_grad()
    def generate(self, prefix_ids: list[int], max_new: int, eos_id: int) -> list[int]:
        """Greedy continuation of prefix_ids; stops at eos_id or max_new tokens."""
        if self.config.architecture != "decoder":
            raise ValueError("generation requires a decoder backbone")
        if not prefix_ids:
            raise ValueError("empty prefix")
        if max_new < 0:
            raise ValueError("max_new must be >= 0")
        prev_mode = self.backbone.mode
        self.set_mode(DropoutMode.EVAL)
        try:
            out = list(prefix_ids)
            for _ in range(max_new):
                if len(out) >= self.config.max_seq_len:
                    break
                ids = torch.tensor([out], dtype=torch.long)
                mask = torch.ones_like(ids)
                next_id = int(self.logits(ids, mask)[0, -1].argmax())
                out.append(next_id)
                if next_id == eos_id:
                    break
            return out
        finally:
            self.set_mode(prev_mode)


def lm_loss_sum(logits: torch.Tensor, labels: torch.Tensor) -> LmLoss:
    """Summed cross-entropy over positions where labels != -100.

    Returns the sum (not mean) so gradient accumulation can divide by the
    logical-batch target count; num_targets == 0 yields loss 0 with the
    no_targets flag set.
    """
    target_mask = labels != -100
    n = int(target_mask.sum())
    if n == 0:
        return LmLoss(logits.sum() * 0.0, 0, True)
    loss = torch.nn.functional.cross_entropy(
        logits[target_mask], labels[target_mask], reduction="sum"
    )
    return LmLoss(loss, n, False)


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor) -> LmLoss:
    """Mean masked-LM loss over labelled (masked) positions."""
    s = lm_loss_sum(logits, labels)
    if s.no_targets:
        return s
    return LmLoss(s.loss / s.num_targets, s.num_targets, False)


def clm_shift_labels(ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    """Next-token targets for causal LM: labels[t] = ids[t+1], pads ignored."""
    labels = ids.clone()
    labels[attention_mask == 0] = -100
    labels = torch.cat(
        [labels[:, 1:], torch.full_like(labels[:, :1], -100)], dim=1
    )
    return labels
