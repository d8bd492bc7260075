"""Task heads that sit on top of backbone hidden states.

Each head owns its parameters and initializes them from a seed derived from
the backbone config seed plus a head-specific name, so full models remain
bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import NEG_INF, init_module_params
from .config import derive_seed


def _head_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, f"head:{name}"))


class ClsHead(nn.Module):
    """Linear classifier over the first-token ([BOS]) hidden state."""

    def __init__(self, hidden_size: int, num_labels: int, seed: int = 0):
        super().__init__()
        if num_labels < 2:
            raise ValueError("classification needs at least 2 labels")
        self.num_labels = num_labels
        self.proj = nn.Linear(hidden_size, num_labels)
        init_module_params(self, _head_generator(seed, "cls"))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """hidden [B, L, d] -> logits [B, num_labels]."""
        return self.proj(hidden[:, 0])


class Verbalizer:
    """Label -> vocabulary-word mapping for masked-prompt classification.

    Every label word must be a single in-vocabulary token; multi-word or
    unknown label words are configuration errors, rejected at build time.
    """

    def __init__(self, label_words: dict[int, list[str]], word_ids: dict[int, list[int]]):
        self.label_words = label_words
        self.word_ids = word_ids
        self.num_labels = len(label_words)

    @classmethod
    def build(cls, label_words: dict[int, list[str]], tokenizer) -> "Verbalizer":
        if sorted(label_words) != list(range(len(label_words))):
            raise ValueError("label ids must be contiguous from 0")
        word_ids: dict[int, list[int]] = {}
        for label, words in sorted(label_words.items()):
            if not words:
                raise ValueError(f"label {label} has no label words")
            ids = []
            for w in words:
                if len(w.split()) != 1:
                    raise ValueError(f"label word {w!r} is not a single token")
                if w not in tokenizer:
                    raise ValueError(f"label word {w!r} not in vocabulary")
                ids.append(tokenizer.lookup(w))
            word_ids[label] = ids
        return cls({k: list(v) for k, v in label_words.items()}, word_ids)


def verbalizer_predict(
    mlm_logits: torch.Tensor, mask_positions: torch.Tensor, verbalizer: Verbalizer
) -> torch.Tensor:
    """Class logits from vocabulary logits at each example's [MASK] slot.

    A label's logit is the mean over its label words' vocabulary logits.
    mlm_logits [B, L, V], mask_positions [B] -> [B, num_labels].
    """
    b = mlm_logits.shape[0]
    at_mask = mlm_logits[torch.arange(b), mask_positions]  # [B, V]
    cols = []
    for label in range(verbalizer.num_labels):
        ids = torch.tensor(verbalizer.word_ids[label])
        cols.append(at_mask[:, ids].mean(dim=-1))
    return torch.stack(cols, dim=-1)


@dataclass(frozen=True, order=True)
class SpanPrediction:
    type_id: int
    start: int
    end: int  # inclusive token index
    score: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, SpanPrediction):
            return NotImplemented
        return (self.type_id, self.start, self.end) == (other.type_id, other.start, other.end)

    def __hash__(self):
        return hash((self.type_id, self.start, self.end))


class GlobalPointerHead(nn.Module):
    """Span scorer: one bilinear map per span type over (start, end) pairs.

    score[b, t, i, j] = q_t(h_i) . k_t(h_j) / sqrt(hidden_size), with cells
    where j < i or either endpoint is padding forced to -inf.
    """

    def __init__(self, hidden_size: int, num_types: int, seed: int = 0):
        super().__init__()
        if num_types < 1:
            raise ValueError("need at least one span type")
        self.hidden_size = hidden_size
        self.num_types = num_types
        self.q_proj = nn.Linear(hidden_size, num_types * hidden_size)
        self.k_proj = nn.Linear(hidden_size, num_types * hidden_size)
        init_module_params(self, _head_generator(seed, "global_pointer"))

    def forward(self, hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        """hidden [B, L, d], mask [B, L] -> scores [B, num_types, L, L]."""
        b, l, d = hidden.shape
        q = self.q_proj(hidden).view(b, l, self.num_types, d).permute(0, 2, 1, 3)
        k = self.k_proj(hidden).view(b, l, self.num_types, d).permute(0, 2, 1, 3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        pad = attention_mask == 0
        scores = scores.masked_fill(pad[:, None, None, :], NEG_INF)  # end in pad
        scores = scores.masked_fill(pad[:, None, :, None], NEG_INF)  # start in pad
        lower = torch.tril(torch.ones(l, l, dtype=torch.bool), diagonal=-1)
        return scores.masked_fill(lower[None, None], NEG_INF)  # end before start


def global_pointer_loss(scores: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Multi-label span loss summed over (batch, type) groups.

    Per group: log(1 + sum_gold exp(-s)) + log(1 + sum_non_gold exp(+s)),
    computed via logsumexp with an appended zero for the constant 1.
    -inf cells (invalid geometry/padding) drop out of the negative term.
    """
    b, t = scores.shape[:2]
    flat = scores.reshape(b, t, -1)
    gold_flat = gold.reshape(b, t, -1).bool()
    pos = (-flat).masked_fill(~gold_flat, NEG_INF)  # gold cells contribute e^{-s}
    neg = flat.masked_fill(gold_flat, NEG_INF)  # everything else contributes e^{+s}
    zero = flat.new_zeros(b, t, 1)
    pos_term = torch.logsumexp(torch.cat([pos, zero], dim=-1), dim=-1)
    neg_term = torch.logsumexp(torch.cat([neg, zero], dim=-1), dim=-1)
    return (pos_term + neg_term).sum()


def decode_spans(
    scores: torch.Tensor, attention_mask: torch.Tensor, threshold: float = 0.0
) -> list[list[SpanPrediction]]:
    """Spans whose score exceeds threshold, sorted by (type, start, end)."""
    scores = scores.detach()
    preds: list[list[SpanPrediction]] = []
    for b in range(scores.shape[0]):
        rows: list[SpanPrediction] = []
        hits = (scores[b] > threshold).nonzero(as_tuple=False)
        for t, i, j in hits.tolist():
            rows.append(SpanPrediction(t, i, j, float(scores[b, t, i, j])))
        rows.sort(key=lambda s: (s.type_id, s.start, s.end))
        preds.append(rows)
    return preds


def spans_to_grid(
    spans: list[list[tuple[int, int, int]]], num_types: int, seq_len: int
) -> torch.Tensor:
    """Gold (type, start, end) triples -> dense 0/1 grid [B, T, L, L]."""
    grid = torch.zeros(len(spans), num_types, seq_len, seq_len)
    for b, rows in enumerate(spans):
        for t, i, j in rows:
            if not (0 <= t < num_types and 0 <= i <= j < seq_len):
                raise ValueError(f"span ({t}, {i}, {j}) out of range")
            grid[b, t, i, j] = 1.0
    return grid


class TokenLabelHead(nn.Module):
    """Per-token linear classifier (sequence labeling)."""

    def __init__(self, hidden_size: int, num_labels: int, seed: int = 0):
        super().__init__()
        if num_labels < 2:
            raise ValueError("labeling needs at least 2 labels")
        self.num_labels = num_labels
        self.proj = nn.Linear(hidden_size, num_labels)
        init_module_params(self, _head_generator(seed, "token_label"))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """hidden [B, L, d] -> logits [B, L, num_labels]."""
        return self.proj(hidden)


def token_label_loss_sum(logits: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Summed cross-entropy over non-ignored (-100) token positions."""
    keep = labels != -100
    n = int(keep.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    return (
        torch.nn.functional.cross_entropy(logits[keep], labels[keep], reduction="sum"),
        n,
    )


class MultiChoiceHead(nn.Module):
    """Scores each (context, choice) encoding with a single scalar."""

    def __init__(self, hidden_size: int, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(hidden_size, 1)
        init_module_params(self, _head_generator(seed, "multichoice"))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        """hidden [B*C, L, d] -> scalar score per encoding [B*C]."""
        return self.proj(hidden[:, 0]).squeeze(-1)


def multichoice_logits(scores: torch.Tensor, num_choices: int) -> torch.Tensor:
    """Flat per-encoding scores [B*C] -> choice logits [B, C]."""
    if scores.numel() % num_choices:
        raise ValueError("score count not divisible by num_choices")
    return scores.view(-1, num_choices)


def prototype_classify(
    support: torch.Tensor, support_labels: torch.Tensor, queries: torch.Tensor
) -> torch.Tensor:
    """Nearest-prototype labels; ties go to the smallest class id.

    Prototypes are per-class means of support vectors; queries are assigned
    by squared euclidean distance.
    """
    classes = sorted(set(support_labels.tolist()))
    protos = torch.stack([support[support_labels == c].mean(dim=0) for c in classes])
    d2 = ((queries[:, None, :] - protos[None, :, :]) ** 2).sum(dim=-1)
    idx = d2.argmin(dim=-1)  # argmin returns first minimum: smallest class id wins ties
    lut = torch.tensor(classes)
    return lut[idx]
