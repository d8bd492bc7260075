"""Task models: backbone + head + collation for each supported task type.

Every task model is an nn.Module exposing a uniform surface the trainer and
evaluation loop drive:

    prepare(examples)   -> training items (identity for most tasks)
    collate(items)      -> batch dict of tensors
    loss_sum(batch)     -> (summed loss, number of loss units)
    predict_batch(batch)-> per-item predictions
    metrics(preds, items) -> {metric: value}, including self.primary_metric

Loss sums (never means) let gradient accumulation divide by the logical
batch's unit count, making micro-batch splits mathematically equivalent.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbone import TransformerBackbone, TransformerLM, lm_loss_sum
from .config import ModelConfig
from .data import (
    DEFAULT_EXTRACTIVE_PATTERN,
    Example,
    PromptTemplate,
    apply_template,
    build_extractive_instruction,
    collate_classification,
    collate_masked_prompt,
    pad_batch,
    resolve_template,
)
from .heads import (
    ClsHead,
    GlobalPointerHead,
    MultiChoiceHead,
    SpanPrediction,
    TokenLabelHead,
    Verbalizer,
    decode_spans,
    global_pointer_loss,
    multichoice_logits,
    spans_to_grid,
    token_label_loss_sum,
    verbalizer_predict,
)
from .metrics import accuracy, exact_match, macro_f1, matthews, span_f1
from .tokenizer import Tokenizer

MULTICHOICE_SEP = " ||| "


def token_span_for_chars(offsets, start: int, end: int):
    """Inclusive token range whose character extent is exactly [start, end)."""
    tok_start = tok_end = None
    for i, sp in enumerate(offsets):
        if sp is None:
            continue
        if sp[0] == start:
            tok_start = i
        if sp[1] == end:
            tok_end = i
    if tok_start is None or tok_end is None or tok_end < tok_start:
        return None
    return tok_start, tok_end


class TaskModel(nn.Module):
    """Base for all task composites."""

    task_type: str = ""
    primary_metric: str = "accuracy"

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer, options: dict):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.options = dict(options)
        self.max_len = int(options.get("max_seq_length", config.max_seq_len))

    # -- uniform surface ----------------------------------------------------

    @property
    def backbone(self) -> TransformerBackbone:
        raise NotImplementedError

    def prepare(self, examples: list[Example]) -> list:
        return list(examples)

    def collate(self, items: list) -> dict:
        raise NotImplementedError

    def loss_sum(self, batch: dict) -> tuple[torch.Tensor, int]:
        raise NotImplementedError

    def predict_batch(self, batch: dict) -> list:
        raise NotImplementedError

    def metrics(self, preds: list, items: list) -> dict[str, float]:
        raise NotImplementedError

    def task_dict(self) -> dict:
        return {"task_type": self.task_type, "options": self.options}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


class _ClassificationMixin:
    """Shared prediction/metric logic for single-label classification."""

    def class_logits(self, batch: dict) -> torch.Tensor:
        raise NotImplementedError

    def predict_probs(self, batch: dict) -> torch.Tensor:
        return torch.softmax(self.class_logits(batch), dim=-1)

    def loss_sum(self, batch):
        logits = self.class_logits(batch)
        loss = nn.functional.cross_entropy(logits, batch["labels"], reduction="sum")
        return loss, int(batch["labels"].numel())

    def predict_batch(self, batch):
        return self.class_logits(batch).argmax(dim=-1).tolist()

    def metrics(self, preds, items):
        refs = [int(ex.label) for ex in items]
        out = {"accuracy": accuracy(preds, refs), "macro_f1": macro_f1(preds, refs)}
        if self.options.get("matthews"):
            out["matthews"] = matthews(preds, refs)
        return out


class HeadClsModel(_ClassificationMixin, TaskModel):
    """Linear classifier over the [BOS] representation."""

    task_type = "head_cls"
    primary_metric = "accuracy"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        self.encoder = TransformerBackbone(config, dtype=dtype)
        self.head = ClsHead(config.hidden_size, int(options["num_labels"]), seed=config.seed)
        if dtype is not None:
            self.head.to(dtype)

    @property
    def backbone(self):
        return self.encoder

    def collate(self, items):
        return collate_classification(items, self.tokenizer, self.max_len)

    def class_logits(self, batch):
        hidden = self.encoder(batch["ids"], batch["attention_mask"])
        return self.head(hidden)


class MaskedPromptModel(_ClassificationMixin, TaskModel):
    """Cloze-style classification through the LM head and a verbalizer."""

    task_type = "masked_prompt_cls"
    primary_metric = "accuracy"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        if config.architecture != "encoder":
            raise ValueError("masked-prompt classification requires an encoder")
        self.lm = TransformerLM(config, dtype=dtype)
        self.template = PromptTemplate(resolve_template(options["template"]))
        if not self.template.has_mask:
            raise ValueError("masked-prompt template needs a {mask} slot")
        label_words = {int(k): v for k, v in options["label_words"].items()}
        self.verbalizer = Verbalizer.build(label_words, tokenizer)

    @property
    def backbone(self):
        return self.lm.backbone

    def collate(self, items):
        return collate_masked_prompt(items, self.template, self.tokenizer, self.max_len)

    def class_logits(self, batch):
        logits = self.lm.mlm_logits(batch["ids"], batch["attention_mask"])
        return verbalizer_predict(logits, batch["mask_positions"], self.verbalizer)


class TokenClsModel(TaskModel):
    """Per-token labeling; label 0 is 'outside', span types map to 1..T."""

    task_type = "token_cls"
    primary_metric = "accuracy"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        self.types: list[str] = list(options["types"])
        self.encoder = TransformerBackbone(config, dtype=dtype)
        self.head = TokenLabelHead(config.hidden_size, len(self.types) + 1, seed=config.seed)
        if dtype is not None:
            self.head.to(dtype)

    @property
    def backbone(self):
        return self.encoder

    def _labels_for(self, ex: Example, offsets) -> list[int]:
        labels = []
        for sp in offsets:
            if sp is None:
                labels.append(-100)
                continue
            lab = 0
            for gold in ex.spans:
                if gold.type in self.types and gold.start <= sp[0] and sp[1] <= gold.end:
                    lab = self.types.index(gold.type) + 1
                    break
            labels.append(lab)
        return labels

    def collate(self, items):
        seqs, labels = [], []
        for ex in items:
            ids, offsets = self.tokenizer.encode_with_offsets(ex.text_a)
            ids, offsets = ids[: self.max_len], offsets[: self.max_len]
            seqs.append(ids)
            labels.append(self._labels_for(ex, offsets))
        ids, mask = pad_batch(seqs, self.tokenizer.pad_id)
        lab = torch.full(ids.shape, -100, dtype=torch.long)
        for i, row in enumerate(labels):
            lab[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        return {"ids": ids, "attention_mask": mask, "labels": lab}

    def loss_sum(self, batch):
        logits = self.head(self.encoder(batch["ids"], batch["attention_mask"]))
        return token_label_loss_sum(logits, batch["labels"])

    def predict_batch(self, batch):
        logits = self.head(self.encoder(batch["ids"], batch["attention_mask"]))
        pred = logits.argmax(dim=-1)
        out = []
        for i in range(pred.shape[0]):
            keep = batch["labels"][i] != -100
            out.append((pred[i][keep].tolist(), batch["labels"][i][keep].tolist()))
        return out

    def metrics(self, preds, items):
        flat_p = [p for row, _ in preds for p in row]
        flat_r = [r for _, refs in preds for r in refs]
        return {"accuracy": accuracy(flat_p, flat_r), "macro_f1": macro_f1(flat_p, flat_r)}


class GlobalPointerModel(TaskModel):
    """Span extraction over all (start, end) pairs, one scorer per type."""

    task_type = "global_pointer"
    primary_metric = "f1"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        self.types: list[str] = list(options["types"])
        self.threshold = float(options.get("threshold", 0.0))
        self.encoder = TransformerBackbone(config, dtype=dtype)
        self.head = GlobalPointerHead(config.hidden_size, len(self.types), seed=config.seed)
        if dtype is not None:
            self.head.to(dtype)

    @property
    def backbone(self):
        return self.encoder

    def gold_token_spans(self, ex: Example, offsets, kept: int | None = None):
        """Token-coordinate gold spans; spans cut off by truncation are dropped.

        A span that does not sit on token boundaries in the full text is a
        data error and raises.
        """
        kept = len(offsets) if kept is None else kept
        out = []
        for gold in ex.spans:
            if gold.type not in self.types:
                continue
            tok = token_span_for_chars(offsets, gold.start, gold.end)
            if tok is None:
                raise ValueError(
                    f"example {ex.id}: span chars [{gold.start}, {gold.end}) do not "
                    "align to token boundaries"
                )
            if tok[1] < kept:
                out.append((self.types.index(gold.type), tok[0], tok[1]))
        return out

    def collate(self, items):
        seqs, gold = [], []
        for ex in items:
            ids, offsets = self.tokenizer.encode_with_offsets(ex.text_a)
            kept = min(len(ids), self.max_len)
            seqs.append(ids[:kept])
            gold.append(self.gold_token_spans(ex, offsets, kept))
        ids, mask = pad_batch(seqs, self.tokenizer.pad_id)
        grid = spans_to_grid(gold, len(self.types), ids.shape[1])
        return {"ids": ids, "attention_mask": mask, "gold_grid": grid, "gold_spans": gold}

    def scores(self, batch):
        hidden = self.encoder(batch["ids"], batch["attention_mask"])
        return self.head(hidden, batch["attention_mask"])

    def loss_sum(self, batch):
        loss = global_pointer_loss(self.scores(batch), batch["gold_grid"])
        return loss, int(batch["ids"].shape[0])

    def predict_batch(self, batch):
        preds = decode_spans(self.scores(batch), batch["attention_mask"], self.threshold)
        return [(p, g) for p, g in zip(preds, batch["gold_spans"])]

    def metrics(self, preds, items):
        predicted = [[(s.type_id, s.start, s.end) for s in p] for p, _ in preds]
        gold = [list(g) for _, g in preds]
        return span_f1(predicted, gold)


class MultiChoiceModel(TaskModel):
    """Choice ranking: each (context, choice) pair is scored independently."""

    task_type = "multichoice"
    primary_metric = "accuracy"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        self.num_choices = int(options["num_choices"])
        if self.num_choices < 2:
            raise ValueError("multichoice needs at least 2 choices")
        self.encoder = TransformerBackbone(config, dtype=dtype)
        self.head = MultiChoiceHead(config.hidden_size, seed=config.seed)
        if dtype is not None:
            self.head.to(dtype)

    @property
    def backbone(self):
        return self.encoder

    def collate(self, items):
        seqs, labels = [], []
        for ex in items:
            if ex.text_b is None:
                raise ValueError(f"example {ex.id}: multichoice needs choices in text_b")
            choices = ex.text_b.split(MULTICHOICE_SEP)
            if len(choices) != self.num_choices:
                raise ValueError(
                    f"example {ex.id}: expected {self.num_choices} choices, got {len(choices)}"
                )
            for c in choices:
                seqs.append(self.tokenizer.encode(ex.text_a, pair=c)[: self.max_len])
            labels.append(int(ex.label) if ex.label is not None else -1)
        ids, mask = pad_batch(seqs, self.tokenizer.pad_id)
        return {
            "ids": ids,
            "attention_mask": mask,
            "labels": torch.tensor(labels, dtype=torch.long),
        }

    def class_logits(self, batch):
        scores = self.head(self.encoder(batch["ids"], batch["attention_mask"]))
        return multichoice_logits(scores, self.num_choices)

    def predict_probs(self, batch):
        return torch.softmax(self.class_logits(batch), dim=-1)

    def loss_sum(self, batch):
        logits = self.class_logits(batch)
        loss = nn.functional.cross_entropy(logits, batch["labels"], reduction="sum")
        return loss, int(batch["labels"].numel())

    def predict_batch(self, batch):
        return self.class_logits(batch).argmax(dim=-1).tolist()

    def metrics(self, preds, items):
        refs = [int(ex.label) for ex in items]
        return {"accuracy": accuracy(preds, refs)}


class ClmGenerationModel(TaskModel):
    """Causal LM: text_a is the prompt, label is the gold continuation."""

    task_type = "clm_generation"
    primary_metric = "exact_match"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        if config.architecture != "decoder":
            raise ValueError("generation requires a decoder backbone")
        self.lm = TransformerLM(config, dtype=dtype)
        self.max_new = int(options.get("max_new", 20))

    @property
    def backbone(self):
        return self.lm.backbone

    def _encode(self, ex: Example) -> tuple[list[int], list[int]]:
        prompt = [self.tokenizer.bos_id] + [
            self.tokenizer.lookup(w) for w in self.tokenizer.tokenize(ex.text_a)
        ]
        cont = []
        if ex.label is not None:
            cont = [self.tokenizer.lookup(w) for w in self.tokenizer.tokenize(str(ex.label))]
        return prompt, cont + [self.tokenizer.eos_id]

    def collate(self, items):
        seqs, labels = [], []
        for ex in items:
            prompt, cont = self._encode(ex)
            full = (prompt + cont)[: self.max_len]
            row = [-100] * len(full)
            for t in range(len(prompt) - 1, len(full) - 1):
                row[t] = full[t + 1]  # predict continuation tokens only
            seqs.append(full)
            labels.append(row)
        ids, mask = pad_batch(seqs, self.tokenizer.pad_id)
        lab = torch.full(ids.shape, -100, dtype=torch.long)
        for i, row in enumerate(labels):
            lab[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        return {"ids": ids, "attention_mask": mask, "labels": lab}

    def loss_sum(self, batch):
        logits = self.lm.logits(batch["ids"], batch["attention_mask"])
        s = lm_loss_sum(logits, batch["labels"])
        return s.loss, s.num_targets

    def predict_batch(self, batch):
        # generation is driven from raw prompts in metrics(); nothing batched here
        return [None] * int(batch["ids"].shape[0])

    def generate_text(self, prompt: str) -> str:
        prefix = [self.tokenizer.bos_id] + [
            self.tokenizer.lookup(w) for w in self.tokenizer.tokenize(prompt)
        ]
        out = self.lm.generate(prefix, self.max_new, self.tokenizer.eos_id)
        return self.tokenizer.decode(out[len(prefix) :])

    def metrics(self, preds, items):
        gens = [self.generate_text(ex.text_a) for ex in items]
        refs = [str(ex.label) for ex in items]
        return {"exact_match": exact_match(gens, refs)}


class ExtractiveInstructionModel(TaskModel):
    """Universal extraction: instruction-wrapped text + single-type pointer.

    prepare() expands each example into one instruction item per entity type
    present (positives) plus a deterministic absent-type negative per
    positive, so the model also learns to predict nothing.
    """

    task_type = "extractive_instruction"
    primary_metric = "f1"

    def __init__(self, config, tokenizer, options, dtype=None):
        super().__init__(config, tokenizer, options)
        self.types: list[str] = list(options["types"])
        if not self.types:
            raise ValueError("extractive instruction task needs entity types")
        self.pattern = options.get("pattern", DEFAULT_EXTRACTIVE_PATTERN)
        self.threshold = float(options.get("threshold", 0.0))
        self.encoder = TransformerBackbone(config, dtype=dtype)
        self.head = GlobalPointerHead(config.hidden_size, 1, seed=config.seed)
        if dtype is not None:
            self.head.to(dtype)

    @property
    def backbone(self):
        return self.encoder

    def prepare(self, examples):
        """(example, type) instruction items: positives + 1:1 negatives."""
        items = []
        for idx, ex in enumerate(examples):
            present = []
            for sp in ex.spans:
                if sp.type in self.types and sp.type not in present:
                    present.append(sp.type)
            absent = [t for t in self.types if t not in present]
            for j, t in enumerate(present):
                items.append((ex, t))
                if absent:
                    items.append((ex, absent[(idx + j) % len(absent)]))
            if not present and absent:
                items.append((ex, absent[idx % len(absent)]))
        return items

    def collate(self, items):
        seqs, gold, encs = [], [], []
        for ex, etype in items:
            enc = build_extractive_instruction(
                ex.text_a, etype, self.tokenizer, self.max_len, self.pattern
            )
            rows = []
            for sp in ex.spans:
                if sp.type != etype:
                    continue
                tok = enc.token_span_for_chars(sp.start, sp.end)
                if tok is None:
                    word_offsets = [
                        o for _, o in self.tokenizer.iter_tokens_with_offsets(ex.text_a)
                    ]
                    if token_span_for_chars(word_offsets, sp.start, sp.end) is not None:
                        continue  # aligned in the full text; lost to truncation
                    raise ValueError(
                        f"example {ex.id}: span chars [{sp.start}, {sp.end}) do not "
                        "align to token boundaries"
                    )
                rows.append((0, tok[0], tok[1]))
            seqs.append(enc.ids)
            gold.append(rows)
            encs.append(enc)
        ids, mask = pad_batch(seqs, self.tokenizer.pad_id)
        grid = spans_to_grid(gold, 1, ids.shape[1])
        return {
            "ids": ids,
            "attention_mask": mask,
            "gold_grid": grid,
            "gold_spans": gold,
            "encodings": encs,
        }

    def scores(self, batch):
        hidden = self.encoder(batch["ids"], batch["attention_mask"])
        return self.head(hidden, batch["attention_mask"])

    def loss_sum(self, batch):
        loss = global_pointer_loss(self.scores(batch), batch["gold_grid"])
        return loss, int(batch["ids"].shape[0])

    def predict_batch(self, batch):
        preds = decode_spans(self.scores(batch), batch["attention_mask"], self.threshold)
        return list(zip(preds, batch["gold_spans"]))

    def metrics(self, preds, items):
        predicted = [[(s.type_id, s.start, s.end) for s in p] for p, _ in preds]
        gold = [list(g) for _, g in preds]
        return span_f1(predicted, gold)


TASK_REGISTRY: dict[str, type[TaskModel]] = {
    "head_cls": HeadClsModel,
    "masked_prompt_cls": MaskedPromptModel,
    "token_cls": TokenClsModel,
    "global_pointer": GlobalPointerModel,
    "multichoice": MultiChoiceModel,
    "clm_generation": ClmGenerationModel,
    "extractive_instruction": ExtractiveInstructionModel,
}


def build_task_model(
    task_type: str,
    config: ModelConfig,
    tokenizer: Tokenizer,
    options: dict | None = None,
    dtype: torch.dtype | None = None,
) -> TaskModel:
    if task_type not in TASK_REGISTRY:
        raise ValueError(
            f"unknown task type {task_type!r}; expected one of {sorted(TASK_REGISTRY)}"
        )
    return TASK_REGISTRY[task_type](config, tokenizer, options or {}, dtype=dtype)
