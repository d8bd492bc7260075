"""Data processors: dataset IO, batching, prompt templates, instructions.

Datasets are JSONL with one example per line; knowledge bases are TSV
triples. Instruction builders keep token -> source-character offset maps so
span predictions made on an instruction can be projected back onto the raw
text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .tokenizer import Tokenizer

DATASET_REGISTRY: dict[str, Callable[[str], list["Example"]]] = {}


def register_dataset(name: str):
    def deco(fn):
        DATASET_REGISTRY[name] = fn
        return fn

    return deco


@dataclass
class CharSpan:
    """Character-offset span into an example's text_a; end is exclusive."""

    type: str
    start: int
    end: int

    def to_dict(self) -> dict:
        return {"type": self.type, "start": self.start, "end": self.end}


@dataclass
class Example:
    id: str
    text_a: str
    text_b: str | None = None
    label: int | str | None = None
    spans: list[CharSpan] = field(default_factory=list)

    def to_dict(self) -> dict:
        d: dict = {"id": self.id, "text_a": self.text_a}
        if self.text_b is not None:
            d["text_b"] = self.text_b
        if self.label is not None:
            d["label"] = self.label
        if self.spans:
            d["spans"] = [s.to_dict() for s in self.spans]
        return d


def _example_from_dict(d: dict, where: str) -> Example:
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected a JSON object")
    for key in ("id", "text_a"):
        if key not in d:
            raise ValueError(f"{where}: missing required field {key!r}")
    if not isinstance(d["text_a"], str):
        raise ValueError(f"{where}: text_a must be a string")
    spans = []
    for i, s in enumerate(d.get("spans") or []):
        try:
            spans.append(CharSpan(s["type"], int(s["start"]), int(s["end"])))
        except (KeyError, TypeError) as e:
            raise ValueError(f"{where}: bad span at index {i}: {e}") from e
        if spans[-1].start < 0 or spans[-1].end > len(d["text_a"]) or spans[-1].start >= spans[-1].end:
            raise ValueError(f"{where}: span {i} offsets out of range")
    return Example(
        id=str(d["id"]),
        text_a=d["text_a"],
        text_b=d.get("text_b"),
        label=d.get("label"),
        spans=spans,
    )


def load_jsonl(path: str | Path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path} line {lineno}: invalid JSON: {e}") from e
            examples.append(_example_from_dict(d, f"{path} line {lineno}"))
    return examples


def save_jsonl(examples: list[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")


def load_dataset(name_or_path: str, split: str = "train") -> list[Example]:
    """Load a registered synthetic dataset by name, or a JSONL file/dir.

    A directory is expected to hold <split>.jsonl; a file path is the split
    itself; a bare name consults the registry.
    """
    p = Path(name_or_path)
    if p.is_dir():
        f = p / f"{split}.jsonl"
        if not f.exists():
            raise FileNotFoundError(f"no {split}.jsonl under {p}")
        return load_jsonl(f)
    if p.is_file():
        return load_jsonl(p)
    if name_or_path in DATASET_REGISTRY:
        return DATASET_REGISTRY[name_or_path](split)
    raise ValueError(f"unknown dataset {name_or_path!r}: not a path or registered name")


# -- batching -----------------------------------------------------------------


def pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to the longest sequence; mask is 1 on real tokens."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), width, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = 1
    return ids, mask


def collate_classification(
    examples: list[Example], tokenizer: Tokenizer, max_len: int
) -> dict[str, torch.Tensor]:
    """Encode text_a (and text_b when present) plus integer labels."""
    seqs = []
    for ex in examples:
        ids = tokenizer.encode(ex.text_a, pair=ex.text_b)
        seqs.append(ids[:max_len])
    ids, mask = pad_batch(seqs, tokenizer.pad_id)
    out = {"ids": ids, "attention_mask": mask}
    if all(ex.label is not None for ex in examples):
        out["labels"] = torch.tensor([int(ex.label) for ex in examples], dtype=torch.long)
    return out


# -- prompt templates ---------------------------------------------------------

# named patterns usable where spaces are awkward (CLI key=value options)
TEMPLATE_PRESETS = {
    "it_was": "{text} It was {mask}.",
    "plain": "{text}",
}


def resolve_template(pattern_or_name: str) -> str:
    """A literal pattern (contains '{') passes through; otherwise a preset name."""
    if "{" in pattern_or_name:
        return pattern_or_name
    if pattern_or_name in TEMPLATE_PRESETS:
        return TEMPLATE_PRESETS[pattern_or_name]
    raise ValueError(
        f"unknown template preset {pattern_or_name!r}; known: {sorted(TEMPLATE_PRESETS)}"
    )


Part = tuple[str, str]  # (kind, payload); kind in {"lit", "text", "mask"}


def parse_template(pattern: str) -> list[Part]:
    """Split a pattern into literal / {text} / {mask} parts.

    Exactly one {text} slot is required; at most one {mask}.
    """
    parts: list[Part] = []
    rest = pattern
    while rest:
        t = rest.find("{text}")
        m = rest.find("{mask}")
        cuts = [c for c in (t, m) if c >= 0]
        if not cuts:
            parts.append(("lit", rest))
            break
        cut = min(cuts)
        if cut > 0:
            parts.append(("lit", rest[:cut]))
        if cut == t:
            parts.append(("text", ""))
            rest = rest[cut + len("{text}") :]
        else:
            parts.append(("mask", ""))
            rest = rest[cut + len("{mask}") :]
    n_text = sum(1 for k, _ in parts if k == "text")
    n_mask = sum(1 for k, _ in parts if k == "mask")
    if n_text != 1:
        raise ValueError("template must contain exactly one {text} slot")
    if n_mask > 1:
        raise ValueError("template may contain at most one {mask} slot")
    return parts


@dataclass
class PromptTemplate:
    """Cloze pattern such as '{text} It was {mask}.'"""

    pattern: str

    def __post_init__(self):
        self.parts = parse_template(self.pattern)

    @property
    def has_mask(self) -> bool:
        return any(k == "mask" for k, _ in self.parts)


def apply_template(
    template: PromptTemplate, text: str, tokenizer: Tokenizer, max_len: int
) -> tuple[list[int], int | None]:
    """Render a template around text -> (ids, mask position).

    Literal segments are tokenized independently of the inserted text, so
    punctuation glued to a slot in the pattern stays its own token. Only the
    {text} tokens are truncated on overflow; if the fixed parts alone exceed
    max_len the template cannot fit and that is an error (the mask token is
    never silently dropped).
    """
    segs: list[list[int]] = []
    text_idx = -1
    for kind, payload in template.parts:
        if kind == "lit":
            segs.append([tokenizer.lookup(w) for w in tokenizer.tokenize(payload)])
        elif kind == "text":
            text_idx = len(segs)
            segs.append([tokenizer.lookup(w) for w in tokenizer.tokenize(text)])
        else:
            segs.append([tokenizer.mask_id])
    fixed = 2 + sum(len(s) for i, s in enumerate(segs) if i != text_idx)  # 2: BOS/EOS
    budget = max_len - fixed
    if budget < 0:
        raise ValueError(
            f"template fixed tokens ({fixed}) exceed max_len ({max_len}); "
            "the mask token would be truncated"
        )
    segs[text_idx] = segs[text_idx][:budget]
    ids = [tokenizer.bos_id]
    for s in segs:
        ids.extend(s)
    ids.append(tokenizer.eos_id)
    mask_pos = ids.index(tokenizer.mask_id) if template.has_mask else None
    return ids, mask_pos


def collate_masked_prompt(
    examples: list[Example], template: PromptTemplate, tokenizer: Tokenizer, max_len: int
) -> dict[str, torch.Tensor]:
    seqs, mask_positions = [], []
    for ex in examples:
        ids, pos = apply_template(template, ex.text_a, tokenizer, max_len)
        if pos is None:
            raise ValueError("masked-prompt collation needs a {mask} slot")
        seqs.append(ids)
        mask_positions.append(pos)
    ids, mask = pad_batch(seqs, tokenizer.pad_id)
    out = {
        "ids": ids,
        "attention_mask": mask,
        "mask_positions": torch.tensor(mask_positions, dtype=torch.long),
    }
    if all(ex.label is not None for ex in examples):
        out["labels"] = torch.tensor([int(ex.label) for ex in examples], dtype=torch.long)
    return out


# -- instruction schemas & extraction instructions ------------------------------

DEFAULT_EXTRACTIVE_PATTERN = "Find all {type} entities in the text: {text}"


@dataclass
class InstructionSchema:
    """Serializable instruction/prompt format description."""

    style: str  # e.g. "extractive", "masked_prompt"
    pattern: str
    label_words: dict[str, list[str]] | None = None

    def save(self, path: str | Path) -> None:
        d = {"style": self.style, "pattern": self.pattern}
        if self.label_words is not None:
            d["label_words"] = self.label_words
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InstructionSchema":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        for key in ("style", "pattern"):
            if key not in d:
                raise ValueError(f"instruction schema missing field {key!r}")
        return cls(d["style"], d["pattern"], d.get("label_words"))


@dataclass
class InstructionEncoding:
    """Tokenized instruction plus per-token spans into the original text.

    char_spans[i] is (start, end) into `text` when token i came from the
    {text} slot, else None (instruction scaffolding and specials).
    """

    ids: list[int]
    char_spans: list[tuple[int, int] | None]
    text: str
    entity_type: str

    def token_span_for_chars(self, start: int, end: int) -> tuple[int, int] | None:
        """Token range (inclusive) exactly covering chars [start, end), or None."""
        tok_start = tok_end = None
        for i, sp in enumerate(self.char_spans):
            if sp is None:
                continue
            if sp[0] == start:
                tok_start = i
            if sp[1] == end:
                tok_end = i
        if tok_start is None or tok_end is None or tok_end < tok_start:
            return None
        return tok_start, tok_end

    def char_span_for_tokens(self, tok_start: int, tok_end: int) -> tuple[int, int]:
        a = self.char_spans[tok_start]
        b = self.char_spans[tok_end]
        if a is None or b is None:
            raise ValueError("token span does not lie inside the {text} slot")
        return a[0], b[1]


def build_extractive_instruction(
    text: str,
    entity_type: str,
    tokenizer: Tokenizer,
    max_len: int,
    pattern: str = DEFAULT_EXTRACTIVE_PATTERN,
) -> InstructionEncoding:
    """Wrap text in an extraction instruction for one entity type.

    The pattern must contain {type} and {text}. Only the {text} tokens carry
    offsets and only they are truncated on overflow.
    """
    if "{type}" not in pattern or "{text}" not in pattern:
        raise ValueError("extractive pattern needs {type} and {text} slots")
    prefix_str, _, suffix_str = pattern.replace("{type}", entity_type).partition("{text}")
    prefix = [tokenizer.lookup(w) for w in tokenizer.tokenize(prefix_str)]
    suffix = [tokenizer.lookup(w) for w in tokenizer.tokenize(suffix_str)]
    body: list[int] = []
    body_spans: list[tuple[int, int]] = []
    for tok, (s, e) in tokenizer.iter_tokens_with_offsets(text):
        body.append(tokenizer.lookup(tok))
        body_spans.append((s, e))
    budget = max_len - (2 + len(prefix) + len(suffix))
    if budget < 0:
        raise ValueError(f"instruction scaffolding does not fit in max_len {max_len}")
    body = body[:budget]
    body_spans = body_spans[:budget]
    ids = [tokenizer.bos_id, *prefix, *body, *suffix, tokenizer.eos_id]
    spans: list[tuple[int, int] | None] = [None] * (1 + len(prefix))
    spans += list(body_spans)
    spans += [None] * (len(suffix) + 1)
    return InstructionEncoding(ids, spans, text, entity_type)


def build_inference_instructions(
    text: str,
    types: list[str],
    tokenizer: Tokenizer,
    max_len: int,
    pattern: str = DEFAULT_EXTRACTIVE_PATTERN,
) -> tuple[list[InstructionEncoding], bool]:
    """One instruction per requested type, in request order.

    Duplicate types are collapsed to their first occurrence; the second
    return value flags that duplicates were dropped.
    """
    if not types:
        raise ValueError("no entity types requested")
    seen: list[str] = []
    had_dupes = False
    for t in types:
        if t in seen:
            had_dupes = True
        else:
            seen.append(t)
    encs = [
        build_extractive_instruction(text, t, tokenizer, max_len, pattern) for t in seen
    ]
    return encs, had_dupes


# -- in-context demonstrations --------------------------------------------------


def build_icl_context(
    demonstrations: list[str], query: str, tokenizer: Tokenizer, max_len: int
) -> tuple[list[int], int]:
    """[BOS] demos... query [EOS], dropping oldest demos until it fits.

    Returns (ids, number of demonstrations kept). The query itself must fit
    with no demonstrations at all, otherwise this raises.
    """
    query_ids = [tokenizer.lookup(w) for w in tokenizer.tokenize(query)]
    budget = max_len - 2 - len(query_ids)
    if budget < 0:
        raise ValueError("query alone exceeds max_len")
    demo_ids = [[tokenizer.lookup(w) for w in tokenizer.tokenize(d)] for d in demonstrations]
    start = 0
    while start < len(demo_ids) and sum(len(d) for d in demo_ids[start:]) > budget:
        start += 1  # drop the oldest demonstration
    kept = demo_ids[start:]
    ids = [tokenizer.bos_id]
    for d in kept:
        ids.extend(d)
    ids.extend(query_ids)
    ids.append(tokenizer.eos_id)
    return ids, len(kept)


# -- knowledge prompting ---------------------------------------------------------


class KnowledgeBase:
    """(head, relation, tail) triples indexed by head entity."""

    def __init__(self, facts: list[tuple[str, str, str]]):
        self.facts = list(facts)
        self.by_head: dict[str, list[tuple[str, str, str]]] = {}
        for fact in self.facts:
            self.by_head.setdefault(fact[0], []).append(fact)

    @classmethod
    def load_tsv(cls, path: str | Path) -> "KnowledgeBase":
        facts = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 3:
                    raise ValueError(
                        f"{path} line {lineno}: expected 3 tab-separated fields, got {len(cols)}"
                    )
                facts.append((cols[0], cols[1], cols[2]))
        return cls(facts)

    def match_heads(self, text: str) -> list[str]:
        """Head entities occurring in text on word boundaries, longest first.

        Each matched region is consumed so overlapping shorter heads don't
        also fire.
        """
        claimed: set[int] = set()
        hits: list[tuple[int, str]] = []
        for head in sorted(self.by_head, key=lambda h: (-len(h), h)):
            start = 0
            while True:
                pos = text.find(head, start)
                if pos < 0:
                    break
                end = pos + len(head)
                boundary_ok = (pos == 0 or text[pos - 1].isspace()) and (
                    end == len(text) or not text[end].isalnum()
                )
                if boundary_ok and not any(i in claimed for i in range(pos, end)):
                    claimed.update(range(pos, end))
                    hits.append((pos, head))
                start = pos + 1
        hits.sort()
        return [h for _, h in hits]


def build_knowledge_prompt(text: str, kb: KnowledgeBase, max_facts: int = 3) -> str:
    """Append KB facts about head entities mentioned in the text.

    Facts are rendered as 'head relation tail.' sentences, at most max_facts
    per head, in text order of first mention.
    """
    pieces = [text]
    for head in kb.match_heads(text):
        for h, r, t in kb.by_head[head][:max_facts]:
            pieces.append(f"{h} {r} {t}.")
    return " ".join(pieces)
