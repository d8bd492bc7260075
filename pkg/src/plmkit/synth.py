"""Deterministic synthetic corpora for demos and end-to-end checks.

Three families, all registered as loadable datasets:

    toy_sentiment      binary lexicon sentiment; pool split carries
                       co-occurrence bridges between anchor words (seen in
                       the labeled split) and held-out words (dev-only), the
                       structure semi-supervised self-training exploits
    toy_sentiment_skewed  same task with an imbalanced train split and a
                       balanced dev split (calibration playground)
    toy_entities       planted color/animal spans with character offsets,
                       including two-token compounds
    toy_echo           copy task for decoder generation

Generators take explicit seeds and sizes so tests can build variants; the
registered datasets pin one canonical configuration per split.
"""

from __future__ import annotations

import random

from .data import CharSpan, Example, register_dataset

POSITIVE_ANCHORS = ["great", "wonderful", "excellent", "superb"]
POSITIVE_HELDOUT = ["delightful", "charming", "brilliant", "lovely"]
NEGATIVE_ANCHORS = ["terrible", "awful", "dreadful", "boring"]
NEGATIVE_HELDOUT = ["horrid", "clumsy", "bland", "grim"]

SENTIMENT_NOUNS = ["movie", "film", "plot", "story", "acting", "ending", "script", "cast"]
SENTIMENT_FILLER = ["truly", "quite", "rather", "really", "simply", "honestly"]


def _sentiment_sentence(rng: random.Random, words: list[str], bridge: str | None = None) -> str:
    noun = rng.choice(SENTIMENT_NOUNS)
    adv = rng.choice(SENTIMENT_FILLER)
    word = rng.choice(words)
    if bridge is None:
        return f"the {noun} was {adv} {word}"
    # co-occurrence bridge: anchor and held-out word, same polarity
    noun2 = rng.choice(SENTIMENT_NOUNS)
    return f"the {noun} was {word} and the {noun2} was {adv} {bridge}"


def make_sentiment_split(
    n: int,
    seed: int,
    vocab: str = "anchor",  # "anchor" | "heldout" | "bridge"
    positive_fraction: float = 0.5,
) -> list[Example]:
    """n sentiment examples; label 1 positive, 0 negative."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        label = 1 if rng.random() < positive_fraction else 0
        anchors = POSITIVE_ANCHORS if label else NEGATIVE_ANCHORS
        heldout = POSITIVE_HELDOUT if label else NEGATIVE_HELDOUT
        if vocab == "anchor":
            text = _sentiment_sentence(rng, anchors)
        elif vocab == "heldout":
            text = _sentiment_sentence(rng, heldout)
        elif vocab == "bridge":
            text = _sentiment_sentence(rng, anchors, bridge=rng.choice(heldout))
        else:
            raise ValueError(f"unknown vocab mode {vocab!r}")
        out.append(Example(id=f"sent-{vocab}-{i}", text_a=text, label=label))
    return out


def sentiment_vocabulary_corpus() -> list[str]:
    """Every word the task can emit, for tokenizer construction."""
    words = (
        POSITIVE_ANCHORS + POSITIVE_HELDOUT + NEGATIVE_ANCHORS + NEGATIVE_HELDOUT
        + SENTIMENT_NOUNS + SENTIMENT_FILLER + ["the", "was", "and"]
    )
    return [" ".join(words)]


@register_dataset("toy_sentiment")
def toy_sentiment(split: str) -> list[Example]:
    if split == "train":
        return make_sentiment_split(32, seed=101, vocab="anchor")
    if split == "dev":
        return make_sentiment_split(64, seed=202, vocab="heldout")
    if split == "test":
        return make_sentiment_split(64, seed=303, vocab="heldout")
    if split == "pool":
        return make_sentiment_split(128, seed=404, vocab="bridge")
    raise ValueError(f"toy_sentiment has no split {split!r}")


@register_dataset("toy_sentiment_skewed")
def toy_sentiment_skewed(split: str) -> list[Example]:
    if split == "train":
        return make_sentiment_split(64, seed=111, vocab="anchor", positive_fraction=0.15)
    if split == "dev":
        return make_sentiment_split(64, seed=222, vocab="anchor", positive_fraction=0.5)
    raise ValueError(f"toy_sentiment_skewed has no split {split!r}")


# -- planted entity spans -----------------------------------------------------------

COLORS = ["red", "blue", "green", "yellow", "purple", "orange", "crimson", "teal"]
ANIMALS = ["fox", "wolf", "bear", "otter", "lynx", "heron", "badger", "crane"]
COMPOUND_ANIMALS = ["mountain lion", "sea otter", "snow crane"]
ENTITY_FILLER_A = ["the", "a", "one"]
ENTITY_FILLER_B = ["quick", "lazy", "old", "young", "quiet"]
ENTITY_VERBS = ["jumped", "slept", "ran", "sat", "waited"]
ENTITY_PLACES = ["near the river", "on the hill", "in the meadow", "under the moon"]

ENTITY_TYPES = ["color", "animal"]


def make_entity_example(rng: random.Random, idx: int) -> Example:
    det = rng.choice(ENTITY_FILLER_A)
    adj = rng.choice(ENTITY_FILLER_B)
    color = rng.choice(COLORS)
    animal = rng.choice(COMPOUND_ANIMALS) if rng.random() < 0.25 else rng.choice(ANIMALS)
    verb = rng.choice(ENTITY_VERBS)
    place = rng.choice(ENTITY_PLACES)
    text = f"{det} {adj} {color} {animal} {verb} {place}"
    color_start = len(f"{det} {adj} ")
    animal_start = color_start + len(color) + 1
    spans = [
        CharSpan("color", color_start, color_start + len(color)),
        CharSpan("animal", animal_start, animal_start + len(animal)),
    ]
    return Example(id=f"ent-{idx}", text_a=text, spans=spans)


def make_entity_split(n: int, seed: int) -> list[Example]:
    rng = random.Random(seed)
    return [make_entity_example(rng, i) for i in range(n)]


def entity_vocabulary_corpus() -> list[str]:
    words = (
        COLORS + ANIMALS + ENTITY_FILLER_A + ENTITY_FILLER_B + ENTITY_VERBS + ENTITY_TYPES
    )
    phrases = COMPOUND_ANIMALS + ENTITY_PLACES
    return [" ".join(words) + " " + " ".join(phrases)]


@register_dataset("toy_entities")
def toy_entities(split: str) -> list[Example]:
    seeds = {"train": 1001, "dev": 2002, "test": 3003}
    sizes = {"train": 160, "dev": 48, "test": 48}
    if split not in seeds:
        raise ValueError(f"toy_entities has no split {split!r}")
    return make_entity_split(sizes[split], seeds[split])


# -- echo (copy) generation ----------------------------------------------------------

ECHO_WORDS = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta"]


def make_echo_split(n: int, seed: int, length: int = 2) -> list[Example]:
    """Prompt 'copy w1 .. wk' with the word sequence as the gold continuation."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        words = [rng.choice(ECHO_WORDS) for _ in range(length)]
        out.append(Example(id=f"echo-{i}", text_a="copy " + " ".join(words),
                           label=" ".join(words)))
    return out


@register_dataset("toy_echo")
def toy_echo(split: str) -> list[Example]:
    seeds = {"train": 11, "dev": 22, "test": 33}
    sizes = {"train": 128, "dev": 32, "test": 32}
    if split not in seeds:
        raise ValueError(f"toy_echo has no split {split!r}")
    return make_echo_split(sizes[split], seeds[split])
