"""Uncertainty-aware semi-supervised learning.

Monte-Carlo dropout turns one classifier into an ensemble: T stochastic
passes with fresh dropout masks per pass. Disagreement between passes (BALD:
predictive entropy minus expected per-pass entropy) ranks pool examples by
epistemic uncertainty; the most confident get pseudo-labels and join the
training set for the next student. A content-free prior estimate corrects
prompt-induced class skew.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .config import DropoutMode, derive_seed
from .data import Example
from .tasks import TaskModel
from .training import TrainConfig, evaluate, train

CONTENT_FREE_INPUTS = ("", "[MASK]", "N/A")


def _entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (natural log) along the last axis; 0·log0 := 0."""
    logp = torch.where(probs > 0, probs.log(), torch.zeros_like(probs))
    return -(probs * logp).sum(dim=-1)


@dataclass
class UncertaintyReport:
    mean_probs: torch.Tensor  # [N, num_classes]
    predictive_entropy: torch.Tensor  # [N]
    expected_entropy: torch.Tensor  # [N]
    bald: torch.Tensor  # [N] mutual information between prediction and masks
    num_passes: int
    single_pass: bool = False  # T == 1: disagreement is unmeasurable, bald forced 0

    @property
    def predicted_labels(self) -> torch.Tensor:
        return self.mean_probs.argmax(dim=-1)


@torch.no_grad()
def _probs_over(model: TaskModel, items: list, batch_size: int) -> torch.Tensor:
    chunks = []
    for i in range(0, len(items), batch_size):
        batch = model.collate(items[i : i + batch_size])
        chunks.append(model.predict_probs(batch))
    return torch.cat(chunks, dim=0)


@torch.no_grad()
def mc_dropout_predict(
    model: TaskModel,
    examples: Sequence[Example],
    num_passes: int = 10,
    batch_size: int = 16,
    seed: int = 0,
) -> UncertaintyReport:
    """T stochastic forward passes -> mean probabilities + BALD scores.

    Each pass reseeds the dropout stream with a distinct derived seed, so
    the whole procedure is reproducible. With dropout disabled (p == 0) all
    passes are bit-identical and bald comes out exactly zero.
    """
    if num_passes < 1:
        raise ValueError("num_passes must be >= 1")
    items = model.prepare(list(examples))
    prev_mode = model.backbone.mode
    model.backbone.set_mode(DropoutMode.MC_INFERENCE)
    try:
        passes = []
        for t in range(num_passes):
            model.backbone.reseed_dropout(derive_seed(seed, f"mc:{t}"))
            passes.append(_probs_over(model, items, batch_size))
    finally:
        model.backbone.set_mode(prev_mode)
    # statistics at f64 regardless of model dtype, so bald >= 0 holds to ~1e-15
    stacked = torch.stack(passes).to(torch.float64)  # [T, N, C]

    if num_passes == 1:
        mean = stacked[0]
        h = _entropy(mean)
        return UncertaintyReport(mean, h, h.clone(), torch.zeros_like(h), 1, single_pass=True)

    if all(torch.equal(p, stacked[0]) for p in stacked[1:]):
        # identical passes: the mean IS the single pass; force bald to exact 0
        mean = stacked[0]
        h = _entropy(mean)
        return UncertaintyReport(mean, h, h.clone(), torch.zeros_like(h), num_passes)

    mean = stacked.mean(dim=0)
    predictive = _entropy(mean)
    expected = _entropy(stacked).mean(dim=0)
    return UncertaintyReport(mean, predictive, expected, predictive - expected, num_passes)


SELECTION_STRATEGIES = ("lowest_bald", "lowest_entropy", "highest_confidence")


def select_confident(
    report: UncertaintyReport,
    k: int,
    strategy: str = "lowest_bald",
    class_balanced: bool = False,
) -> list[int]:
    """Indices of the k most confident pool examples.

    Ordering is stable: ties keep original index order. With class_balanced,
    each predicted class gets a ceil(k / C) quota first, then any shortfall
    backfills globally. k larger than the pool selects everything.
    """
    if strategy not in SELECTION_STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    n = report.bald.shape[0]
    k = min(k, n)
    if k <= 0:
        return []
    if strategy == "lowest_bald":
        key = report.bald
        reverse = False
    elif strategy == "lowest_entropy":
        key = report.predictive_entropy
        reverse = False
    else:
        key = -report.mean_probs.max(dim=-1).values
        reverse = False
    order = sorted(range(n), key=lambda i: (float(key[i]), i), reverse=reverse)
    if not class_balanced:
        return order[:k]
    labels = report.predicted_labels.tolist()
    classes = sorted(set(labels))
    quota = math.ceil(k / len(classes))
    chosen: list[int] = []
    taken = set()
    for c in classes:
        got = 0
        for i in order:
            if got >= quota or len(chosen) >= k:
                break
            if labels[i] == c and i not in taken:
                chosen.append(i)
                taken.add(i)
                got += 1
    for i in order:  # backfill when some class ran short
        if len(chosen) >= k:
            break
        if i not in taken:
            chosen.append(i)
            taken.add(i)
    return chosen


# -- prompt-bias calibration ------------------------------------------------------


@torch.no_grad()
def estimate_content_free_prior(
    model: TaskModel,
    inputs: Sequence[str] = CONTENT_FREE_INPUTS,
    floor: float = 1e-6,
) -> torch.Tensor:
    """Class probabilities the model assigns to contentless inputs.

    The mean over inputs, floored and renormalized, estimates the prompt's
    built-in class bias.
    """
    if not inputs:
        raise ValueError("need at least one content-free input")
    prev_mode = model.backbone.mode
    model.backbone.set_mode(DropoutMode.EVAL)
    try:
        items = [Example(id=f"cf-{i}", text_a=s) for i, s in enumerate(inputs)]
        probs = _probs_over(model, model.prepare(items), batch_size=len(items))
    finally:
        model.backbone.set_mode(prev_mode)
    p_cf = probs.mean(dim=0).clamp_min(floor)
    return p_cf / p_cf.sum()


def calibrate(probs: torch.Tensor, p_cf: torch.Tensor) -> torch.Tensor:
    """Divide out the content-free prior and renormalize each row."""
    if probs.shape[-1] != p_cf.shape[-1]:
        raise ValueError("probability/prior class count mismatch")
    scaled = probs / p_cf
    return scaled / scaled.sum(dim=-1, keepdim=True)


# -- the self-training loop --------------------------------------------------------


@dataclass
class SelfTrainConfig:
    rounds: int = 3
    mc_passes: int = 10
    select_k: int | None = None  # default 32 * num_classes
    strategy: str = "lowest_bald"
    class_balanced: bool = False
    seed: int = 42
    batch_size: int = 16


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    pseudo_label_accuracy: float | None
    eval_metrics: dict[str, float]


@dataclass
class SelfTrainResult:
    teacher_metrics: dict[str, float]
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def final_metrics(self) -> dict[str, float]:
        return self.rounds[-1].eval_metrics if self.rounds else self.teacher_metrics


def self_train(
    model_factory: Callable[[int], TaskModel],
    labeled: Sequence[Example],
    pool: Sequence[Example],
    eval_examples: Sequence[Example],
    train_cfg: TrainConfig,
    cfg: SelfTrainConfig,
) -> tuple[TaskModel, SelfTrainResult]:
    """Iterative teacher -> pseudo-label -> student loop.

    Each round: rank the full unlabeled pool by MC-dropout uncertainty under
    the current teacher, pseudo-label the most confident k with the teacher's
    mean-probability argmax, and train a fresh student (new derived seed) on
    labeled + pseudo. The student becomes the next teacher. Pool examples
    with gold labels attached are used only to report pseudo-label accuracy,
    never for training.
    """
    teacher = model_factory(derive_seed(cfg.seed, "round:0"))
    tc = copy.copy(train_cfg)
    tc.output_dir = str(train_cfg.output_dir) + "/teacher"
    tc.save_checkpoints = False
    train(teacher, list(labeled), tc)
    teacher_metrics = evaluate(teacher, list(eval_examples), cfg.batch_size)
    result = SelfTrainResult(teacher_metrics=teacher_metrics)

    pool = list(pool)
    for r in range(1, cfg.rounds + 1):
        report = mc_dropout_predict(
            teacher, pool, cfg.mc_passes, cfg.batch_size,
            seed=derive_seed(cfg.seed, f"mc-round:{r}"),
        )
        num_classes = report.mean_probs.shape[-1]
        k = cfg.select_k if cfg.select_k is not None else 32 * num_classes
        idx = select_confident(report, k, cfg.strategy, cfg.class_balanced)
        labels = report.predicted_labels
        pseudo = [
            Example(id=f"pseudo-r{r}-{i}", text_a=pool[i].text_a, label=int(labels[i]))
            for i in idx
        ]
        gold_known = [i for i in idx if pool[i].label is not None]
        pseudo_acc = (
            sum(int(labels[i]) == int(pool[i].label) for i in gold_known) / len(gold_known)
            if gold_known
            else None
        )
        student = model_factory(derive_seed(cfg.seed, f"round:{r}"))
        tc = copy.copy(train_cfg)
        tc.output_dir = str(train_cfg.output_dir) + f"/round-{r}"
        tc.save_checkpoints = False
        train(student, list(labeled) + pseudo, tc)
        metrics = evaluate(student, list(eval_examples), cfg.batch_size)
        result.rounds.append(RoundRecord(r, list(idx), pseudo_acc, metrics))
        teacher = student
    return teacher, result
