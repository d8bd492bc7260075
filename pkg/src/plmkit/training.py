"""Training loop, evaluation, and the command-line runner.

The trainer keeps one invariant above all: a logical batch split into
gradient-accumulation micro-batches produces the same update as the unsplit
batch. Losses are summed per micro-batch and every micro-batch is scaled by
the logical batch's total unit count before backward.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .checkpoint import (
    load_checkpoint,
    load_named_subset,
    load_parameters,
    save_checkpoint,
    state_tensors,
)
from .config import DropoutMode, ModelConfig, derive_seed
from .data import load_dataset, resolve_template
from .peft import TuningPlan, apply_tuning, count_parameters, peft_parameters
from .tasks import TaskModel, build_task_model
from .tokenizer import build_tokenizer
from .tracking import TrackingWriter

from . import synth  # noqa: F401  (registers built-in datasets)


@dataclass
class TrainConfig:
    output_dir: str
    learning_rate: float = 5e-4
    num_train_epochs: float = 3.0
    train_batch_size: int = 8
    eval_batch_size: int = 16
    gradient_accumulation_steps: int = 1
    evaluation_strategy: str = "epoch"  # "epoch" | "steps" | "no"
    eval_steps: int = 50
    seed: int = 42
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    max_eval_seq_length: int | None = None
    tracking_uri: str | None = None
    run_id: str = "run"
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.evaluation_strategy not in ("epoch", "steps", "no"):
            raise ValueError(f"bad evaluation_strategy {self.evaluation_strategy!r}")
        if self.train_batch_size < 1 or self.gradient_accumulation_steps < 1:
            raise ValueError("batch size and accumulation steps must be >= 1")
        if self.num_train_epochs <= 0:
            raise ValueError("num_train_epochs must be positive")


@dataclass
class TrainResult:
    steps: int
    final_train_loss: float
    best_metric: float | None
    best_step: int | None
    eval_history: list[dict] = field(default_factory=list)
    param_report: dict | None = None


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _loss_units(model: TaskModel, batch: dict) -> int:
    """Loss denominator units in a batch, without a forward pass."""
    if "labels" in batch:
        labels = batch["labels"]
        if (labels == -100).any():
            return int((labels != -100).sum())
        return int(labels.numel())
    return int(batch["ids"].shape[0])


def linear_schedule(total_steps: int, warmup_fraction: float):
    """Factor curve: ramp 0->1 across warmup, then straight line down to 0."""
    warmup = max(1, int(total_steps * warmup_fraction))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if total_steps == warmup:
            return 1.0
        return max(0.0, (total_steps - 1 - step) / (total_steps - warmup))

    return factor


@torch.no_grad()
def evaluate(model: TaskModel, examples, batch_size: int = 16, max_len: int | None = None,
             matthews: bool = False) -> dict[str, float]:
    """Run metrics (plus mean loss) over a dataset in EVAL dropout mode."""
    model.backbone.set_mode(DropoutMode.EVAL)
    if matthews:
        model.options["matthews"] = True
    saved_len = model.max_len
    if max_len is not None:
        model.max_len = max_len
    try:
        items = model.prepare(list(examples))
        preds: list = []
        total_loss, total_units = 0.0, 0
        for chunk in _batches(items, batch_size):
            batch = model.collate(chunk)
            loss, n = model.loss_sum(batch)
            total_loss += float(loss)
            total_units += n
            preds.extend(model.predict_batch(batch))
        out = model.metrics(preds, items)
        if total_units:
            out["loss"] = total_loss / total_units
        return out
    finally:
        model.max_len = saved_len


def train(model: TaskModel, train_examples, cfg: TrainConfig, eval_examples=None) -> TrainResult:
    """Train with AdamW + linear warmup/decay; returns summary + eval history.

    Checkpoints: `checkpoint-best` whenever the primary eval metric strictly
    improves, `checkpoint-final` at the end (when saving is enabled).
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    items = model.prepare(list(train_examples))
    if not items:
        raise ValueError("no training items")
    logical = cfg.train_batch_size * cfg.gradient_accumulation_steps
    steps_per_epoch = (len(items) + logical - 1) // logical
    epochs = int(cfg.num_train_epochs)
    total_steps = steps_per_epoch * epochs
    factor = linear_schedule(total_steps, cfg.warmup_fraction)

    params = model.trainable_parameters()
    if not params:
        raise ValueError("no trainable parameters")
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)

    tracker = None
    if cfg.tracking_uri:
        tracker = TrackingWriter(cfg.tracking_uri, cfg.run_id)
        report = count_parameters(model)
        tracker.log(
            0,
            "config",
            task_type=model.task_type,
            total_steps=total_steps,
            learning_rate=cfg.learning_rate,
            train_batch_size=cfg.train_batch_size,
            gradient_accumulation_steps=cfg.gradient_accumulation_steps,
            seed=cfg.seed,
            trainable_parameters=report.trainable,
            total_parameters=report.total,
        )

    best_metric: float | None = None
    best_step: int | None = None
    eval_history: list[dict] = []
    step = 0
    last_loss = float("nan")

    def run_eval():
        nonlocal best_metric, best_step
        if eval_examples is None:
            return
        metrics = evaluate(
            model, eval_examples, cfg.eval_batch_size, max_len=cfg.max_eval_seq_length
        )
        model.backbone.set_mode(DropoutMode.TRAIN)
        eval_history.append({"step": step, **metrics})
        if tracker:
            tracker.log(step, "eval", **metrics)
        primary = metrics.get(model.primary_metric)
        if primary is not None and (best_metric is None or primary > best_metric):
            best_metric, best_step = primary, step
            if cfg.save_checkpoints:
                save_task_model(model, out_dir / "checkpoint-best")
                if tracker:
                    tracker.log(step, "checkpoint", path=str(out_dir / "checkpoint-best"),
                                **{model.primary_metric: primary})

    model.backbone.set_mode(DropoutMode.TRAIN)
    for epoch in range(epochs):
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, f"shuffle:{epoch}"))
        order = torch.randperm(len(items), generator=g).tolist()
        shuffled = [items[i] for i in order]
        for logical_batch in _batches(shuffled, logical):
            micros = [model.collate(m) for m in _batches(logical_batch, cfg.train_batch_size)]
            denom = sum(_loss_units(model, b) for b in micros)
            if denom == 0:
                continue  # nothing to learn from (all positions ignored)
            opt.zero_grad(set_to_none=True)
            step_loss = 0.0
            for batch in micros:
                loss, _ = model.loss_sum(batch)
                if not torch.isfinite(loss):
                    if tracker:
                        tracker.log(step, "diagnostic", error="non-finite loss",
                                    loss=float(loss.detach()))
                        tracker.close()
                    raise RuntimeError(f"non-finite loss at step {step}")
                (loss / denom).backward()
                step_loss += float(loss.detach())
            opt.step()
            sched.step()
            step += 1
            last_loss = step_loss / denom
            if tracker:
                tracker.log(step, "train", loss=last_loss, lr=sched.get_last_lr()[0],
                            epoch=epoch)
            if cfg.evaluation_strategy == "steps" and step % cfg.eval_steps == 0:
                run_eval()
        if cfg.evaluation_strategy == "epoch":
            run_eval()

    if cfg.evaluation_strategy != "no" and not eval_history:
        run_eval()
    if cfg.save_checkpoints:
        save_task_model(model, out_dir / "checkpoint-final")
        if tracker:
            tracker.log(step, "checkpoint", path=str(out_dir / "checkpoint-final"))
    if tracker:
        tracker.close()
    return TrainResult(
        steps=step,
        final_train_loss=last_loss,
        best_metric=best_metric,
        best_step=best_step,
        eval_history=eval_history,
        param_report=count_parameters(model).__dict__ if params else None,
    )


# -- checkpoint plumbing for full task models ----------------------------------


def save_task_model(model: TaskModel, ckpt_dir: str | Path) -> Path:
    return save_checkpoint(
        ckpt_dir,
        model.config,
        model.tokenizer,
        state_tensors(model),
        task=model.task_dict(),
        peft_tensors=peft_parameters(model),
    )


def load_task_model(ckpt_dir: str | Path, dtype: torch.dtype | None = None) -> TaskModel:
    """Rebuild a task model from a checkpoint directory, bit-exact.

    If the stored options carry a tuning plan, PEFT modules are re-injected
    before parameters load so names line up.
    """
    ck = load_checkpoint(ckpt_dir)
    if ck.task is None:
        raise ValueError(f"{ckpt_dir} has no task.json; cannot rebuild a task model")
    model = build_task_model(ck.task["task_type"], ck.config, ck.tokenizer,
                             ck.task.get("options", {}), dtype=dtype)
    plan_dict = model.options.get("tuning_plan")
    if plan_dict:
        apply_model_tuning(model, TuningPlan(**plan_dict))
    load_parameters(model, ck.tensors)
    return model


def load_peft_into(model: TaskModel, ckpt_dir: str | Path) -> None:
    """Apply a checkpoint's stored tuning plan + PEFT tensors to a fresh base."""
    ck = load_checkpoint(ckpt_dir)
    plan_dict = (ck.task or {}).get("options", {}).get("tuning_plan")
    if plan_dict:
        apply_model_tuning(model, TuningPlan(**plan_dict))
    load_named_subset(model, ck.peft_tensors)


def apply_model_tuning(model: TaskModel, plan: TuningPlan):
    """Tune the backbone per plan; everything outside it stays trainable."""
    apply_tuning(model.backbone, plan)
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    for p in model.parameters():
        if id(p) not in backbone_ids:
            p.requires_grad_(True)
    model.options["tuning_plan"] = {
        "strategy": plan.strategy,
        "lora_rank": plan.lora_rank,
        "lora_alpha": plan.lora_alpha,
        "adapter_dim": plan.adapter_dim,
        "prefix_len": plan.prefix_len,
    }
    return count_parameters(model)


# -- CLI -------------------------------------------------------------------------


def parse_user_defined(spec: str) -> dict:
    """Whitespace-separated key=value pairs; values JSON-decoded when valid."""
    out: dict = {}
    for pair in spec.split():
        if "=" not in pair:
            raise ValueError(f"user_defined entry {pair!r} is not key=value")
        k, _, v = pair.partition("=")
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plmkit-run", description="Train/evaluate a task model.")
    p.add_argument("--model_name_or_path", required=True,
                   help="checkpoint directory to resume, or a fresh-model name")
    p.add_argument("--data_dir", default=None,
                   help="directory holding <split>.jsonl files; omit to use a registered dataset")
    p.add_argument("--output_dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--max_seq_length", type=int, default=128)
    p.add_argument("--max_eval_seq_length", type=int, default=None)
    p.add_argument("--do_train", action="store_true")
    p.add_argument("--do_eval", action="store_true")
    p.add_argument("--per_device_train_batch_size", type=int, default=8)
    p.add_argument("--per_device_eval_batch_size", type=int, default=16)
    p.add_argument("--gradient_accumulation_steps", type=int, default=1)
    p.add_argument("--evaluation_strategy", default="epoch", choices=["epoch", "steps", "no"])
    p.add_argument("--learning_rate", type=float, default=5e-4)
    p.add_argument("--num_train_epochs", type=float, default=3.0)
    p.add_argument("--task_name", required=True,
                   help="run label; also the registered dataset name when --data_dir is omitted")
    p.add_argument("--task_type", required=True)
    p.add_argument("--model_type", default="encoder", choices=["encoder", "decoder"])
    p.add_argument("--user_defined", default="",
                   help="extra task options as 'key=value key2=value2' (JSON values allowed)")
    p.add_argument("--tracking_uri", default=None)
    p.add_argument("--use_freezing", action="store_true",
                   help="freeze the backbone; train only the head")
    return p


MODEL_OPTION_KEYS = ("hidden_size", "num_layers", "num_heads", "dropout_p", "ff_dim")


def _build_fresh_model(args, options: dict, train_examples) -> TaskModel:
    corpus = [ex.text_a for ex in train_examples]
    corpus += [ex.text_b for ex in train_examples if ex.text_b]
    corpus += [str(ex.label) for ex in train_examples if isinstance(ex.label, str)]
    # template/pattern literals and label words must be encodable too
    for key in ("template", "pattern"):
        if key in options:
            pat = resolve_template(str(options[key])) if key == "template" else str(options[key])
            corpus.append(pat.replace("{text}", " ").replace("{mask}", " ")
                          .replace("{type}", " "))
    if "types" in options:
        corpus.append(" ".join(options["types"]))
    if "label_words" in options:
        corpus.append(" ".join(w for ws in options["label_words"].values() for w in ws))
    tokenizer = build_tokenizer(corpus, max_vocab=int(options.get("max_vocab", 2000)))
    model_kwargs = {k: options[k] for k in MODEL_OPTION_KEYS if k in options}
    config = ModelConfig(
        vocab_size=tokenizer.vocab_size,
        max_seq_len=args.max_seq_length,
        architecture=args.model_type,
        seed=args.seed,
        **model_kwargs,
    )
    task_options = {k: v for k, v in options.items()
                    if k not in MODEL_OPTION_KEYS and k != "max_vocab"}
    task_options["max_seq_length"] = args.max_seq_length
    return build_task_model(args.task_type, config, tokenizer, task_options)


def run_cli(argv: list[str]) -> int:
    if argv and argv[0] == "report":
        return run_report(argv[1:])
    args = build_arg_parser().parse_args(argv)
    try:
        options = parse_user_defined(args.user_defined)
        if args.data_dir:
            train_examples = load_dataset(args.data_dir, "train")
            eval_examples = load_dataset(args.data_dir, "dev") if args.do_eval else None
        else:
            train_examples = load_dataset(args.task_name, "train")
            eval_examples = load_dataset(args.task_name, "dev") if args.do_eval else None

        ckpt = Path(args.model_name_or_path)
        if ckpt.is_dir():
            model = load_task_model(ckpt)
        else:
            model = _build_fresh_model(args, options, train_examples)

        plan = None
        if args.use_freezing:
            plan = TuningPlan("freeze")
        elif "tuning" in options:
            plan = TuningPlan(
                options["tuning"],
                lora_rank=int(options.get("lora_rank", 8)),
                lora_alpha=float(options.get("lora_alpha", 16.0)),
                adapter_dim=int(options.get("adapter_dim", 16)),
                prefix_len=int(options.get("prefix_len", 8)),
            )
        if plan is not None:
            report = apply_model_tuning(model, plan)
            print(f"trainable parameters: {report.trainable} / {report.total}")
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        metrics: dict = {}
        if args.do_train:
            cfg = TrainConfig(
                output_dir=args.output_dir,
                learning_rate=args.learning_rate,
                num_train_epochs=args.num_train_epochs,
                train_batch_size=args.per_device_train_batch_size,
                eval_batch_size=args.per_device_eval_batch_size,
                gradient_accumulation_steps=args.gradient_accumulation_steps,
                evaluation_strategy=args.evaluation_strategy if args.do_eval else "no",
                seed=args.seed,
                max_eval_seq_length=args.max_eval_seq_length,
                tracking_uri=args.tracking_uri,
                run_id=f"{args.task_name}-{args.seed}",
            )
            result = train(model, train_examples, cfg,
                           eval_examples=eval_examples if args.do_eval else None)
            metrics["train_loss"] = result.final_train_loss
            if result.best_metric is not None:
                metrics[f"best_{model.primary_metric}"] = result.best_metric
        else:
            save_task_model(model, Path(args.output_dir) / "checkpoint-final")
        if args.do_eval:
            if eval_examples is None:
                raise ValueError("no dev split available for --do_eval")
            final = evaluate(model, eval_examples, args.per_device_eval_batch_size,
                             max_len=args.max_eval_seq_length,
                             matthews=bool(options.get("matthews")))
            metrics.update({f"eval_{k}": v for k, v in final.items()})
        print(json.dumps(metrics, sort_keys=True))
        return 0
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def run_report(argv: list[str]) -> int:
    p = argparse.ArgumentParser(prog="plmkit-run report",
                                description="Summarize a tracking run file.")
    p.add_argument("run_file", help="path to a run-<id>.jsonl tracking file")
    args = p.parse_args(argv)
    from .tracking import read_run

    try:
        events = read_run(args.run_file)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    trains = [e for e in events if e.kind == "train"]
    evals = [e for e in events if e.kind == "eval"]
    print(f"events: {len(events)}  train steps: {len(trains)}  evals: {len(evals)}")
    if trains:
        print(f"final train loss: {trains[-1].values.get('loss'):.6f}")
    for ev in evals:
        vals = " ".join(f"{k}={v:.4f}" for k, v in sorted(ev.values.items())
                        if isinstance(v, (int, float)))
        print(f"eval @ step {ev.step}: {vals}")
    return 0


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
