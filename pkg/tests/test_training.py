"""Trainer, schedule, tracking, checkpoints, and the plmkit-run CLI."""

import json
from pathlib import Path

import pytest
import torch

from plmkit.checkpoint import (
    load_checkpoint,
    load_named_subset,
    load_parameters,
    save_checkpoint,
    state_tensors,
)
from plmkit.config import DropoutMode
from plmkit.data import Example, save_jsonl
from plmkit.peft import LoRALinear, TuningPlan
from plmkit.tasks import build_task_model
from plmkit.tokenizer import build_tokenizer
from plmkit.tracking import TrackingWriter, metric_curve, read_run
from plmkit.training import (
    TrainConfig,
    apply_model_tuning,
    evaluate,
    linear_schedule,
    load_peft_into,
    load_task_model,
    parse_user_defined,
    run_cli,
    save_task_model,
    train,
)

from conftest import tiny_config

POS_TEXTS = ["good good fine", "fine good good", "good fine fine", "fine fine good"]
NEG_TEXTS = ["bad bad poor", "poor bad bad", "bad poor poor", "poor poor bad"]


def tiny_cls_examples(n=24):
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(Example(f"p{i}", POS_TEXTS[i % 4], label=1))
        else:
            out.append(Example(f"n{i}", NEG_TEXTS[i % 4], label=0))
    return out


def tiny_cls_model(dtype=None, dropout_p=0.0, seed=7):
    tok = build_tokenizer(POS_TEXTS + NEG_TEXTS, max_vocab=50)
    cfg = tiny_config(vocab_size=tok.vocab_size, num_layers=1,
                      dropout_p=dropout_p, seed=seed)
    return build_task_model("head_cls", cfg, tok, {"num_labels": 2}, dtype=dtype)


def quiet_cfg(tmp_path, **over):
    kwargs = dict(
        output_dir=str(tmp_path / "out"),
        learning_rate=1e-3,
        num_train_epochs=2.0,
        train_batch_size=8,
        evaluation_strategy="no",
        save_checkpoints=False,
        seed=11,
    )
    kwargs.update(over)
    return TrainConfig(**kwargs)


class TestLinearSchedule:
    def test_hand_values_short_warmup(self):
        f = linear_schedule(10, 0.1)  # warmup = 1
        assert f(0) == 1.0
        assert f(1) == pytest.approx(8 / 9)
        assert f(9) == 0.0

    def test_hand_values_quarter_warmup(self):
        f = linear_schedule(20, 0.25)  # warmup = 5
        assert f(0) == pytest.approx(1 / 5)
        assert f(4) == 1.0
        assert f(5) == pytest.approx(14 / 15)
        assert f(19) == 0.0
        assert f(25) == 0.0  # clamped, never negative

    def test_all_warmup(self):
        f = linear_schedule(4, 1.0)
        assert [f(s) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
        assert f(4) == 1.0

    def test_monotone_shape(self):
        f = linear_schedule(40, 0.1)
        vals = [f(s) for s in range(40)]
        peak = vals.index(max(vals))
        assert vals[:peak + 1] == sorted(vals[:peak + 1])
        assert vals[peak:] == sorted(vals[peak:], reverse=True)


class TestTrainConfigValidation:
    def test_bad_strategy(self):
        with pytest.raises(ValueError, match="evaluation_strategy"):
            TrainConfig(output_dir="x", evaluation_strategy="never")

    def test_bad_batch(self):
        with pytest.raises(ValueError):
            TrainConfig(output_dir="x", train_batch_size=0)

    def test_bad_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(output_dir="x", num_train_epochs=0)


class TestAccumulationEquivalence:
    def test_micro_batching_matches_single_batch(self, tmp_path):
        """8x1 and 4x2 see identical logical batches -> near-identical params."""
        torch.manual_seed(0)
        examples = tiny_cls_examples(24)
        runs = {}
        for tag, (bs, accum) in {"a": (8, 1), "b": (4, 2)}.items():
            model = tiny_cls_model(dtype=torch.float64)
            cfg = quiet_cfg(tmp_path / tag, train_batch_size=bs,
                            gradient_accumulation_steps=accum, num_train_epochs=2.0)
            res = train(model, examples, cfg)
            runs[tag] = (model, res)
        assert runs["a"][1].steps == runs["b"][1].steps
        flat_a = torch.cat([p.reshape(-1) for p in runs["a"][0].parameters()])
        flat_b = torch.cat([p.reshape(-1) for p in runs["b"][0].parameters()])
        rel = (flat_a - flat_b).abs().max() / flat_a.abs().max()
        assert rel.item() < 1e-6

    def test_rerun_is_bit_exact(self, tmp_path):
        """Same config + seed (dropout on) reproduces every tensor exactly."""
        examples = tiny_cls_examples(16)
        finals = []
        for tag in ("r1", "r2"):
            model = tiny_cls_model(dropout_p=0.1)
            res = train(model, examples, quiet_cfg(tmp_path / tag))
            finals.append((dict(model.named_parameters()), res.final_train_loss))
        assert finals[0][1] == finals[1][1]
        for name, t in finals[0][0].items():
            assert torch.equal(t, finals[1][0][name]), name

    def test_loss_decreases(self, tmp_path):
        model = tiny_cls_model()
        examples = tiny_cls_examples(24)
        cfg = quiet_cfg(tmp_path, num_train_epochs=6.0, learning_rate=1e-2,
                        tracking_uri=str(tmp_path / "tr"))
        train(model, examples, cfg)
        events = read_run(tmp_path / "tr" / "run-run.jsonl")
        losses = [e.values["loss"] for e in events if e.kind == "train"]
        assert losses[-1] < losses[0]


class TestNonFiniteLoss:
    def test_nan_aborts_with_diagnostic(self, tmp_path):
        model = tiny_cls_model()
        with torch.no_grad():
            model.head.proj.weight.fill_(float("nan"))
        cfg = quiet_cfg(tmp_path, tracking_uri=str(tmp_path / "tr"))
        with pytest.raises(RuntimeError, match="non-finite"):
            train(model, tiny_cls_examples(8), cfg)
        events = read_run(tmp_path / "tr" / "run-run.jsonl")
        assert events[-1].kind == "diagnostic"
        assert "non-finite" in events[-1].values["error"]


class TestTracking:
    def test_round_trip_and_kinds(self, tmp_path):
        with TrackingWriter(tmp_path, "t1") as w:
            w.log(0, "config", lr=0.1)
            w.log(1, "train", loss=2.0)
            w.log(1, "eval", accuracy=0.5)
            w.log(2, "eval", accuracy=0.75)
        events = read_run(tmp_path / "run-t1.jsonl")
        assert [e.kind for e in events] == ["config", "train", "eval", "eval"]
        assert events[1].values == {"loss": 2.0}
        assert metric_curve(events, "accuracy") == [(1, 0.5), (2, 0.75)]

    def test_steps_must_not_decrease(self, tmp_path):
        with TrackingWriter(tmp_path, "t2") as w:
            w.log(5, "train", loss=1.0)
            with pytest.raises(ValueError, match="decreased"):
                w.log(4, "train", loss=1.0)

    def test_closed_writer_rejects_log(self, tmp_path):
        w = TrackingWriter(tmp_path, "t3")
        w.close()
        with pytest.raises(ValueError, match="closed"):
            w.log(0, "train")

    def test_flush_is_immediate(self, tmp_path):
        w = TrackingWriter(tmp_path, "t4")
        w.log(0, "train", loss=1.5)
        assert len(read_run(w.path)) == 1  # readable before close
        w.close()

    def test_read_run_names_bad_line(self, tmp_path):
        path = tmp_path / "run-x.jsonl"
        path.write_text('{"step": 0, "kind": "train"}\nbroken\n')
        with pytest.raises(ValueError, match="line 2"):
            read_run(path)

    def test_train_steps_monotone(self, tmp_path):
        model = tiny_cls_model()
        cfg = quiet_cfg(tmp_path, tracking_uri=str(tmp_path / "tr"),
                        evaluation_strategy="epoch")
        train(model, tiny_cls_examples(16), cfg, eval_examples=tiny_cls_examples(8))
        steps = [e.step for e in read_run(tmp_path / "tr" / "run-run.jsonl")]
        assert steps == sorted(steps)


class TestEvaluate:
    def test_restores_max_len_and_mode(self, tmp_path):
        model = tiny_cls_model()
        model.backbone.set_mode(DropoutMode.TRAIN)
        saved = model.max_len
        out = evaluate(model, tiny_cls_examples(8), max_len=6)
        assert model.max_len == saved
        assert model.backbone.mode is DropoutMode.EVAL
        assert set(out) >= {"accuracy", "macro_f1", "loss"}

    def test_matthews_flag(self):
        model = tiny_cls_model()
        out = evaluate(model, tiny_cls_examples(8), matthews=True)
        assert "matthews" in out

    def test_eval_history_and_best(self, tmp_path):
        model = tiny_cls_model()
        cfg = quiet_cfg(tmp_path, num_train_epochs=3.0, evaluation_strategy="epoch",
                        save_checkpoints=True, output_dir=str(tmp_path / "out"))
        res = train(model, tiny_cls_examples(24), cfg, eval_examples=tiny_cls_examples(12))
        accs = [h["accuracy"] for h in res.eval_history]
        assert res.best_metric == max(accs)
        # strict improvement: best_step is the FIRST step attaining the max
        first = next(h["step"] for h in res.eval_history if h["accuracy"] == max(accs))
        assert res.best_step == first
        assert (tmp_path / "out" / "checkpoint-best" / "manifest.json").exists()
        assert (tmp_path / "out" / "checkpoint-final" / "manifest.json").exists()


class TestCheckpoints:
    def test_save_load_bit_exact(self, tmp_path):
        model = tiny_cls_model()
        train(model, tiny_cls_examples(16), quiet_cfg(tmp_path))
        save_task_model(model, tmp_path / "ck")
        loaded = load_task_model(tmp_path / "ck")
        want = dict(model.named_parameters())
        got = dict(loaded.named_parameters())
        assert set(want) == set(got)
        for name, t in want.items():
            assert torch.equal(t, got[name]), name
        batch = model.collate(model.prepare(tiny_cls_examples(6)))
        assert torch.equal(loaded.class_logits(batch), model.class_logits(batch))

    def test_repeated_saves_are_byte_identical(self, tmp_path):
        model = tiny_cls_model()
        save_task_model(model, tmp_path / "c1")
        save_task_model(model, tmp_path / "c2")
        for rel in ("manifest.json", "config.json", "task.json", "vocab.txt"):
            assert (tmp_path / "c1" / rel).read_bytes() == (tmp_path / "c2" / rel).read_bytes()
        for f1 in sorted((tmp_path / "c1" / "params").iterdir()):
            f2 = tmp_path / "c2" / "params" / f1.name
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_peft_reinjection_on_load(self, tmp_path):
        model = tiny_cls_model()
        apply_model_tuning(model, TuningPlan("lora", lora_rank=2))
        train(model, tiny_cls_examples(16), quiet_cfg(tmp_path))
        save_task_model(model, tmp_path / "ck")
        loaded = load_task_model(tmp_path / "ck")
        assert isinstance(loaded.backbone.layers[0].attn.q_proj, LoRALinear)
        for name, t in model.named_parameters():
            assert torch.equal(t, dict(loaded.named_parameters())[name]), name

    def test_load_peft_into_fresh_base(self, tmp_path):
        model = tiny_cls_model()
        apply_model_tuning(model, TuningPlan("lora", lora_rank=2))
        train(model, tiny_cls_examples(16), quiet_cfg(tmp_path))
        save_task_model(model, tmp_path / "ck")
        fresh = tiny_cls_model()  # same seed -> bit-identical frozen base
        load_peft_into(fresh, tmp_path / "ck")
        batch = model.collate(model.prepare(tiny_cls_examples(6)))
        got = fresh.backbone(batch["ids"], batch["attention_mask"])
        want = model.backbone(batch["ids"], batch["attention_mask"])
        assert torch.equal(got, want)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_checkpoint(tmp_path)

    def test_bad_format_version(self, tmp_path):
        model = tiny_cls_model()
        save_task_model(model, tmp_path / "ck")
        mpath = tmp_path / "ck" / "manifest.json"
        m = json.loads(mpath.read_text())
        m["format_version"] = 99
        mpath.write_text(json.dumps(m))
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(tmp_path / "ck")

    def test_load_parameters_mismatches(self):
        src = torch.nn.Linear(3, 3)
        dst = torch.nn.Linear(3, 3)
        tensors = state_tensors(src)
        with pytest.raises(ValueError, match="missing"):
            load_parameters(dst, {"weight": tensors["weight"]})
        with pytest.raises(ValueError, match="unexpected"):
            load_parameters(dst, {**tensors, "extra": torch.zeros(1)})
        bad = dict(tensors)
        bad["weight"] = torch.zeros(2, 3)
        with pytest.raises(ValueError, match="shape"):
            load_parameters(dst, bad)

    def test_load_named_subset_errors(self):
        dst = torch.nn.Linear(3, 3)
        with pytest.raises(ValueError, match="no parameter named"):
            load_named_subset(dst, {"nope": torch.zeros(1)})
        with pytest.raises(ValueError, match="shape"):
            load_named_subset(dst, {"weight": torch.zeros(2, 2)})

    def test_save_checkpoint_shape_guard(self, tmp_path):
        model = tiny_cls_model()
        save_checkpoint(tmp_path / "ck", model.config, model.tokenizer,
                        state_tensors(model), task=model.task_dict())
        # corrupt one tensor file with the wrong shape
        some = next((tmp_path / "ck" / "params").glob("*.npy"))
        import numpy as np

        np.save(some, np.zeros((1, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(tmp_path / "ck")


class TestUserDefined:
    def test_parse_values(self):
        out = parse_user_defined('a=1 b=x c=[1,2] d=true e=1.5')
        assert out == {"a": 1, "b": "x", "c": [1, 2], "d": True, "e": 1.5}

    def test_empty(self):
        assert parse_user_defined("") == {}

    def test_not_key_value(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_user_defined("nonsense")


def write_dataset(tmp_path: Path) -> Path:
    d = tmp_path / "data"
    d.mkdir()
    save_jsonl(tiny_cls_examples(24), d / "train.jsonl")
    save_jsonl(tiny_cls_examples(8), d / "dev.jsonl")
    return d


class TestRunCli:
    def base_args(self, tmp_path, data_dir):
        return [
            "--model_name_or_path", "fresh",
            "--data_dir", str(data_dir),
            "--output_dir", str(tmp_path / "out"),
            "--task_name", "tiny",
            "--task_type", "head_cls",
            "--max_seq_length", "16",
            "--num_train_epochs", "2",
            "--learning_rate", "1e-3",
            "--do_train", "--do_eval",
            "--user_defined", "num_labels=2 hidden_size=16 num_layers=1 num_heads=2",
        ]

    def test_train_eval_success(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        rc = run_cli(self.base_args(tmp_path, data))
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        metrics = json.loads(lines[-1])
        assert "eval_accuracy" in metrics and "train_loss" in metrics
        assert (tmp_path / "out" / "checkpoint-final" / "manifest.json").exists()

    def test_use_freezing_reports_counts(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        rc = run_cli(self.base_args(tmp_path, data) + ["--use_freezing"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "trainable parameters:" in out
        shown = out.splitlines()[0].split(":")[1].strip()
        trainable, total = (int(x) for x in shown.split("/"))
        assert 0 < trainable < total
        assert trainable == 16 * 2 + 2  # frozen backbone leaves only the CLS head

    def test_resume_from_checkpoint_dir(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        assert run_cli(self.base_args(tmp_path, data)) == 0
        args = self.base_args(tmp_path, data)
        args[1] = str(tmp_path / "out" / "checkpoint-final")  # model_name_or_path
        args[5] = str(tmp_path / "out2")
        assert run_cli(args) == 0

    def test_unknown_dataset_exits_2(self, tmp_path):
        rc = run_cli([
            "--model_name_or_path", "fresh",
            "--output_dir", str(tmp_path / "out"),
            "--task_name", "no_such_registered_ds",
            "--task_type", "head_cls",
            "--do_train",
        ])
        assert rc == 2

    def test_unknown_task_type_exits_2(self, tmp_path):
        data = write_dataset(tmp_path)
        args = self.base_args(tmp_path, data)
        args[args.index("head_cls")] = "no_such_task"
        assert run_cli(args) == 2

    def test_bad_tuning_strategy_exits_2(self, tmp_path):
        data = write_dataset(tmp_path)
        args = self.base_args(tmp_path, data)
        args[-1] += " tuning=bogus"
        assert run_cli(args) == 2

    def test_report_subcommand(self, tmp_path, capsys):
        data = write_dataset(tmp_path)
        args = self.base_args(tmp_path, data) + ["--tracking_uri", str(tmp_path / "tr")]
        assert run_cli(args) == 0
        run_file = next((tmp_path / "tr").glob("run-*.jsonl"))
        capsys.readouterr()
        assert run_cli(["report", str(run_file)]) == 0
        out = capsys.readouterr().out
        assert "train steps:" in out and "eval @ step" in out

    def test_report_missing_file_exits_1(self, tmp_path):
        assert run_cli(["report", str(tmp_path / "nope.jsonl")]) == 1
