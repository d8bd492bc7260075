"""Universal information extraction: one model, any entity type by instruction.

A single-type span scorer is trained over instruction-wrapped text ("Find
all color entities in the text: ..."), so the requested entity type lives in
the input, not in the head. Extraction for a new type is just a new
instruction. Includes an HTTP service and the `hugie` command-line tool.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import torch

from .config import DropoutMode, ModelConfig
from .data import (
    DEFAULT_EXTRACTIVE_PATTERN,
    Example,
    build_inference_instructions,
    load_dataset,
    pad_batch,
)
from .heads import decode_spans
from .tasks import ExtractiveInstructionModel, build_task_model
from .tokenizer import build_tokenizer
from .training import TrainConfig, evaluate, load_task_model, save_task_model, train

MAX_REQUEST_TEXT_CHARS = 10_000


@dataclass
class ExtractionRequest:
    text: str
    types: list[str]


@dataclass
class ExtractionResult:
    """One extracted span, in character offsets of the original text."""

    type: str
    start: int
    end: int
    text: str
    score: float

    def to_dict(self) -> dict:
        return {
            "type": self.type,
            "start": self.start,
            "end": self.end,
            "text": self.text,
            "score": self.score,
        }


@torch.no_grad()
def extract(
    model: ExtractiveInstructionModel,
    text: str,
    types: list[str],
    threshold: float | None = None,
) -> list[ExtractionResult]:
    """Run one instruction per requested type; project spans back to text.

    Predicted spans that touch instruction scaffolding (not the {text} slot)
    are discarded. Results are sorted by (start, end, type).
    """
    if model.task_type != "extractive_instruction":
        raise ValueError("extract() needs an extractive-instruction model")
    thr = model.threshold if threshold is None else threshold
    prev_mode = model.backbone.mode
    model.backbone.set_mode(DropoutMode.EVAL)
    try:
        encs, _ = build_inference_instructions(
            text, types, model.tokenizer, model.max_len, model.pattern
        )
        results: list[ExtractionResult] = []
        for enc in encs:
            ids, mask = pad_batch([enc.ids], model.tokenizer.pad_id)
            scores = model.head(model.encoder(ids, mask), mask)
            for s in decode_spans(scores, mask, thr)[0]:
                try:
                    cs, ce = enc.char_span_for_tokens(s.start, s.end)
                except ValueError:
                    continue  # span lies on scaffolding tokens
                results.append(
                    ExtractionResult(enc.entity_type, cs, ce, text[cs:ce], s.score)
                )
        results.sort(key=lambda r: (r.start, r.end, r.type))
        return results
    finally:
        model.backbone.set_mode(prev_mode)


def pretrain(
    train_examples: list[Example],
    types: list[str],
    output_dir: str | Path,
    dev_examples: list[Example] | None = None,
    *,
    seed: int = 42,
    hidden_size: int = 64,
    num_layers: int = 2,
    num_heads: int = 2,
    max_seq_len: int = 64,
    dropout_p: float = 0.1,
    epochs: float = 6.0,
    learning_rate: float = 1e-3,
    batch_size: int = 16,
    pattern: str = DEFAULT_EXTRACTIVE_PATTERN,
    tracking_uri: str | None = None,
    extra_corpus: list[str] | None = None,
) -> tuple[ExtractiveInstructionModel, dict]:
    """Train a universal extractor from span-annotated examples.

    The tokenizer is built from the training texts plus the instruction
    pattern and type names (instruction words must be encodable).
    """
    corpus = [ex.text_a for ex in train_examples]
    corpus.append(pattern.replace("{type}", " ").replace("{text}", " "))
    corpus.append(" ".join(types))
    if extra_corpus:
        corpus.extend(extra_corpus)
    tokenizer = build_tokenizer(corpus, max_vocab=4000)
    config = ModelConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=hidden_size,
        num_layers=num_layers,
        num_heads=num_heads,
        max_seq_len=max_seq_len,
        dropout_p=dropout_p,
        architecture="encoder",
        seed=seed,
    )
    options = {"types": list(types), "pattern": pattern, "max_seq_length": max_seq_len}
    model = build_task_model("extractive_instruction", config, tokenizer, options)
    cfg = TrainConfig(
        output_dir=str(output_dir),
        learning_rate=learning_rate,
        num_train_epochs=epochs,
        train_batch_size=batch_size,
        evaluation_strategy="epoch" if dev_examples else "no",
        seed=seed,
        tracking_uri=tracking_uri,
        run_id=f"uie-{seed}",
    )
    result = train(model, train_examples, cfg, eval_examples=dev_examples)
    metrics = {"train_loss": result.final_train_loss, "steps": result.steps}
    if result.best_metric is not None:
        metrics["best_f1"] = result.best_metric
    return model, metrics


# -- HTTP service ------------------------------------------------------------------


def _handler_for(model: ExtractiveInstructionModel):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # keep test output quiet
            pass

        def _send(self, code: int, payload: dict) -> None:
            body = json.dumps(payload, sort_keys=True).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok"})
            else:
                self._send(404, {"error": f"no such path {self.path}"})

        def do_POST(self):
            if self.path != "/extract":
                self._send(404, {"error": f"no such path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                req = json.loads(raw)
                if not isinstance(req, dict):
                    raise ValueError("request body must be a JSON object")
                text = req["text"]
                types = req["types"]
                if not isinstance(text, str):
                    raise ValueError("'text' must be a string")
                if len(text) > MAX_REQUEST_TEXT_CHARS:
                    raise ValueError(
                        f"text too long ({len(text)} chars > {MAX_REQUEST_TEXT_CHARS})"
                    )
                if not isinstance(types, list) or not all(isinstance(t, str) for t in types):
                    raise ValueError("'types' must be a list of strings")
                if not types:
                    raise ValueError("'types' must not be empty")
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                msg = f"missing field {e}" if isinstance(e, KeyError) else str(e)
                self._send(400, {"error": msg})
                return
            spans = extract(model, text, types)
            self._send(200, {"spans": [s.to_dict() for s in spans]})

    return Handler


def make_server(model: ExtractiveInstructionModel, host: str = "127.0.0.1", port: int = 0):
    """ThreadingHTTPServer ready to serve_forever(); port 0 picks a free port."""
    return ThreadingHTTPServer((host, port), _handler_for(model))


def serve(model: ExtractiveInstructionModel, host: str = "127.0.0.1", port: int = 8600) -> None:
    server = make_server(model, host, port)
    print(f"serving on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    finally:
        server.server_close()


# -- CLI ------------------------------------------------------------------------------


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hugie", description="Universal information extraction.")
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="extract entities from one text")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--text", required=True)
    ex.add_argument("--types", required=True, help="comma-separated entity types")
    ex.add_argument("--threshold", type=float, default=None)

    pt = sub.add_parser("pretrain", help="train an extractor on a span dataset")
    pt.add_argument("--dataset", required=True,
                    help="registered dataset name or a directory of JSONL splits")
    pt.add_argument("--output_dir", required=True)
    pt.add_argument("--types", required=True, help="comma-separated entity types")
    pt.add_argument("--seed", type=int, default=42)
    pt.add_argument("--num_train_epochs", type=float, default=6.0)
    pt.add_argument("--learning_rate", type=float, default=1e-3)
    pt.add_argument("--hidden_size", type=int, default=64)
    pt.add_argument("--num_layers", type=int, default=2)
    pt.add_argument("--num_heads", type=int, default=2)
    pt.add_argument("--max_seq_length", type=int, default=64)
    pt.add_argument("--tracking_uri", default=None)

    sv = sub.add_parser("serve", help="run the extraction HTTP service")
    sv.add_argument("--checkpoint", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8600)
    return p


def _load_extractor(ckpt: str) -> ExtractiveInstructionModel:
    model = load_task_model(ckpt)
    if not isinstance(model, ExtractiveInstructionModel):
        raise ValueError(f"{ckpt} holds a {model.task_type!r} model, not an extractor")
    return model


def run_cli(argv: list[str]) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.command == "extract":
            model = _load_extractor(args.checkpoint)
            types = [t for t in args.types.split(",") if t]
            spans = extract(model, args.text, types, threshold=args.threshold)
            print(json.dumps({"spans": [s.to_dict() for s in spans]}, sort_keys=True))
            return 0
        if args.command == "pretrain":
            train_examples = load_dataset(args.dataset, "train")
            try:
                dev_examples = load_dataset(args.dataset, "dev")
            except (ValueError, FileNotFoundError):
                dev_examples = None
            types = [t for t in args.types.split(",") if t]
            model, metrics = pretrain(
                train_examples,
                types,
                args.output_dir,
                dev_examples=dev_examples,
                seed=args.seed,
                hidden_size=args.hidden_size,
                num_layers=args.num_layers,
                num_heads=args.num_heads,
                max_seq_len=args.max_seq_length,
                epochs=args.num_train_epochs,
                learning_rate=args.learning_rate,
                tracking_uri=args.tracking_uri,
            )
            save_task_model(model, Path(args.output_dir) / "checkpoint-final")
            if dev_examples:
                metrics.update(
                    {f"eval_{k}": v for k, v in evaluate(model, dev_examples).items()}
                )
            print(json.dumps(metrics, sort_keys=True))
            return 0
        if args.command == "serve":
            model = _load_extractor(args.checkpoint)
            serve(model, args.host, args.port)
            return 0
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
