"""Directory checkpoints: config + vocab + task metadata + one .npy per tensor.

Layout:
    config.json     backbone hyperparameters
    task.json       head/task metadata (optional)
    vocab.txt       tokenizer vocabulary, one token per line
    manifest.json   parameter name -> file/shape/dtype index
    params/*.npy    full-model tensors
    peft/*.npy      tensors introduced by parameter-efficient tuning

Tensors round-trip bit-exactly; JSON files use sorted keys so repeated saves
of identical state are byte-identical (manifest aside from nothing — no
timestamps are stored).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .tokenizer import Tokenizer

FORMAT_VERSION = 1


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _tensor_entry(name: str, t: torch.Tensor, rel_dir: str) -> dict:
    return {
        "file": f"{rel_dir}/{name}.npy",
        "shape": list(t.shape),
        "dtype": str(t.dtype).removeprefix("torch."),
    }


def _save_tensors(tensors: dict[str, torch.Tensor], root: Path, rel_dir: str) -> dict:
    d = root / rel_dir
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, t in sorted(tensors.items()):
        np.save(d / f"{name}.npy", t.detach().cpu().numpy())
        index[name] = _tensor_entry(name, t, rel_dir)
    return index


def save_checkpoint(
    ckpt_dir: str | Path,
    config: ModelConfig,
    tokenizer: Tokenizer,
    tensors: dict[str, torch.Tensor],
    task: dict | None = None,
    peft_tensors: dict[str, torch.Tensor] | None = None,
) -> Path:
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    config.save(root / "config.json")
    tokenizer.save(root / "vocab.txt")
    if task is not None:
        _dump_json(task, root / "task.json")
    manifest = {
        "format_version": FORMAT_VERSION,
        "parameters": _save_tensors(tensors, root, "params"),
        "peft_parameters": _save_tensors(peft_tensors or {}, root, "peft"),
    }
    _dump_json(manifest, root / "manifest.json")
    return root


@dataclass
class Checkpoint:
    config: ModelConfig
    tokenizer: Tokenizer
    tensors: dict[str, torch.Tensor]
    peft_tensors: dict[str, torch.Tensor]
    task: dict | None


def _load_index(root: Path, index: dict) -> dict[str, torch.Tensor]:
    out = {}
    for name, entry in index.items():
        arr = np.load(root / entry["file"])
        t = torch.from_numpy(arr)
        if list(t.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {name!r} shape {list(t.shape)} != manifest {entry['shape']}")
        out[name] = t
    return out


def load_checkpoint(ckpt_dir: str | Path) -> Checkpoint:
    root = Path(ckpt_dir)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    config = ModelConfig.load(root / "config.json")
    tokenizer = Tokenizer.from_vocab_file(root / "vocab.txt")
    task = None
    if (root / "task.json").exists():
        task = json.loads((root / "task.json").read_text(encoding="utf-8"))
    return Checkpoint(
        config=config,
        tokenizer=tokenizer,
        tensors=_load_index(root, manifest["parameters"]),
        peft_tensors=_load_index(root, manifest["peft_parameters"]),
        task=task,
    )


def state_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    """Named parameters as detached tensors (checkpoint source)."""
    return {name: p.detach() for name, p in module.named_parameters()}


def load_named_subset(module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    """Copy a named subset (e.g. PEFT tensors) into a module; names must exist."""
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name, t in tensors.items():
            if name not in params:
                raise ValueError(f"no parameter named {name!r} in model")
            if tuple(t.shape) != tuple(params[name].shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {tuple(t.shape)} vs model "
                    f"{tuple(params[name].shape)}"
                )
            params[name].copy_(t.to(params[name].dtype))


def load_parameters(module: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    """Copy tensors into module parameters by name; any mismatch is an error."""
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    unexpected = sorted(set(tensors) - set(params))
    if missing:
        raise ValueError(f"checkpoint missing parameters: {', '.join(missing)}")
    if unexpected:
        raise ValueError(f"checkpoint has unexpected parameters: {', '.join(unexpected)}")
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {tuple(t.shape)} vs model {tuple(p.shape)}"
                )
            p.copy_(t.to(p.dtype))
