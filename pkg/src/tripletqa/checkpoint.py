"""Versioned checkpoint container.

A checkpoint is a NumPy ``.npz`` archive (a zip of ``.npy`` member files)
holding:

* ``meta``              — 0-d unicode array with a JSON object: format
  version, backbone config, adaptation mode, tokenizer vocabulary, step,
  training config, and the optimizer's param-group settings.
* ``param/<name>``      — one array per model parameter, named by its
  ``named_parameters()`` path.
* ``opt/<idx>/<key>``   — optimizer state arrays (``exp_avg``,
  ``exp_avg_sq``, ``step``) keyed by the trainable-parameter index, present
  only when the checkpoint carries optimizer state.

Loading restores parameters bit-for-bit, so resuming reproduces the next
step exactly under a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import BackboneConfig, TinyCausalLM
from .errors import BackboneError
from .prompting import ToyTokenizer

FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    meta: dict
    params: dict  # name -> np.ndarray
    opt_state: dict  # idx -> {key: np.ndarray}

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def save_checkpoint(
    path,
    model: TinyCausalLM,
    vocab: list[str],
    step: int,
    train_config: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    config_hash: str | None = None,
) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "backbone": model.config.to_dict(),
        "mode": model.mode,
        "vocab": vocab,
        "step": step,
        "train_config": train_config,
        "config_hash": config_hash,
        "param_groups": None,
    }
    arrays = {
        f"param/{name}": p.detach().cpu().numpy()
        for name, p in model.named_parameters()
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        groups = []
        for g in sd["param_groups"]:
            g = dict(g)
            g["betas"] = list(g.get("betas", (0.9, 0.999)))
            groups.append(g)
        meta["param_groups"] = groups
        for idx, state in sd["state"].items():
            for key, value in state.items():
                arrays[f"opt/{idx}/{key}"] = (
                    value.detach().cpu().numpy()
                    if isinstance(value, torch.Tensor)
                    else np.asarray(value)
                )
    np.savez(path, meta=np.asarray(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> CheckpointData:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise BackboneError(
                f"unsupported checkpoint format version {meta.get('format_version')}"
            )
        params, opt_state = {}, {}
        for key in archive.files:
            if key.startswith("param/"):
                params[key[len("param/") :]] = archive[key]
            elif key.startswith("opt/"):
                _, idx, state_key = key.split("/", 2)
                opt_state.setdefault(int(idx), {})[state_key] = archive[key]
    return CheckpointData(meta=meta, params=params, opt_state=opt_state)


def model_from_checkpoint(ckpt: CheckpointData) -> tuple[TinyCausalLM, ToyTokenizer]:
    config = BackboneConfig.from_dict(ckpt.meta["backbone"])
    model = TinyCausalLM(config, mode=ckpt.meta["mode"])
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    tokenizer = ToyTokenizer(ckpt.meta["vocab"])
    if len(tokenizer) != config.vocab_size:
        raise BackboneError(
            f"checkpoint vocab size {len(tokenizer)} != config vocab_size "
            f"{config.vocab_size}"
        )
    return model, tokenizer


def restore_optimizer(
    optimizer: torch.optim.Optimizer, ckpt: CheckpointData
) -> None:
    """Load saved optimizer state into a freshly built optimizer."""
    if not ckpt.opt_state:
        raise BackboneError("checkpoint carries no optimizer state")
    groups = ckpt.meta.get("param_groups")
    sd = optimizer.state_dict()
    restored_groups = []
    for saved, current in zip(groups, sd["param_groups"]):
        g = dict(saved)
        g["betas"] = tuple(g["betas"])
        g["params"] = current["params"]
        restored_groups.append(g)
    state = {
        idx: {key: torch.from_numpy(arr.copy()) for key, arr in entries.items()}
        for idx, entries in ckpt.opt_state.items()
    }
    optimizer.load_state_dict({"state": state, "param_groups": restored_groups})
