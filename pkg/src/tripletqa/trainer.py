"""Training loop for the three-task objective with bridging.

Each step processes every enabled rendering of the same example batch
(task-parallel multi-tasking): evidence generation, evidence-conditioned QA
together with its plain twin for the bridging KL, and question restoration.
One optimizer update touches only the parameters selected by the adaptation
mode; the frozen backbone never changes.

Determinism contract: the data order is a pure function of (seed, epoch),
rendering is pure, and the model runs without dropout, so identical
seed/config/corpus give byte-identical training logs, and resuming from a
checkpoint reproduces the remaining log lines exactly.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .backbone import ADAPTATION_MODES, BackboneConfig, TinyCausalLM
from .checkpoint import (
    CheckpointData,
    load_checkpoint,
    model_from_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .corpus import TripletExample
from .errors import TrainingDiverged, TrainingError
from .manifest import config_hash
from .objectives import LossBreakdown, LossWeights, batch_sequence_nll, kl_bridging, triplet_total
from .prompting import RenderedInstance, ToyTokenizer, build_pair_for_bridging, render

ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lr: float = 3e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    batch_size: int = 8
    epochs: int = 3
    max_steps: int | None = None
    seed: int = 0
    adaptation_mode: str = "adapters"
    eaq_include_document: bool = False
    kl_direction: str = "forward"
    kl_teacher_stopgrad: bool = False
    max_len: int = 512
    instructions: tuple[tuple[str, str], ...] | None = None  # template overrides

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.adaptation_mode not in ADAPTATION_MODES:
            raise ValueError(f"unknown adaptation mode {self.adaptation_mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def instruction_overrides(self) -> dict[str, str] | None:
        return dict(self.instructions) if self.instructions else None

    def to_dict(self) -> dict:
        d = {
            "weights": self.weights.to_dict(),
            "backbone": self.backbone.to_dict(),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "grad_clip": self.grad_clip,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "adaptation_mode": self.adaptation_mode,
            "eaq_include_document": self.eaq_include_document,
            "kl_direction": self.kl_direction,
            "kl_teacher_stopgrad": self.kl_teacher_stopgrad,
            "max_len": self.max_len,
            "instructions": [list(kv) for kv in self.instructions] if self.instructions else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights.from_dict(d.get("weights", {}))
        d["backbone"] = BackboneConfig.from_dict(d.get("backbone", {}))
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        if d.get("instructions"):
            d["instructions"] = tuple((k, v) for k, v in d["instructions"])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------------------
# Rendering cache


@dataclass
class RenderCache:
    """All enabled task renderings per example, built once per corpus.

    Examples that cannot render every enabled task are dropped and counted,
    so each batch carries the full set of enabled instances.
    """

    instances: dict[str, dict[str, RenderedInstance]]  # example id -> task -> instance
    dropped: list[tuple[str, str]]
    tasks: tuple[str, ...]

    @property
    def instance_count(self) -> int:
        return sum(len(v) for v in self.instances.values())

    def batch(self, example_ids: Sequence[str], task: str) -> list[RenderedInstance]:
        return [self.instances[ex_id][task] for ex_id in example_ids]


def enabled_tasks(weights: LossWeights) -> tuple[str, ...]:
    tasks = ["QEA"]
    if weights.use_kl:
        tasks.append("QA_PLAIN")
    if weights.use_qae:
        tasks.append("QAE")
    if weights.use_eaq:
        tasks.append("EAQ")
    return tuple(tasks)


def build_render_cache(
    corpus: Sequence[TripletExample],
    config: TrainConfig,
    tokenizer: ToyTokenizer,
) -> RenderCache:
    tasks = enabled_tasks(config.weights)
    instructions = config.instruction_overrides
    instances: dict[str, dict[str, RenderedInstance]] = {}
    dropped: list[tuple[str, str]] = []
    for ex in corpus:
        rendered: dict[str, RenderedInstance] = {}
        try:
            if "QA_PLAIN" in tasks:
                qea, qa_plain = build_pair_for_bridging(
                    ex, tokenizer, config.max_len, instructions=instructions
                )
                rendered["QEA"], rendered["QA_PLAIN"] = qea, qa_plain
            else:
                rendered["QEA"] = render(
                    "QEA", ex, tokenizer, config.max_len, instructions=instructions
                )
            if "QAE" in tasks:
                rendered["QAE"] = render(
                    "QAE", ex, tokenizer, config.max_len, instructions=instructions
                )
            if "EAQ" in tasks:
                rendered["EAQ"] = render(
                    "EAQ",
                    ex,
                    tokenizer,
                    config.max_len,
                    instructions=instructions,
                    eaq_include_document=config.eaq_include_document,
                )
        except Exception as e:  # PromptError and corpus-level issues alike
            dropped.append((ex.id, str(e)))
            continue
        instances[ex.id] = rendered
    return RenderCache(instances=instances, dropped=dropped, tasks=tasks)


def pad_batch(
    instances: Sequence[RenderedInstance], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(inst.token_ids) for inst in instances)
    ids = torch.full((len(instances), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(instances), width), dtype=torch.bool)
    for i, inst in enumerate(instances):
        n = len(inst.token_ids)
        ids[i, :n] = torch.as_tensor(inst.token_ids, dtype=torch.long)
        mask[i, :n] = torch.as_tensor(inst.loss_mask, dtype=torch.bool)
    return ids, mask


# ---------------------------------------------------------------------------
# State and steps


@dataclass
class TrainState:
    config: TrainConfig
    model: TinyCausalLM
    optimizer: torch.optim.Optimizer
    tokenizer: ToyTokenizer
    step: int = 0

    def frozen_parameter_hash(self) -> str:
        """Hash of all non-trainable parameters (freezing contract checks)."""
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters()):
            if not p.requires_grad:
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_state(config: TrainConfig, tokenizer: ToyTokenizer) -> TrainState:
    torch.manual_seed(config.seed)
    backbone = replace(config.backbone, vocab_size=len(tokenizer))
    model = TinyCausalLM(backbone, mode=config.adaptation_mode)
    trainable = model.trainable_parameters()
    if not trainable:
        raise TrainingError("no trainable parameters under the selected mode")
    optimizer = torch.optim.AdamW(
        trainable,
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    return TrainState(config=config, model=model, optimizer=optimizer, tokenizer=tokenizer)


def _forward_nll(model, instances, pad_id):
    ids, mask = pad_batch(instances, pad_id)
    out = model.forward_output(ids)
    return out.logits, batch_sequence_nll(out.logits, ids, mask)


def _bridging_kl(model, config, qa_plain_instances, qea_instances, qea_logits, pad_id):
    ids, _ = pad_batch(qa_plain_instances, pad_id)
    plain_logits = model.forward_output(ids).logits
    terms = []
    for i, (plain, ev) in enumerate(zip(qa_plain_instances, qea_instances)):
        terms.append(
            kl_bridging(
                plain_logits[i],
                qea_logits[i],
                plain.target_positions,
                ev.target_positions,
                direction=config.kl_direction,
                stopgrad_evidence=config.kl_teacher_stopgrad,
            )
        )
    return torch.stack(terms).mean()


def train_step(
    state: TrainState,
    example_ids: Sequence[str],
    cache: RenderCache,
) -> LossBreakdown:
    """One optimizer update over all enabled renderings of the batch."""
    config = state.config
    weights = config.weights
    pad_id = state.tokenizer.pad_id

    qea_instances = cache.batch(example_ids, "QEA")
    qea_logits, l_seq = _forward_nll(state.model, qea_instances, pad_id)
    l_kl = None
    if weights.use_kl:
        plain_instances = cache.batch(example_ids, "QA_PLAIN")
        l_kl = _bridging_kl(
            state.model, config, plain_instances, qea_instances, qea_logits, pad_id
        )
    l_qae = None
    if weights.use_qae:
        _, l_qae = _forward_nll(state.model, cache.batch(example_ids, "QAE"), pad_id)
    l_eaq = None
    if weights.use_eaq:
        _, l_eaq = _forward_nll(state.model, cache.batch(example_ids, "EAQ"), pad_id)

    total, breakdown = triplet_total(
        weights, l_seq=l_seq, l_qae=l_qae, l_kl=l_kl, l_eaq=l_eaq
    )
    if not math.isfinite(breakdown.l_total):
        dump = [
            cache.instances[ex_id][task].to_debug_dict()
            for ex_id in example_ids
            for task in cache.tasks
            if task in cache.instances[ex_id]
        ]
        err = TrainingDiverged(
            f"non-finite loss at step {state.step + 1}: {breakdown.to_record()}"
        )
        err.dump = dump
        raise err

    state.optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            state.model.trainable_parameters(), config.grad_clip
        )
    state.optimizer.step()
    state.step += 1
    return breakdown


def epoch_batches(
    example_ids: Sequence[str], seed: int, epoch: int, batch_size: int
) -> list[list[str]]:
    """Deterministic shuffled batches: a pure function of (seed, epoch)."""
    order = sorted(example_ids)
    random.Random(f"{seed}:{epoch}").shuffle(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def mean_dev_l_seq(state: TrainState, dev_cache: RenderCache) -> float:
    """Teacher-forced QA loss over a held-out corpus (checkpoint selection)."""
    instances = [tasks["QEA"] for tasks in dev_cache.instances.values()]
    if not instances:
        raise TrainingError("dev corpus rendered no QA instances")
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(instances), state.config.batch_size):
            chunk = instances[i : i + state.config.batch_size]
            _, nll = _forward_nll(state.model, chunk, state.tokenizer.pad_id)
            total += float(nll) * len(chunk)
            count += len(chunk)
    return total / count


@dataclass
class TrainResult:
    state: TrainState
    log_path: Path
    checkpoint_path: Path
    last_checkpoint_path: Path
    final_breakdown: LossBreakdown | None
    best_dev_l_seq: float | None
    dropped_examples: list[tuple[str, str]]


def _log_line(f, record: dict) -> None:
    f.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
    f.write("\n")


def train(
    config: TrainConfig,
    corpus: Sequence[TripletExample],
    out_dir,
    dev_corpus: Sequence[TripletExample] | None = None,
    resume_from=None,
    tokenizer: ToyTokenizer | None = None,
) -> TrainResult:
    """Run the full loop: render, optimize, log, checkpoint.

    The best checkpoint (by dev QA loss when a dev corpus is given,
    otherwise the final state) lands in ``out_dir/checkpoint.npz``; the
    final state with optimizer state for resumption lands in
    ``out_dir/checkpoint_last.npz``.
    """
    if not corpus:
        raise TrainingError("empty corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.meta.get("train_config") is None:
            raise TrainingError("checkpoint carries no training config; cannot resume")
        saved_config = TrainConfig.from_dict(ckpt.meta["train_config"])
        if saved_config.hash() != config.hash():
            raise TrainingError("resume config differs from checkpoint config")
        model, tokenizer = model_from_checkpoint(ckpt)
        state = TrainState(
            config=config,
            model=model,
            optimizer=torch.optim.AdamW(
                model.trainable_parameters(),
                lr=config.lr,
                betas=config.betas,
                weight_decay=config.weight_decay,
            ),
            tokenizer=tokenizer,
            step=ckpt.step,
        )
        restore_optimizer(state.optimizer, ckpt)
    else:
        if tokenizer is None:
            tokenizer = ToyTokenizer.from_corpus(
                list(corpus) + list(dev_corpus or []),
                instructions=config.instruction_overrides,
            )
        state = init_state(config, tokenizer)

    cache = build_render_cache(corpus, config, state.tokenizer)
    if not cache.instances:
        raise TrainingError(
            f"no trainable examples ({len(cache.dropped)} dropped); "
            f"first drop: {cache.dropped[0] if cache.dropped else None}"
        )
    dev_cache = None
    if dev_corpus:
        dev_config = replace(config, weights=config.weights.ablated(use_kl=False, use_qae=False, use_eaq=False))
        dev_cache = build_render_cache(dev_corpus, dev_config, state.tokenizer)

    ids = sorted(cache.instances.keys())
    total_batches_per_epoch = math.ceil(len(ids) / config.batch_size)
    max_steps = config.max_steps or config.epochs * total_batches_per_epoch

    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.npz"
    last_path = out_dir / "checkpoint_last.npz"
    best_dev = None
    final_breakdown = None

    def save(path, with_optimizer=True):
        save_checkpoint(
            path,
            state.model,
            vocab=state.tokenizer.vocab,
            step=state.step,
            train_config=config.to_dict(),
            optimizer=state.optimizer if with_optimizer else None,
            config_hash=config.hash(),
        )

    with open(log_path, "w", encoding="utf-8") as log:
        global_step = 0
        epoch = 0
        stop = False
        while not stop:
            epoch += 1
            if config.max_steps is None and epoch > config.epochs:
                break
            epoch_records: list[LossBreakdown] = []
            for batch_ids in epoch_batches(ids, config.seed, epoch, config.batch_size):
                global_step += 1
                if global_step > max_steps:
                    stop = True
                    break
                if global_step <= state.step:
                    continue  # replaying the schedule up to the resume point
                try:
                    breakdown = train_step(state, batch_ids, cache)
                except TrainingDiverged as err:
                    dump_path = out_dir / "divergence_dump.json"
                    with open(dump_path, "w", encoding="utf-8") as f:
                        json.dump(getattr(err, "dump", []), f, indent=2)
                    err.dump_path = dump_path
                    raise
                final_breakdown = breakdown
                epoch_records.append(breakdown)
                _log_line(log, {"kind": "step", "step": state.step, **breakdown.to_record()})
            if epoch_records:
                n = len(epoch_records)
                mean_rec = {"kind": "epoch", "epoch": epoch, "steps": n}
                for key in ("l_seq", "l_total", "l_qae", "l_kl", "l_eaq"):
                    values = [getattr(b, key) for b in epoch_records]
                    if values[0] is not None:
                        mean_rec[f"mean_{key}"] = sum(values) / n
                _log_line(log, mean_rec)
                if dev_cache is not None:
                    dev_l_seq = mean_dev_l_seq(state, dev_cache)
                    _log_line(log, {"kind": "dev", "epoch": epoch, "l_seq": dev_l_seq})
                    if best_dev is None or dev_l_seq < best_dev:
                        best_dev = dev_l_seq
                        save(ckpt_path)
            if config.max_steps is None and epoch >= config.epochs:
                break

    save(last_path)
    if best_dev is None:
        save(ckpt_path)
    return TrainResult(
        state=state,
        log_path=log_path,
        checkpoint_path=ckpt_path,
        last_checkpoint_path=last_path,
        final_breakdown=final_breakdown,
        best_dev_l_seq=best_dev,
        dropped_examples=cache.dropped,
    )


def sweep_weight_grid(values: Sequence[float] = ALPHA_GRID) -> list[LossWeights]:
    """Every (alpha_qae, alpha_qea, alpha_eaq) combination over the grid."""
    combos = []
    for a1 in values:
        for a2 in values:
            for a3 in values:
                combos.append(LossWeights(alpha_qae=a1, alpha_qea=a2, alpha_eaq=a3))
    return combos
