"""Causal language model with learnable key/value prefix adapters.

The default backbone is a small pre-norm transformer that runs in seconds on
CPU. Three adaptation modes control which parameters train:

* ``adapters`` — per-layer prefix matrices prepended to every attention
  layer's keys and values; the backbone stays frozen.
* ``lora``     — low-rank factors injected into selected attention
  projections; the backbone stays frozen.
* ``full``     — every backbone parameter trains.

Any pretrained model can stand in for the toy backbone by satisfying the
``CausalBackbone`` protocol (forward, generate, trainable_parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import torch
from torch import nn

from .errors import BackboneError

ADAPTATION_MODES = ("adapters", "lora", "full")


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    vocab_size: int = 64
    max_positions: int = 512
    adapter_count: int = 16
    lora_rank: int = 4
    lora_targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise BackboneError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.adapter_count < 0:
            raise BackboneError("adapter_count must be >= 0")
        bad = [t for t in self.lora_targets if t not in ("q", "k", "v", "o")]
        if bad:
            raise BackboneError(f"unknown lora targets {bad}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "adapter_count": self.adapter_count,
            "lora_rank": self.lora_rank,
            "lora_targets": list(self.lora_targets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["lora_targets"] = tuple(d.get("lora_targets", ("q", "v")))
        return cls(**d)


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (batch, seq, vocab)
    attentions: tuple[torch.Tensor, ...] | None = None  # per layer (batch, heads, seq, keys)


class CausalBackbone(Protocol):
    """Contract a pluggable pretrained backbone must satisfy."""

    def forward_output(self, token_ids, capture_attention: bool = False) -> ForwardOutput: ...

    def generate(self, prompt_ids, max_new: int, eos_id: int, strategy: str = "greedy") -> list[int]: ...

    def trainable_parameters(self) -> list[nn.Parameter]: ...


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r update B @ A."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.normal_(self.lora_a, std=0.02)

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T


class CausalSelfAttention(nn.Module):
    def __init__(self, config: BackboneConfig, use_adapters: bool):
        super().__init__()
        d = config.d_model
        self.heads = config.heads
        self.head_dim = d // config.heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.adapter_count = config.adapter_count if use_adapters else 0
        if self.adapter_count > 0:
            self.adapter_k = nn.Parameter(torch.empty(self.adapter_count, d))
            self.adapter_v = nn.Parameter(torch.empty(self.adapter_count, d))
            nn.init.normal_(self.adapter_k, std=0.02)
            nn.init.normal_(self.adapter_v, std=0.02)

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, capture: bool = False):
        b, t, _ = x.shape
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))
        n_p = self.adapter_count
        if n_p > 0:
            # (n_p, d) -> (1, heads, n_p, head_dim), broadcast over the batch
            pk = self.adapter_k.view(n_p, self.heads, self.head_dim)
            pv = self.adapter_v.view(n_p, self.heads, self.head_dim)
            pk = pk.transpose(0, 1).unsqueeze(0).expand(b, -1, -1, -1)
            pv = pv.transpose(0, 1).unsqueeze(0).expand(b, -1, -1, -1)
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # position i may attend to every prefix column and token columns <= i
        cols = torch.arange(n_p + t, device=x.device)
        rows = torch.arange(t, device=x.device)
        allowed = (cols.unsqueeze(0) < n_p) | (cols.unsqueeze(0) - n_p <= rows.unsqueeze(1))
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(b, t, -1)
        return self.o_proj(y), (att if capture else None)


class Block(nn.Module):
    def __init__(self, config: BackboneConfig, use_adapters: bool):
        super().__init__()
        d = config.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(config, use_adapters)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, 4 * d, bias=False),
            nn.GELU(),
            nn.Linear(4 * d, d, bias=False),
        )

    def forward(self, x, capture: bool = False):
        a, att = self.attn(self.ln1(x), capture=capture)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, att


class TinyCausalLM(nn.Module):
    """Pre-norm causal transformer with optional K/V prefix adapters or LoRA."""

    def __init__(self, config: BackboneConfig, mode: str = "adapters"):
        super().__init__()
        if mode not in ADAPTATION_MODES:
            raise BackboneError(f"unknown adaptation mode {mode!r}")
        self.config = config
        self.mode = mode
        use_adapters = mode == "adapters"
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.max_positions, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config, use_adapters) for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        nn.init.normal_(self.wte.weight, std=0.02)
        nn.init.normal_(self.wpe.weight, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
        if mode == "lora":
            for block in self.blocks:
                attn = block.attn
                for target in config.lora_targets:
                    name = f"{target}_proj"
                    setattr(attn, name, LoRALinear(getattr(attn, name), config.lora_rank))
        self._apply_freezing()

    def _apply_freezing(self):
        if self.mode == "full":
            return
        trainable = ("adapter_k", "adapter_v") if self.mode == "adapters" else ("lora_a", "lora_b")
        for name, p in self.named_parameters():
            p.requires_grad = name.split(".")[-1] in trainable

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def _validate(self, ids: torch.Tensor):
        if ids.numel() == 0:
            raise BackboneError("empty input")
        if ids.size(-1) > self.config.max_positions:
            raise BackboneError(
                f"sequence length {ids.size(-1)} exceeds max positions "
                f"{self.config.max_positions}"
            )
        if int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size:
            raise BackboneError(
                f"token id outside vocabulary [0, {self.config.vocab_size})"
            )

    def forward_output(self, token_ids, capture_attention: bool = False) -> ForwardOutput:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        self._validate(ids)
        b, t = ids.shape
        pos = torch.arange(t, device=ids.device)
        x = self.wte(ids) + self.wpe(pos).unsqueeze(0)
        attentions = [] if capture_attention else None
        for block in self.blocks:
            x, att = block(x, capture=capture_attention)
            if capture_attention:
                attentions.append(att)
        logits = self.lm_head(self.ln_f(x))
        if squeeze:
            logits = logits.squeeze(0)
            if capture_attention:
                attentions = [a.squeeze(0) for a in attentions]
        return ForwardOutput(
            logits=logits,
            attentions=tuple(attentions) if capture_attention else None,
        )

    def forward(self, token_ids, capture_attention: bool = False) -> ForwardOutput:
        return self.forward_output(token_ids, capture_attention=capture_attention)

    @torch.no_grad()
    def generate(
        self,
        prompt_ids: Sequence[int],
        max_new: int,
        eos_id: int,
        strategy: str = "greedy",
    ) -> list[int]:
        """Greedy continuation; stops at EOS, ``max_new`` tokens, or the
        position limit. Returns only the newly generated ids (EOS excluded).
        """
        if strategy != "greedy":
            raise BackboneError(f"unsupported decoding strategy {strategy!r}")
        seq = list(prompt_ids)
        if len(seq) > self.config.max_positions:
            raise BackboneError("prompt exceeds max positions")
        out: list[int] = []
        while len(out) < max_new and len(seq) < self.config.max_positions:
            logits = self.forward_output(seq).logits
            next_id = int(torch.argmax(logits[-1]))
            if next_id == eos_id:
                break
            out.append(next_id)
            seq.append(next_id)
        return out


def count_trainable(config: BackboneConfig, mode: str) -> int:
    """Closed-form trainable parameter count per adaptation mode."""
    if mode not in ADAPTATION_MODES:
        raise BackboneError(f"unknown adaptation mode {mode!r}")
    d, L = config.d_model, config.layers
    if mode == "adapters":
        return 2 * L * config.adapter_count * d
    if mode == "lora":
        return 2 * config.lora_rank * d * len(config.lora_targets) * L
    # full: embeddings + positions + per-block (attn 4d^2 + mlp 8d^2 + two
    # LayerNorms 4d) + final LayerNorm + untied head
    return (
        config.vocab_size * d
        + config.max_positions * d
        + L * (12 * d * d + 4 * d)
        + 2 * d
        + d * config.vocab_size
    )
