"""Sequence losses, the distribution-bridging KL term, and their weighted sum.

Loss-mask convention: ``loss_mask[t]`` marks position ``t`` as a target
token, predicted from the logits row at ``t - 1`` (teacher forcing with gold
prefixes). Every loss is a mean over its loss-bearing tokens, so the
combination weights are independent of sequence length.

All log-probabilities are computed in the log domain with max subtraction
(``log_softmax``); the KL is evaluated from log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import BridgingAlignmentError

KL_DIRECTIONS = ("forward", "reverse", "symmetric")


@dataclass(frozen=True)
class LossWeights:
    """Objective weights plus ablation switches.

    ``alpha_qae``, ``alpha_qea``, ``alpha_eaq`` weight the evidence
    generation, question answering, and question restoration objectives;
    ``alpha_kl`` scales the bridging term inside the QA objective.
    """

    alpha_qae: float = 0.3
    alpha_qea: float = 1.0
    alpha_eaq: float = 0.3
    alpha_kl: float = 0.3
    use_qae: bool = True
    use_eaq: bool = True
    use_kl: bool = True

    def __post_init__(self):
        for name in ("alpha_qae", "alpha_qea", "alpha_eaq", "alpha_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {
            "alpha_qae": self.alpha_qae,
            "alpha_qea": self.alpha_qea,
            "alpha_eaq": self.alpha_eaq,
            "alpha_kl": self.alpha_kl,
            "use_qae": self.use_qae,
            "use_eaq": self.use_eaq,
            "use_kl": self.use_kl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)

    def ablated(self, **changes) -> "LossWeights":
        return replace(self, **changes)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-objective scalars in nats per token; disabled components are None."""

    l_seq: float
    l_total: float
    l_qae: float | None = None
    l_kl: float | None = None
    l_eaq: float | None = None

    def to_record(self) -> dict:
        rec = {"l_seq": self.l_seq, "l_total": self.l_total}
        for key in ("l_qae", "l_kl", "l_eaq"):
            value = getattr(self, key)
            if value is not None:
                rec[key] = value
        return rec


def _as_float(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def sequence_nll(logits: torch.Tensor, token_ids, loss_mask) -> torch.Tensor:
    """Mean negative log-likelihood over the loss-bearing positions of one
    sequence. ``logits`` is (seq, vocab); position t is scored from row t-1.
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if logits.dim() != 2:
        raise ValueError("sequence_nll expects a single (seq, vocab) logits matrix")
    if not (logits.size(0) == ids.size(0) == mask.size(0)):
        raise ValueError("logits, token_ids and loss_mask lengths differ")
    if not bool(mask.any()):
        raise ValueError("loss mask has no true positions")
    if bool(mask[0]):
        raise ValueError("position 0 cannot carry loss (no preceding context)")
    logp = F.log_softmax(logits, dim=-1)
    positions = torch.nonzero(mask, as_tuple=False).squeeze(-1)
    token_logp = logp[positions - 1, ids[positions]]
    return -token_logp.mean()


def batch_sequence_nll(
    logits: torch.Tensor, token_ids: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """Per-instance mean NLL, averaged over the batch.

    ``logits`` is (batch, seq, vocab); padding rows must carry a false mask.
    """
    if logits.dim() != 3:
        raise ValueError("batch_sequence_nll expects (batch, seq, vocab) logits")
    mask = loss_mask.bool()
    if not bool(mask.any(dim=1).all()):
        raise ValueError("every instance needs at least one loss position")
    if bool(mask[:, 0].any()):
        raise ValueError("position 0 cannot carry loss")
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = token_ids[:, 1:]
    token_logp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask[:, 1:].to(token_logp.dtype)
    per_instance = -(token_logp * m).sum(dim=1) / m.sum(dim=1)
    return per_instance.mean()


def kl_bridging(
    logits_plain: torch.Tensor,
    logits_evidence: torch.Tensor,
    positions_plain: Sequence[int],
    positions_evidence: Sequence[int],
    *,
    direction: str = "forward",
    stopgrad_evidence: bool = False,
) -> torch.Tensor:
    """Mean KL between the two prompts' next-token distributions over the
    aligned answer positions.

    ``forward`` takes the evidence-absent distribution as the first KL
    argument and the evidence-conditioned one as the second; ``reverse``
    swaps them and ``symmetric`` averages both. With ``stopgrad_evidence``
    the evidence-conditioned branch is treated as a fixed teacher.
    """
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"unknown KL direction {direction!r}")
    if len(positions_plain) != len(positions_evidence):
        raise BridgingAlignmentError(
            f"answer positions misaligned: {len(positions_plain)} vs "
            f"{len(positions_evidence)}"
        )
    if len(positions_plain) == 0:
        raise BridgingAlignmentError("no aligned answer positions")
    idx_p = torch.as_tensor(positions_plain, dtype=torch.long) - 1
    idx_e = torch.as_tensor(positions_evidence, dtype=torch.long) - 1
    if int(idx_p.min()) < 0 or int(idx_e.min()) < 0:
        raise BridgingAlignmentError("answer position 0 has no predicting row")
    logp_plain = F.log_softmax(logits_plain[idx_p], dim=-1)
    ev_logits = logits_evidence.detach() if stopgrad_evidence else logits_evidence
    logp_ev = F.log_softmax(ev_logits[idx_e], dim=-1)

    def kl(lp, lq):  # KL(p || q) from log-probabilities, per row
        return (lp.exp() * (lp - lq)).sum(dim=-1)

    if direction == "forward":
        per_pos = kl(logp_plain, logp_ev)
    elif direction == "reverse":
        per_pos = kl(logp_ev, logp_plain)
    else:
        per_pos = 0.5 * (kl(logp_plain, logp_ev) + kl(logp_ev, logp_plain))
    return per_pos.mean()


def _combine(weights: LossWeights, l_seq, l_qae, l_kl, l_eaq):
    qea_term = l_seq
    if weights.use_kl:
        qea_term = qea_term + weights.alpha_kl * l_kl
    total = weights.alpha_qea * qea_term
    if weights.use_qae:
        total = total + weights.alpha_qae * l_qae
    if weights.use_eaq:
        total = total + weights.alpha_eaq * l_eaq
    return total


def triplet_total(
    weights: LossWeights,
    *,
    l_seq,
    l_qae=None,
    l_kl=None,
    l_eaq=None,
):
    """Weighted accumulation of the enabled objectives.

    Returns ``(total, LossBreakdown)`` where ``total`` keeps the input type
    (tensor inputs give a differentiable tensor) and the breakdown holds
    plain floats for logging. The breakdown's total is recombined from the
    float components so the weighted-sum identity holds at float64
    precision. Disabled components must be passed as None.
    """
    if l_seq is None:
        raise ValueError("l_seq is required (main QA objective)")
    if weights.use_qae and l_qae is None:
        raise ValueError("evidence generation enabled but l_qae missing")
    if weights.use_eaq and l_eaq is None:
        raise ValueError("question restoration enabled but l_eaq missing")
    if weights.use_kl and l_kl is None:
        raise ValueError("bridging enabled but l_kl missing")
    total = _combine(weights, l_seq, l_qae, l_kl, l_eaq)
    f_seq = _as_float(l_seq)
    f_qae = _as_float(l_qae) if weights.use_qae else None
    f_kl = _as_float(l_kl) if weights.use_kl else None
    f_eaq = _as_float(l_eaq) if weights.use_eaq else None
    breakdown = LossBreakdown(
        l_seq=f_seq,
        l_qae=f_qae,
        l_kl=f_kl,
        l_eaq=f_eaq,
        l_total=float(_combine(weights, f_seq, f_qae, f_kl, f_eaq)),
    )
    return total, breakdown
