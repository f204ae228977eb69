"""Post-hoc analyses over evaluation records and checkpoints.

All analyses are read-only batch jobs: grouping and binning consume the
per-example records an evaluation run emitted; the two probes run the model
in no-grad mode and never mutate parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import TripletExample, quartile_groups
from .errors import EvalError
from .evaluator import exact_match
from .prompting import ToyTokenizer, render

GROUP_KEYS = {"doc_length": "doc_tokens", "sentence_count": "sentence_count"}


@dataclass(frozen=True)
class GroupedReport:
    """Quartile groups by document length or sentence count, with mean F1."""

    key: str
    groups: tuple[dict, ...]  # each: {"mean_key", "mean_f1", "size"}

    def to_dict(self) -> dict:
        return {"key": self.key, "groups": [dict(g) for g in self.groups]}


def grouped_f1(
    per_example: Sequence[dict], key: str, f1_field: str = "f1"
) -> GroupedReport:
    """Mean F1 within each quartile of the grouping key (ascending)."""
    if key not in GROUP_KEYS:
        raise EvalError(f"unknown grouping key {key!r}; valid: {sorted(GROUP_KEYS)}")
    field = GROUP_KEYS[key]
    records = [r for r in per_example if field in r and f1_field in r]
    if len(records) < 4:
        raise EvalError(f"need at least 4 records with {field!r} and {f1_field!r}")
    groups = quartile_groups(records, key=lambda r: r[field])
    summaries = []
    for g in groups:
        summaries.append(
            {
                "mean_key": sum(r[field] for r in g) / len(g),
                "mean_f1": sum(r[f1_field] for r in g) / len(g),
                "size": len(g),
            }
        )
    return GroupedReport(key=key, groups=tuple(summaries))


@dataclass(frozen=True)
class CorrelationReport:
    """Equal-size bins by QA score with least-squares fits between tasks."""

    bin_count: int
    reduced: bool
    bins: tuple[dict, ...]  # each: {"qea", "qae", "eaq", "size"}
    fits: dict  # pair -> {"slope", "intercept"}

    def to_dict(self) -> dict:
        return {
            "bin_count": self.bin_count,
            "reduced": self.reduced,
            "bins": [dict(b) for b in self.bins],
            "fits": {k: dict(v) for k, v in self.fits.items()},
        }


def _ols(xs: list[float], ys: list[float]) -> dict:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    var = sum((x - mx) ** 2 for x in xs)
    if var == 0.0:
        return {"slope": 0.0, "intercept": my}
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / var
    return {"slope": slope, "intercept": my - slope * mx}


def correlation(per_example: Sequence[dict], bins: int = 50) -> CorrelationReport:
    """Bin records by QA F1 into equal-size groups and fit bin means.

    Requires per-example records carrying ``qea_f1`` (evidence-conditioned
    QA), ``evidence_f1`` (evidence generation), and ``question_f1``
    (question restoration). With fewer records than bins, the bin count is
    reduced to the record count and the report is flagged.
    """
    fields = ("qea_f1", "evidence_f1", "question_f1")
    records = [r for r in per_example if all(f in r for f in fields)]
    if len(records) < 2:
        raise EvalError("need at least 2 records with qea/evidence/question F1")
    reduced = len(records) < bins
    bin_count = min(bins, len(records))
    ordered = sorted(records, key=lambda r: (r["qea_f1"], r["id"]))
    base, extra = divmod(len(ordered), bin_count)
    bin_summaries = []
    start = 0
    for b in range(bin_count):
        size = base + (1 if b < extra else 0)
        chunk = ordered[start : start + size]
        start += size
        bin_summaries.append(
            {
                "qea": sum(r["qea_f1"] for r in chunk) / size,
                "qae": sum(r["evidence_f1"] for r in chunk) / size,
                "eaq": sum(r["question_f1"] for r in chunk) / size,
                "size": size,
            }
        )
    fits = {
        "qea_qae": _ols([b["qea"] for b in bin_summaries], [b["qae"] for b in bin_summaries]),
        "qea_eaq": _ols([b["qea"] for b in bin_summaries], [b["eaq"] for b in bin_summaries]),
        "qae_eaq": _ols([b["qae"] for b in bin_summaries], [b["eaq"] for b in bin_summaries]),
    }
    return CorrelationReport(
        bin_count=bin_count, reduced=reduced, bins=tuple(bin_summaries), fits=fits
    )


@dataclass(frozen=True)
class HallucinationReport:
    """Conditional correctness of question-only vs question+document answers.

    ``p_prior`` is P(question-only answer correct); ``p_keep`` conditions
    the grounded answer on the prior being right, ``p_grounded_fix`` on it
    being wrong. Conditionals over empty sets are None and flagged.
    """

    p_prior: float
    p_keep: float | None
    p_grounded_fix: float | None
    n: int
    n_prior_correct: int
    undefined: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "p_prior": self.p_prior,
            "p_keep": self.p_keep,
            "p_grounded_fix": self.p_grounded_fix,
            "n": self.n,
            "n_prior_correct": self.n_prior_correct,
            "undefined": list(self.undefined),
        }


def hallucination_probe(
    model,
    tokenizer: ToyTokenizer,
    corpus: Sequence[TripletExample],
    *,
    max_len: int = 512,
    max_new: int = 32,
    instructions=None,
) -> HallucinationReport:
    """Generate twice per example (question-only, question+document) and
    score both against the references with exact match."""
    if not corpus:
        raise EvalError("empty corpus")
    prior_hits, keep_hits, fix_hits = [], [], []
    with torch.no_grad():
        for ex in corpus:
            def answer(include_document):
                inst = render(
                    "QA_PLAIN",
                    ex,
                    tokenizer,
                    max_len,
                    instructions=instructions,
                    include_document=include_document,
                )
                ids = model.generate(
                    list(inst.prompt_ids), max_new=max_new, eos_id=tokenizer.eos_id
                )
                return tokenizer.decode(ids)

            em_q = exact_match(answer(False), ex.answers)
            em_qd = exact_match(answer(True), ex.answers)
            prior_hits.append(em_q)
            (keep_hits if em_q else fix_hits).append(em_qd)
    undefined = []
    p_keep = sum(keep_hits) / len(keep_hits) if keep_hits else None
    if p_keep is None:
        undefined.append("p_keep")
    p_fix = sum(fix_hits) / len(fix_hits) if fix_hits else None
    if p_fix is None:
        undefined.append("p_grounded_fix")
    return HallucinationReport(
        p_prior=sum(prior_hits) / len(prior_hits),
        p_keep=p_keep,
        p_grounded_fix=p_fix,
        n=len(corpus),
        n_prior_correct=sum(prior_hits),
        undefined=tuple(undefined),
    )


@dataclass(frozen=True)
class AttentionReport:
    """Per-layer attention mass from target tokens to conditioning segments.

    ``mass`` sums head-averaged weights over the segment's content columns;
    ``per_token`` divides by the column count. QA rows map answer tokens to
    the document and evidence blocks; question-restoration rows map question
    tokens to the evidence and answer blocks.
    """

    layers: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"layers": [dict(layer) for layer in self.layers]}


def _segment_attention(att: torch.Tensor, rows: range, cols: range, n_prefix: int):
    """Mean over rows of summed head-averaged weight into the columns."""
    if len(rows) == 0 or len(cols) == 0:
        return 0.0, 0.0
    head_mean = att.mean(dim=0)  # heads averaged first
    block = head_mean[rows.start : rows.stop, n_prefix + cols.start : n_prefix + cols.stop]
    mass = float(block.sum(dim=1).mean())
    return mass, mass / len(cols)


def attention_stats(
    model,
    tokenizer: ToyTokenizer,
    corpus: Sequence[TripletExample],
    *,
    max_len: int = 512,
    instructions=None,
    eaq_include_document: bool = False,
) -> AttentionReport:
    """Token-averaged attention statistics for the QA and question
    restoration prompts, using captured attention and segment spans."""
    if not corpus:
        raise EvalError("empty corpus")
    n_layers = model.config.layers
    n_prefix = model.config.adapter_count if model.mode == "adapters" else 0
    sums = [
        {
            "qea_to_document": [0.0, 0.0],
            "qea_to_evidence": [0.0, 0.0],
            "eaq_to_evidence": [0.0, 0.0],
            "eaq_to_answer": [0.0, 0.0],
        }
        for _ in range(n_layers)
    ]
    counts = {"qea": 0, "eaq": 0}

    def content_range(inst, name):
        span = inst.content_spans.get(name)
        return range(span[0], span[1]) if span else range(0)

    with torch.no_grad():
        for ex in corpus:
            for task, pairs in (
                ("QEA", (("qea_to_document", "document"), ("qea_to_evidence", "evidence"))),
                ("EAQ", (("eaq_to_evidence", "evidence"), ("eaq_to_answer", "answer"))),
            ):
                try:
                    inst = render(
                        task,
                        ex,
                        tokenizer,
                        max_len,
                        instructions=instructions,
                        eaq_include_document=eaq_include_document,
                    )
                except Exception:
                    continue
                out = model.forward_output(
                    list(inst.token_ids), capture_attention=True
                )
                if out.attentions is None:
                    raise EvalError("backbone did not capture attention weights")
                target = inst.content_spans[
                    "answer" if task == "QEA" else "question"
                ]
                rows = range(target[0], target[1])
                counts["qea" if task == "QEA" else "eaq"] += 1
                for layer, att in enumerate(out.attentions):
                    for field_name, segment in pairs:
                        mass, per_token = _segment_attention(
                            att, rows, content_range(inst, segment), n_prefix
                        )
                        sums[layer][field_name][0] += mass
                        sums[layer][field_name][1] += per_token
    layers = []
    for layer in range(n_layers):
        rec = {"layer": layer + 1}
        for field_name, (mass, per_token) in sums[layer].items():
            prefix = "qea" if field_name.startswith("qea") else "eaq"
            n = counts[prefix]
            rec[f"{field_name}_mass"] = mass / n if n else 0.0
            rec[f"{field_name}_per_token"] = per_token / n if n else 0.0
        layers.append(rec)
    return AttentionReport(layers=tuple(layers))


def write_two_column(path, rows: Sequence[tuple]) -> None:
    """Plot-ready tab-separated dump."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write("\t".join(str(v) for v in row))
            f.write("\n")


def load_report_records(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        report = json.load(f)
    if "per_example" not in report:
        raise EvalError(f"{path} is not an evaluation report (no per_example)")
    return report["per_example"]
