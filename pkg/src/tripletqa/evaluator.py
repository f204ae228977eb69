"""Generation plus exact-match / token-F1 scoring.

Answers are generated from the document-only prompt by default — the
bridging term exists precisely so inference needs no retrieved evidence.
``with_evidence`` switches to the retrieve-then-read path: evidence is
generated first, then fed into the evidence-conditioned prompt.

Normalization is the usual generative-QA recipe: lowercase, strip
punctuation, drop English articles, collapse whitespace. EM awards the
point if the normalized prediction equals any normalized reference; token
F1 takes the best reference. Per-example scores are stored as percentages
so corpus metrics are plain means of the per-example values.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .corpus import TripletExample
from .errors import EvalError
from .prompting import ToyTokenizer, render

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, references: Sequence[str]) -> int:
    if not references:
        raise EvalError("exact_match needs at least one reference")
    norm = normalize(pred)
    return int(any(norm == normalize(ref) for ref in references))


def _f1_single(pred_tokens: list[str], ref_tokens: list[str]) -> float:
    if not pred_tokens and not ref_tokens:
        return 1.0
    if not pred_tokens or not ref_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(ref_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(ref_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, references: Sequence[str]) -> float:
    """Best bag-of-tokens F1 over the references, on normalized text.

    Both sides empty after normalization counts as 1.0 (unanswerable
    predicted as unanswerable-style empty output).
    """
    if not references:
        raise EvalError("token_f1 needs at least one reference")
    pred_tokens = normalize(pred).split()
    return max(_f1_single(pred_tokens, normalize(ref).split()) for ref in references)


def evidence_f1(pred_evidence_text: str, gold_evidence_text: str) -> float:
    """Token-level F1 between generated and gold evidence strings."""
    if not normalize(gold_evidence_text):
        raise EvalError("gold evidence is empty; example must be excluded")
    return token_f1(pred_evidence_text, [gold_evidence_text])


@dataclass(frozen=True)
class Prediction:
    example_id: str
    task: str
    text: str

    @property
    def normalized(self) -> str:
        return normalize(self.text)

    def to_record(self) -> dict:
        return {"id": self.example_id, "task": self.task, "text": self.text}


@dataclass
class EvalReport:
    tasks: tuple[str, ...]
    per_example: list[dict]
    em: float | None = None
    f1: float | None = None
    evidence_f1: float | None = None
    qea_em: float | None = None
    qea_f1: float | None = None
    question_f1: float | None = None
    evidence_skipped: int = 0
    generation_failures: int = 0
    config_hash: str | None = None
    predictions: list[Prediction] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "tasks": list(self.tasks),
            "config_hash": self.config_hash,
            "em": self.em,
            "f1": self.f1,
            "evidence_f1": self.evidence_f1,
            "qea_em": self.qea_em,
            "qea_f1": self.qea_f1,
            "question_f1": self.question_f1,
            "evidence_skipped": self.evidence_skipped,
            "generation_failures": self.generation_failures,
            "per_example": self.per_example,
        }
        return d

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_predictions(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for pred in self.predictions:
                f.write(json.dumps(pred.to_record(), sort_keys=True, ensure_ascii=False))
                f.write("\n")


EVAL_TASKS = ("qa", "qea", "evidence", "question")

_TASK_TEMPLATE = {
    "qa": "QA_PLAIN",
    "qea": "QEA",
    "evidence": "QAE",
    "question": "EAQ",
}


def generate_text(
    model,
    tokenizer: ToyTokenizer,
    example: TripletExample,
    task: str,
    max_len: int,
    max_new: int,
    *,
    instructions=None,
    eaq_include_document: bool = False,
    evidence_override: str | None = None,
) -> str:
    """Greedy-decode one task's target for one example."""
    instance = render(
        _TASK_TEMPLATE[task],
        example,
        tokenizer,
        max_len,
        instructions=instructions,
        eaq_include_document=eaq_include_document,
        evidence_override=evidence_override,
    )
    new_ids = model.generate(
        list(instance.prompt_ids), max_new=max_new, eos_id=tokenizer.eos_id
    )
    return tokenizer.decode(new_ids)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def evaluate(
    model,
    tokenizer: ToyTokenizer,
    corpus: Sequence[TripletExample],
    tasks: Sequence[str] = ("qa",),
    *,
    max_len: int = 512,
    max_new: int = 32,
    with_evidence: bool = False,
    instructions=None,
    eaq_include_document: bool = False,
    config_hash: str | None = None,
) -> EvalReport:
    """Generate per task and score; parameters are never touched.

    ``with_evidence`` evaluates the QA task by first generating evidence and
    feeding it into the evidence-conditioned prompt (the ablation path that
    skips the bridging term).
    """
    unknown = [t for t in tasks if t not in EVAL_TASKS]
    if unknown:
        raise EvalError(f"unknown eval tasks {unknown}; valid: {EVAL_TASKS}")
    report = EvalReport(tasks=tuple(tasks), per_example=[])
    report.config_hash = config_hash
    em_values, f1_values = [], []
    ev_values, qea_em_values, qea_f1_values, q_values = [], [], [], []

    def gen(example, task, **kw):
        try:
            return generate_text(
                model,
                tokenizer,
                example,
                task,
                max_len,
                max_new,
                instructions=instructions,
                eaq_include_document=eaq_include_document,
                **kw,
            )
        except Exception:
            report.generation_failures += 1
            return None

    with torch.no_grad():
        for example in corpus:
            rec: dict = {
                "id": example.id,
                "doc_tokens": example.document.token_count,
                "sentence_count": example.document.sentence_count,
            }
            pred_evidence = None
            gold_evidence_present = bool(normalize(example.evidence_text))
            if gold_evidence_present and (
                "evidence" in tasks or ("qa" in tasks and with_evidence)
            ):
                pred_evidence = gen(example, "evidence")
                if pred_evidence is not None:
                    report.predictions.append(
                        Prediction(example.id, "evidence", pred_evidence)
                    )
            if "qa" in tasks:
                if with_evidence:
                    text = gen(example, "qea", evidence_override=pred_evidence or "")
                else:
                    text = gen(example, "qa")
                if text is not None:
                    report.predictions.append(Prediction(example.id, "qa", text))
                em = 100.0 * exact_match(text or "", example.answers)
                f1 = 100.0 * token_f1(text or "", example.answers)
                rec["em"], rec["f1"] = em, f1
                em_values.append(em)
                f1_values.append(f1)
            if "qea" in tasks:
                text = gen(example, "qea")
                if text is not None:
                    report.predictions.append(Prediction(example.id, "qea", text))
                qea_em = 100.0 * exact_match(text or "", example.answers)
                qea_f1 = 100.0 * token_f1(text or "", example.answers)
                rec["qea_em"], rec["qea_f1"] = qea_em, qea_f1
                qea_em_values.append(qea_em)
                qea_f1_values.append(qea_f1)
            if "evidence" in tasks:
                if not gold_evidence_present:
                    report.evidence_skipped += 1
                else:
                    ev = 100.0 * evidence_f1(pred_evidence or "", example.evidence_text)
                    rec["evidence_f1"] = ev
                    ev_values.append(ev)
            if "question" in tasks:
                text = gen(example, "question")
                if text is not None:
                    report.predictions.append(Prediction(example.id, "question", text))
                qf1 = 100.0 * token_f1(text or "", [example.question])
                rec["question_f1"] = qf1
                q_values.append(qf1)
            report.per_example.append(rec)

    report.em = _mean(em_values)
    report.f1 = _mean(f1_values)
    report.evidence_f1 = _mean(ev_values)
    report.qea_em = _mean(qea_em_values)
    report.qea_f1 = _mean(qea_f1_values)
    report.question_f1 = _mean(q_values)
    return report
