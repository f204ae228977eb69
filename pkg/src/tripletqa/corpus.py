"""Corpus ingestion and the canonical triplet record format.

Native MultiRC / QASPER files are converted into a single line-delimited
JSON format (one record per line, UTF-8) with the fixed field names

    id, document_id, sentences, question, evidence_indices, answers, answer_type

Evidence indices are 1-based sentence positions. All loaders are read-only
and the record types are immutable, so corpora can be shared freely across
workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusError

ANSWER_TYPES = ("extractive", "abstractive", "yes_no", "unanswerable")

CANONICAL_FIELDS = (
    "id",
    "document_id",
    "sentences",
    "question",
    "evidence_indices",
    "answers",
    "answer_type",
)


@dataclass(frozen=True)
class Document:
    """A document as an ordered sequence of sentences (1-indexed positions)."""

    id: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"document {self.id!r}: no sentences")
        for i, s in enumerate(self.sentences, start=1):
            if not s.strip():
                raise CorpusError(f"document {self.id!r}: sentence {i} is empty")

    @property
    def token_count(self) -> int:
        """Whitespace token count over the full text (used for length stats)."""
        return len(" ".join(self.sentences).split())

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class TripletExample:
    """One (document, question, evidence, answers) record."""

    id: str
    document: Document
    question: str
    evidence_indices: frozenset[int]
    answers: tuple[str, ...]
    answer_type: str = "abstractive"

    def __post_init__(self):
        n = len(self.document.sentences)
        for idx in self.evidence_indices:
            if not 1 <= idx <= n:
                raise CorpusError(
                    f"example {self.id!r}: evidence index {idx} outside [1, {n}]"
                )
        if not self.answers:
            raise CorpusError(f"example {self.id!r}: no answers")
        if self.answer_type not in ANSWER_TYPES:
            raise CorpusError(
                f"example {self.id!r}: unknown answer_type {self.answer_type!r}"
            )

    @property
    def evidence_text(self) -> str:
        """Concatenation of the evidence sentences in document order."""
        return " ".join(
            self.document.sentences[i - 1] for i in sorted(self.evidence_indices)
        )

    @property
    def answer_text(self) -> str:
        """Single training target: references joined with ', '."""
        return ", ".join(self.answers)


@dataclass
class LoadReport:
    """Per-load accounting: rejected records and skipped questions."""

    rejected: list[tuple[str, str]] = field(default_factory=list)  # (record id, reason)
    skipped_no_answer: int = 0
    no_evidence: int = 0

    def reject(self, record_id: str, reason: str) -> None:
        self.rejected.append((record_id, reason))

    def summary(self) -> dict:
        return {
            "rejected": len(self.rejected),
            "skipped_no_answer": self.skipped_no_answer,
            "no_evidence": self.no_evidence,
        }


@dataclass(frozen=True)
class CorpusStats:
    example_count: int
    mean_doc_tokens: float
    mean_sentence_count: float
    doc_token_group_means: tuple[float, float, float, float]
    sentence_count_group_means: tuple[float, float, float, float]
    group_sizes: tuple[int, int, int, int]


def _default_ident(item):
    return item["id"] if isinstance(item, dict) else item.id


def quartile_groups(items: Sequence, key, ident=_default_ident) -> list[list]:
    """Split items into 4 groups by ascending key, sizes differing by <= 1.

    Ties are broken by the item's id so the split is deterministic across
    runs.
    """
    ordered = sorted(items, key=lambda x: (key(x), ident(x)))
    n = len(ordered)
    base, extra = divmod(n, 4)
    groups, start = [], 0
    for g in range(4):
        size = base + (1 if g < extra else 0)
        groups.append(ordered[start : start + size])
        start += size
    return groups


def compute_stats(corpus: Sequence[TripletExample]) -> CorpusStats:
    """Corpus-level length statistics with a deterministic quartile split."""
    if not corpus:
        raise CorpusError("empty corpus")
    token_counts = [ex.document.token_count for ex in corpus]
    sent_counts = [ex.document.sentence_count for ex in corpus]

    def group_means(key):
        groups = quartile_groups(corpus, key)
        return tuple(
            sum(key(ex) for ex in g) / len(g) if g else 0.0 for g in groups
        )

    by_tokens = quartile_groups(corpus, lambda ex: ex.document.token_count)
    return CorpusStats(
        example_count=len(corpus),
        mean_doc_tokens=sum(token_counts) / len(corpus),
        mean_sentence_count=sum(sent_counts) / len(corpus),
        doc_token_group_means=group_means(lambda ex: ex.document.token_count),
        sentence_count_group_means=group_means(lambda ex: ex.document.sentence_count),
        group_sizes=tuple(len(g) for g in by_tokens),
    )


# ---------------------------------------------------------------------------
# Canonical line-delimited format


def example_to_record(ex: TripletExample) -> dict:
    return {
        "id": ex.id,
        "document_id": ex.document.id,
        "sentences": list(ex.document.sentences),
        "question": ex.question,
        "evidence_indices": sorted(ex.evidence_indices),
        "answers": list(ex.answers),
        "answer_type": ex.answer_type,
    }


def example_from_record(rec: dict) -> TripletExample:
    missing = [f for f in CANONICAL_FIELDS if f not in rec]
    if missing:
        raise CorpusError(
            f"record {rec.get('id', '?')!r}: missing fields {missing}"
        )
    doc = Document(id=rec["document_id"], sentences=tuple(rec["sentences"]))
    return TripletExample(
        id=rec["id"],
        document=doc,
        question=rec["question"],
        evidence_indices=frozenset(int(i) for i in rec["evidence_indices"]),
        answers=tuple(rec["answers"]),
        answer_type=rec["answer_type"],
    )


def save_canonical(examples: Iterable[TripletExample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(example_to_record(ex), ensure_ascii=False, sort_keys=True))
            f.write("\n")


def load_canonical(path) -> list[TripletExample]:
    """Strict loader for our own format: any malformed line raises."""
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e})") from e
            examples.append(example_from_record(rec))
    return examples


# ---------------------------------------------------------------------------
# MultiRC native format
#
# Expected shape (the released JSON): {"data": [{"id": ..., "paragraph":
# {"text": "<b>Sent 1: </b>...<br>...", "questions": [{"question": ...,
# "sentences_used": [0-based indices], "answers": [{"text": ...,
# "isAnswer": bool}, ...]}]}}]}


def _split_multirc_paragraph(text: str) -> list[str]:
    """Split the markup paragraph into sentences.

    Sentences are delimited by ``<b>Sent N: </b>`` headers and ``<br>`` tags.
    """
    import re

    parts = re.split(r"<b>Sent \d+: </b>", text)
    sentences = []
    for part in parts:
        s = part.replace("<br>", " ").strip()
        if s:
            sentences.append(s)
    return sentences


def load_multirc(
    path,
    join_answers: bool = False,
    limit: int | None = None,
) -> tuple[list[TripletExample], LoadReport]:
    """Convert native MultiRC JSON into triplet records.

    One record per question; every answer option marked correct becomes a
    reference. With ``join_answers`` the options are merged into a single
    ", "-joined reference. Questions with zero correct options are skipped
    and counted. Multi-hop questions keep all annotated evidence sentences.
    """
    report = LoadReport()
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    examples: list[TripletExample] = []
    for para in raw.get("data", []):
        para_id = str(para.get("id", f"para{len(examples)}"))
        try:
            sentences = _split_multirc_paragraph(para["paragraph"]["text"])
            doc = Document(id=para_id, sentences=tuple(sentences))
        except (KeyError, TypeError, CorpusError) as e:
            report.reject(para_id, f"bad paragraph: {e}")
            continue
        for q_i, q in enumerate(para.get("paragraph", {}).get("questions", [])):
            qid = f"{para_id}.q{q.get('idx', q_i)}"
            try:
                question = q["question"]
                gold = [a["text"] for a in q["answers"] if a.get("isAnswer")]
                used = q.get("sentences_used", [])
                evidence = frozenset(int(i) + 1 for i in used)  # source is 0-based
            except (KeyError, TypeError) as e:
                report.reject(qid, f"bad question record: {e}")
                continue
            if not gold:
                report.skipped_no_answer += 1
                continue
            answers = (", ".join(gold),) if join_answers else tuple(gold)
            if not evidence:
                report.no_evidence += 1
            try:
                examples.append(
                    TripletExample(
                        id=qid,
                        document=doc,
                        question=question,
                        evidence_indices=evidence,
                        answers=answers,
                        answer_type="abstractive",
                    )
                )
            except CorpusError as e:
                report.reject(qid, str(e))
            if limit is not None and len(examples) >= limit:
                return examples, report
    return examples, report


# ---------------------------------------------------------------------------
# QASPER native format
#
# Expected shape: {"<paper_id>": {"title": ..., "abstract": ..., "full_text":
# [{"section_name": ..., "paragraphs": [...]}], "qas": [{"question": ...,
# "question_id": ..., "answers": [{"answer": {"unanswerable": bool,
# "extractive_spans": [...], "free_form_answer": ..., "yes_no": bool|null,
# "evidence": [paragraph strings]}}]}]}}
#
# Paragraphs are the evidence annotation unit, so each paragraph (plus the
# abstract, when present) is treated as one "sentence" of the document.


def _qasper_answer(ans: dict) -> tuple[str, list[str]]:
    """Map one annotator's answer object to (answer_type, references)."""
    if ans.get("unanswerable"):
        return "unanswerable", ["unanswerable"]
    yn = ans.get("yes_no")
    if yn is not None:
        return "yes_no", ["yes" if yn else "no"]
    spans = [s for s in ans.get("extractive_spans", []) if s]
    if spans:
        return "extractive", [", ".join(spans)]
    free = (ans.get("free_form_answer") or "").strip()
    if free:
        return "abstractive", [free]
    raise CorpusError("answer object carries no usable answer")


def load_qasper(
    path,
    limit: int | None = None,
) -> tuple[list[TripletExample], LoadReport]:
    """Convert native QASPER JSON into triplet records.

    All annotator answers are kept as references; the answer_type of the
    record is the first annotator's type. Evidence paragraphs are matched to
    document paragraphs by exact text; unmatched evidence strings are
    dropped. Records with no evidence annotation get an empty index set and
    are counted in the report.
    """
    report = LoadReport()
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    examples: list[TripletExample] = []
    for paper_id, paper in raw.items():
        paragraphs: list[str] = []
        abstract = (paper.get("abstract") or "").strip()
        if abstract:
            paragraphs.append(abstract)
        for section in paper.get("full_text", []):
            for p in section.get("paragraphs", []):
                if p and p.strip():
                    paragraphs.append(p.strip())
        try:
            doc = Document(id=str(paper_id), sentences=tuple(paragraphs))
        except CorpusError as e:
            report.reject(str(paper_id), str(e))
            continue
        position = {s: i + 1 for i, s in enumerate(doc.sentences)}
        for q_i, qa in enumerate(paper.get("qas", [])):
            qid = str(qa.get("question_id", f"{paper_id}.q{q_i}"))
            question = (qa.get("question") or "").strip()
            if not question:
                report.reject(qid, "empty question")
                continue
            references: list[str] = []
            answer_type = None
            evidence: set[int] = set()
            for annot in qa.get("answers", []):
                ans = annot.get("answer", {})
                try:
                    a_type, refs = _qasper_answer(ans)
                except CorpusError:
                    continue
                if answer_type is None:
                    answer_type = a_type
                references.extend(r for r in refs if r not in references)
                for ev in ans.get("evidence", []):
                    idx = position.get((ev or "").strip())
                    if idx is not None:
                        evidence.add(idx)
            if not references:
                report.skipped_no_answer += 1
                continue
            if not evidence:
                report.no_evidence += 1
            try:
                examples.append(
                    TripletExample(
                        id=qid,
                        document=doc,
                        question=question,
                        evidence_indices=frozenset(evidence),
                        answers=tuple(references),
                        answer_type=answer_type,
                    )
                )
            except CorpusError as e:
                report.reject(qid, str(e))
            if limit is not None and len(examples) >= limit:
                return examples, report
    return examples, report
