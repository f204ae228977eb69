"""Instruction templates, tokenization, and prompt rendering.

Four tasks share one block layout, with slots omitted per task and the
generation target always last:

    <instruction>\\n[Document] <D>\\n[Question] <q>\\n[Evidence] <e>\\n[Answer] <a>

* QAE        conditions on (document, question, answer) -> evidence
* QEA        conditions on (document, question, evidence) -> answer
* EAQ        conditions on (evidence, answer) -> question; a flag re-adds
             the document block
* QA_PLAIN   conditions on (document, question) -> answer; used at inference

Rendering is a pure function of its inputs: identical inputs give identical
token ids, so instances can be built in parallel and cached.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .corpus import TripletExample
from .errors import BridgingAlignmentError, PromptError

TASKS = ("QAE", "QEA", "EAQ", "QA_PLAIN")

INSTRUCTIONS = {
    "QAE": "generate the relevant evidence from the document to answer the following question",
    "QEA": "generate the correct answers for the following question based on the document "
    "and the evidence support the answers to the question.",
    "EAQ": "reconstruct the question based on the answers and corresponding supporting evidence",
    "QA_PLAIN": "generate the correct answers for the following question based on the document.",
}

MARKERS = {
    "document": "[Document]",
    "question": "[Question]",
    "evidence": "[Evidence]",
    "answer": "[Answer]",
}

# Conditioning slots in template order; the target slot is appended last.
_SLOT_ORDER = {
    "QAE": (("document", "question", "answer"), "evidence"),
    "QEA": (("document", "question", "evidence"), "answer"),
    "EAQ": (("evidence", "answer"), "question"),
    "QA_PLAIN": (("document", "question"), "answer"),
}


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    instruction: str
    slot_order: tuple[str, ...]  # conditioning slots then target, in order

    @property
    def target(self) -> str:
        return self.slot_order[-1]


def get_template(
    task: str,
    instructions: Mapping[str, str] | None = None,
    eaq_include_document: bool = False,
    include_document: bool | None = None,
) -> PromptTemplate:
    """Resolve the template for a task, applying document-inclusion flags.

    ``include_document`` overrides the per-task default (used by the
    hallucination probe to build question-only prompts).
    """
    if task not in TASKS:
        raise PromptError(f"unknown task {task!r}")
    conditioning, target = _SLOT_ORDER[task]
    if task == "EAQ" and eaq_include_document:
        conditioning = ("document",) + conditioning
    if include_document is not None:
        has_doc = "document" in conditioning
        if include_document and not has_doc:
            conditioning = ("document",) + conditioning
        elif not include_document and has_doc:
            conditioning = tuple(s for s in conditioning if s != "document")
    text = (instructions or INSTRUCTIONS).get(task, INSTRUCTIONS[task])
    return PromptTemplate(task=task, instruction=text, slot_order=conditioning + (target,))


# ---------------------------------------------------------------------------
# Tokenization


class Tokenizer(Protocol):
    """Minimum surface a backbone tokenizer must provide."""

    bos_id: int
    eos_id: int
    pad_id: int

    def __len__(self) -> int: ...

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class ToyTokenizer:
    """Lowercased whitespace-and-punctuation word tokenizer.

    Deterministic and dependency-free; a corpus-built vocabulary keeps the
    model small. ``decode(encode(x)) == x`` holds for any text already in
    canonical form (lowercase tokens joined by single spaces) whose tokens
    are in the vocabulary; unknown tokens map to ``<unk>``.
    """

    def __init__(self, tokens: Sequence[str]):
        self.vocab = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self._ids = {t: i for i, t in enumerate(self.vocab)}
        self.pad_id = self._ids["<pad>"]
        self.bos_id = self._ids["<bos>"]
        self.eos_id = self._ids["<eos>"]
        self.unk_id = self._ids["<unk>"]

    def __len__(self) -> int:
        return len(self.vocab)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(t, self.unk_id) for t in self.tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    @classmethod
    def build(cls, texts, instructions: Mapping[str, str] | None = None) -> "ToyTokenizer":
        """Build a vocabulary from corpus texts plus the template strings."""
        seen = set()
        for text in texts:
            seen.update(cls.tokenize(text))
        for instr in (instructions or INSTRUCTIONS).values():
            seen.update(cls.tokenize(instr))
        for marker in MARKERS.values():
            seen.update(cls.tokenize(marker))
        return cls(sorted(seen))

    @classmethod
    def from_corpus(
        cls, corpus: Sequence[TripletExample], instructions=None
    ) -> "ToyTokenizer":
        texts = []
        for ex in corpus:
            texts.extend(ex.document.sentences)
            texts.append(ex.question)
            texts.extend(ex.answers)
        return cls.build(texts, instructions)


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class RenderedInstance:
    """Token sequence with loss mask and named segment spans.

    ``segments`` are half-open block ranges (marker included; the target
    block also includes the terminal EOS) that are disjoint and cover the
    whole sequence. ``content_spans`` are the inner ranges holding only the
    slot text. The loss mask is true exactly on the target content plus EOS.
    """

    task: str
    example_id: str
    token_ids: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    segments: dict[str, tuple[int, int]]
    content_spans: dict[str, tuple[int, int]]
    text: str
    truncated: bool = False

    def __post_init__(self):
        if len(self.token_ids) != len(self.loss_mask):
            raise PromptError("token_ids and loss_mask lengths differ")

    @property
    def target_positions(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.loss_mask) if m)

    @property
    def prompt_ids(self) -> tuple[int, ...]:
        """Everything before the first loss-bearing token: the generation prompt."""
        first = self.loss_mask.index(True)
        return self.token_ids[:first]

    @property
    def target_ids(self) -> tuple[int, ...]:
        return tuple(self.token_ids[i] for i in self.target_positions)

    def to_debug_dict(self) -> dict:
        return {
            "task": self.task,
            "example_id": self.example_id,
            "text": self.text,
            "token_ids": list(self.token_ids),
            "loss_mask": [int(m) for m in self.loss_mask],
            "segments": {k: list(v) for k, v in self.segments.items()},
            "content_spans": {k: list(v) for k, v in self.content_spans.items()},
            "truncated": self.truncated,
        }


def _slot_text(
    slot: str,
    example: TripletExample,
    doc_sentences: Sequence[str],
    evidence_override: str | None = None,
) -> str:
    if slot == "document":
        return " ".join(doc_sentences)
    if slot == "question":
        return example.question
    if slot == "evidence":
        return example.evidence_text if evidence_override is None else evidence_override
    if slot == "answer":
        return example.answer_text
    raise PromptError(f"unknown slot {slot!r}")


def _require_fields(
    template: PromptTemplate,
    example: TripletExample,
    evidence_override: str | None = None,
) -> None:
    evidence = example.evidence_text if evidence_override is None else evidence_override
    needs_answer = "answer" in template.slot_order
    if needs_answer and (not example.answers or not example.answer_text.strip()):
        raise PromptError(f"example {example.id!r}: task {template.task} needs a non-empty answer")
    if template.target == "question" and not example.question.strip():
        raise PromptError(f"example {example.id!r}: task {template.task} needs a question")
    if template.target == "evidence" and not evidence.strip():
        raise PromptError(f"example {example.id!r}: task {template.task} needs evidence text")
    # Question restoration is grounded in the evidence, so an empty evidence
    # slot makes the task ill-posed; QEA tolerates an empty evidence block.
    if template.task == "EAQ" and not evidence.strip():
        raise PromptError(f"example {example.id!r}: task EAQ needs evidence text")


def render(
    task: str,
    example: TripletExample,
    tokenizer: Tokenizer,
    max_len: int,
    *,
    instructions: Mapping[str, str] | None = None,
    eaq_include_document: bool = False,
    include_document: bool | None = None,
    evidence_override: str | None = None,
) -> RenderedInstance:
    """Render one task instance: token ids, loss mask, and segment spans.

    If the sequence exceeds ``max_len``, document sentences are dropped from
    the end until it fits; the question, evidence, and answer slots are never
    truncated. A prompt that cannot fit even with an empty document raises.
    ``evidence_override`` substitutes generated evidence text for the gold
    evidence slot (used by the retrieve-then-read evaluation path).
    """
    template = get_template(
        task,
        instructions=instructions,
        eaq_include_document=eaq_include_document,
        include_document=include_document,
    )
    _require_fields(template, example, evidence_override)

    doc_sentences = list(example.document.sentences)
    has_doc = "document" in template.slot_order

    def assemble(sentences):
        # (segment name, marker ids, content ids) triples in slot order
        blocks = [("instruction", [], [tokenizer.bos_id] + tokenizer.encode(template.instruction))]
        for slot in template.slot_order:
            marker = tokenizer.encode(MARKERS[slot])
            content = tokenizer.encode(
                _slot_text(slot, example, sentences, evidence_override)
            )
            blocks.append((slot, marker, content))
        return blocks

    def total_len(blocks):
        return sum(len(m) + len(c) for _, m, c in blocks) + 1  # + EOS

    blocks = assemble(doc_sentences)
    truncated = False
    while total_len(blocks) > max_len and has_doc and doc_sentences:
        doc_sentences.pop()
        truncated = True
        blocks = assemble(doc_sentences)
    if total_len(blocks) > max_len:
        raise PromptError(
            f"example {example.id!r}: rendered length {total_len(blocks)} exceeds "
            f"max_len {max_len} even after document truncation"
        )

    token_ids: list[int] = []
    loss_mask: list[bool] = []
    segments: dict[str, tuple[int, int]] = {}
    content_spans: dict[str, tuple[int, int]] = {}
    for name, marker, content in blocks:
        start = len(token_ids)
        token_ids.extend(marker)
        c_start = len(token_ids)
        token_ids.extend(content)
        c_end = len(token_ids)
        is_target = name == template.target
        loss_mask.extend([False] * len(marker))
        loss_mask.extend([is_target] * len(content))
        if is_target:
            token_ids.append(tokenizer.eos_id)
            loss_mask.append(True)
        segments[name] = (start, len(token_ids))
        content_spans[name] = (c_start, c_end)

    parts = [template.instruction]
    for slot in template.slot_order:
        parts.append(
            f"{MARKERS[slot]} {_slot_text(slot, example, doc_sentences, evidence_override)}"
        )
    return RenderedInstance(
        task=task,
        example_id=example.id,
        token_ids=tuple(token_ids),
        loss_mask=tuple(loss_mask),
        segments=segments,
        content_spans=content_spans,
        text="\n".join(parts),
        truncated=truncated,
    )


def build_pair_for_bridging(
    example: TripletExample,
    tokenizer: Tokenizer,
    max_len: int,
    *,
    instructions: Mapping[str, str] | None = None,
) -> tuple[RenderedInstance, RenderedInstance]:
    """Render the (QEA, QA_PLAIN) pair whose answer targets align one-to-one.

    Both instances carry the same answer token sequence, so their
    per-position next-token distributions can be compared directly.
    """
    qea = render("QEA", example, tokenizer, max_len, instructions=instructions)
    qa_plain = render("QA_PLAIN", example, tokenizer, max_len, instructions=instructions)
    if qea.target_ids != qa_plain.target_ids:
        raise BridgingAlignmentError(
            f"example {example.id!r}: answer targets diverge between the "
            f"evidence-conditioned and plain prompts ({len(qea.target_ids)} vs "
            f"{len(qa_plain.target_ids)} tokens)"
        )
    return qea, qa_plain
