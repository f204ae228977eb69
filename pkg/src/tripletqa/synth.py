"""Synthetic corpora for desk-scale experiments and tests.

The default corpus is a key/value lookup task: each document lists a few
"signal shows color" facts, the question asks for one key's value, and the
evidence is exactly the sentence carrying it. Keys recur across examples
with different values, so the question alone does not determine the answer
and the model must ground itself in the document (or the evidence).
"""

from __future__ import annotations

import random

from .corpus import Document, TripletExample

KEYS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel")
VALUES = ("red", "blue", "green", "amber", "violet", "teal", "coral", "ivory")


def make_synthetic_corpus(
    n_examples: int = 20,
    n_sentences: int = 4,
    seed: int = 0,
    key_pool: int = 5,
    answer_in_question: bool = False,
) -> list[TripletExample]:
    """Build a corpus where the evidence sentence determines the answer.

    With ``answer_in_question`` the answer is embedded in the question
    instead (for probing prior-knowledge behavior).
    """
    if not 1 <= n_sentences <= key_pool <= len(KEYS):
        raise ValueError("need 1 <= n_sentences <= key_pool <= available keys")
    rng = random.Random(seed)
    examples = []
    for i in range(n_examples):
        if answer_in_question:
            value = rng.choice(VALUES)
            doc = Document(
                id=f"doc{i:03d}",
                sentences=("this line carries no signal information",),
            )
            examples.append(
                TripletExample(
                    id=f"syn{i:03d}",
                    document=doc,
                    question=f"repeat the color word {value} back",
                    evidence_indices=frozenset({1}),
                    answers=(value,),
                    answer_type="abstractive",
                )
            )
            continue
        keys = rng.sample(KEYS[:key_pool], n_sentences)
        values = [rng.choice(VALUES) for _ in keys]
        sentences = tuple(
            f"the {k} signal shows {v}" for k, v in zip(keys, values)
        )
        target = rng.randrange(n_sentences)
        doc = Document(id=f"doc{i:03d}", sentences=sentences)
        examples.append(
            TripletExample(
                id=f"syn{i:03d}",
                document=doc,
                question=f"what does the {keys[target]} signal show",
                evidence_indices=frozenset({target + 1}),
                answers=(values[target],),
                answer_type="extractive",
            )
        )
    return examples
