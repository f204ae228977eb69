"""Evidence-grounded generative QA via triplet instruction tuning.

Three flipped tasks over (question, evidence, answer) — answer-aware
evidence generation, evidence-conditioned answering, and question
restoration — trained jointly, with a KL term that pulls the plain
document-only answer distribution toward the evidence-conditioned one so
inference needs no retrieval step.
"""

from .backbone import BackboneConfig, TinyCausalLM, count_trainable
from .corpus import (
    CorpusStats,
    Document,
    TripletExample,
    compute_stats,
    load_canonical,
    load_multirc,
    load_qasper,
    save_canonical,
)
from .evaluator import EvalReport, evaluate, evidence_f1, exact_match, normalize, token_f1
from .objectives import (
    LossBreakdown,
    LossWeights,
    kl_bridging,
    sequence_nll,
    triplet_total,
)
from .prompting import RenderedInstance, ToyTokenizer, build_pair_for_bridging, render
from .synth import make_synthetic_corpus
from .trainer import TrainConfig, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "CorpusStats",
    "Document",
    "EvalReport",
    "LossBreakdown",
    "LossWeights",
    "RenderedInstance",
    "TinyCausalLM",
    "ToyTokenizer",
    "TrainConfig",
    "TripletExample",
    "build_pair_for_bridging",
    "compute_stats",
    "count_trainable",
    "evaluate",
    "evidence_f1",
    "exact_match",
    "kl_bridging",
    "load_canonical",
    "load_multirc",
    "load_qasper",
    "make_synthetic_corpus",
    "normalize",
    "render",
    "save_canonical",
    "sequence_nll",
    "token_f1",
    "train",
    "train_step",
    "triplet_total",
]
