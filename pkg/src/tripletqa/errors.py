"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``category`` that the CLI maps
to an exit code and a structured stderr record.
"""


class TripletQAError(Exception):
    category = "error"


class CorpusError(TripletQAError):
    """Malformed or unusable dataset record."""

    category = "data"


class PromptError(TripletQAError):
    """Rendering failed: missing field, overlength prompt, or misalignment."""

    category = "render"


class BridgingAlignmentError(PromptError):
    """The paired prompts do not share an identical answer target."""

    category = "render"


class BackboneError(TripletQAError):
    """Invalid input to the language model (vocab, length, config)."""

    category = "model"


class TrainingError(TripletQAError):
    category = "training"


class TrainingDiverged(TrainingError):
    """Non-finite loss; carries a diagnostic dump of the offending batch."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class EvalError(TripletQAError):
    category = "eval"
