"""Generative remote-sensing VQA: synthetic data, two-stage training, beam-search answering."""

from ._core import (
    ModelConfig,
    Sample,
    Vocabulary,
    __version__,
    aggregate_human_eval,
    answer,
    build_vocab,
    evaluate_checkpoint,
    generate_split,
    gradcheck,
    load_image,
    mc_accuracy,
    normalize_text,
    open_f1,
    read_manifest,
    token_f1,
    train_stage,
    yesno_accuracy,
)

__all__ = [
    "ModelConfig",
    "Sample",
    "Vocabulary",
    "__version__",
    "aggregate_human_eval",
    "answer",
    "build_vocab",
    "evaluate_checkpoint",
    "generate_split",
    "gradcheck",
    "load_image",
    "mc_accuracy",
    "normalize_text",
    "open_f1",
    "read_manifest",
    "token_f1",
    "train_stage",
    "yesno_accuracy",
]
