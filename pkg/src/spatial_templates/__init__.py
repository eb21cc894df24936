"""Spatial-template prediction from structured text triplets."""

from .corpus import (
    Box,
    Instance,
    SplitPlan,
    SyntheticRule,
    Vocabulary,
    build_vocabs,
    generate_synthetic,
    load_corpus_jsonl,
    make_cv_folds,
    make_generalized_triplet_split,
    make_generalized_word_split,
    save_corpus_jsonl,
)
from .embed import EmbeddingTable, load_pretrained, lookup, make_one_hot, make_random_matched
from .metrics import CtrlBaseline, EvalReport, cross_validate, evaluate
from .models import (
    Query,
    RegPrediction,
    TrainConfig,
    TrainedModel,
    fit_linear_interpreter,
    heatmap_center,
    load_model,
    predict_pix,
    predict_reg,
    rank_weights,
    rasterize_box,
    save_model,
    train,
)
from .render import Scene, render_scene

__version__ = "0.1.0"

__all__ = [
    "Box", "Instance", "SplitPlan", "SyntheticRule", "Vocabulary",
    "build_vocabs", "generate_synthetic", "load_corpus_jsonl", "make_cv_folds",
    "make_generalized_triplet_split", "make_generalized_word_split",
    "save_corpus_jsonl", "EmbeddingTable", "load_pretrained", "lookup",
    "make_one_hot", "make_random_matched", "CtrlBaseline", "EvalReport",
    "cross_validate", "evaluate", "Query", "RegPrediction", "TrainConfig",
    "TrainedModel", "fit_linear_interpreter", "heatmap_center", "load_model",
    "predict_pix", "predict_reg", "rank_weights", "rasterize_box",
    "save_model", "train", "Scene", "render_scene", "__version__",
]
