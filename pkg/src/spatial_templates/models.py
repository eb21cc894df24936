"""REG and PIX spatial-template models: assembly, training, prediction.

REG maps the assembled input to the object's center and half-extents (4 real
values, MSE loss). PIX maps it to an M x M sigmoid heatmap of object
membership (binary cross-entropy). Both share the same input: frozen
subject/relation/object embeddings concatenated with the subject's center
and size. Also houses the hidden-layer-free linear interpreter used for
weight readings.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import net
from .corpus import Box, CorpusError, Instance, Vocabulary
from .embed import EmbeddingError, EmbeddingTable, lookup

logger = logging.getLogger(__name__)

HEADS = ("reg", "pix")
ROLES = ("subject", "relation", "object")

CHECKPOINT_FORMAT = "spatial-templates-model-v1"


class ModelError(ValueError):
    """Contract violation in model assembly, training, or prediction."""


@dataclass(frozen=True)
class Query:
    """Prediction input: the text triplet plus the subject's box."""

    subject_word: str
    relation_word: str
    object_word: str
    subject_box: Box


@dataclass
class RegPrediction:
    """Raw regression output; values may leave [0, 1] and are only clipped
    when rendered."""

    center: np.ndarray  # (2,) x, y
    half: np.ndarray    # (2,) half_w, half_h

    def as_box(self) -> Box:
        return Box(float(self.center[0]), float(self.center[1]),
                   float(self.half[0]), float(self.half[1]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    hidden_sizes: tuple[int, ...] = (100, 100)
    grid_size: int = 15
    rho: float = 0.9
    epsilon: float = 1e-8
    include_subject_size: bool = True

    def to_json_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return cls(**d)


@dataclass
class TrainedModel:
    head: str
    params: net.DenseParams
    subject_table: EmbeddingTable
    relation_table: EmbeddingTable
    object_table: EmbeddingTable
    config: TrainConfig
    seed: int | None
    provenance: dict = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ModelError(f"unknown head {self.head!r}")
        expected = expected_input_dim(self.tables, self.config.include_subject_size)
        if self.params.input_dim != expected:
            raise ModelError(
                f"first-layer width {self.params.input_dim} != assembled input "
                f"width {expected}")
        out = self.params.output_dim
        if self.head == "reg" and out != 4:
            raise ModelError(f"REG head must output 4 values, got {out}")
        if self.head == "pix" and out != self.config.grid_size ** 2:
            raise ModelError(
                f"PIX head must output grid_size^2 = {self.config.grid_size ** 2} "
                f"values, got {out}")

    @property
    def tables(self) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
        return (self.subject_table, self.relation_table, self.object_table)

    @property
    def grid_size(self) -> int:
        return self.config.grid_size


def expected_input_dim(tables: Sequence[EmbeddingTable],
                       include_subject_size: bool = True) -> int:
    subject_fields = 4 if include_subject_size else 2
    return sum(t.dim for t in tables) + subject_fields


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------

def assemble_input(query: Query, tables: Sequence[EmbeddingTable],
                   include_subject_size: bool = True) -> np.ndarray:
    """Concatenate the three word vectors with the subject center (and size)."""
    s_table, r_table, o_table = tables
    box = query.subject_box
    subject_fields = [box.center_x, box.center_y]
    if include_subject_size:
        subject_fields += [box.half_w, box.half_h]
    return np.concatenate([
        lookup(s_table, query.subject_word),
        lookup(r_table, query.relation_word),
        lookup(o_table, query.object_word),
        np.asarray(subject_fields, dtype=np.float64),
    ])


def build_design_matrix(instances: Sequence[Instance],
                        tables: Sequence[EmbeddingTable],
                        include_subject_size: bool = True) -> np.ndarray:
    """Vectorized assemble_input over a corpus slice."""
    s_table, r_table, o_table = tables
    try:
        s_idx = np.asarray([s_table.vocab.index[i.subject_word] for i in instances])
        r_idx = np.asarray([r_table.vocab.index[i.relation_word] for i in instances])
        o_idx = np.asarray([o_table.vocab.index[i.object_word] for i in instances])
    except KeyError as exc:
        raise EmbeddingError(f"token {exc.args[0]!r} missing from vocabulary") from exc
    cols = [s_table.vectors[s_idx], r_table.vectors[r_idx], o_table.vectors[o_idx]]
    sbox = np.asarray([[i.subject_box.center_x, i.subject_box.center_y,
                        i.subject_box.half_w, i.subject_box.half_h]
                       for i in instances], dtype=np.float64)
    cols.append(sbox if include_subject_size else sbox[:, :2])
    return np.hstack(cols)


def build_reg_targets(instances: Sequence[Instance]) -> np.ndarray:
    return np.asarray([[i.object_box.center_x, i.object_box.center_y,
                        i.object_box.half_w, i.object_box.half_h]
                       for i in instances], dtype=np.float64)


# ---------------------------------------------------------------------------
# Rasterization and heatmap reading
# ---------------------------------------------------------------------------

def rasterize_box(box: Box, grid_size: int) -> np.ndarray:
    """Binary M x M occupancy grid for a box clipped to the unit square.

    Cell (i, j) is set when its center ((j+0.5)/M, (i+0.5)/M) lies inside the
    box, boundaries closed; row index i grows downward. A box that captures no
    cell center (degenerate or very thin) sets the single cell containing its
    center.
    """
    m = int(grid_size)
    if m < 2:
        raise ModelError(f"grid size must be >= 2, got {m}")
    x0, y0, x1, y1 = box.corners()
    x0, x1 = max(x0, 0.0), min(x1, 1.0)
    y0, y1 = max(y0, 0.0), min(y1, 1.0)
    centers = (np.arange(m) + 0.5) / m
    in_x = (centers >= x0) & (centers <= x1)
    in_y = (centers >= y0) & (centers <= y1)
    grid = np.outer(in_y, in_x).astype(np.float64)
    if not grid.any():
        j = min(max(int(box.center_x * m), 0), m - 1)
        i = min(max(int(box.center_y * m), 0), m - 1)
        grid[i, j] = 1.0
    return grid


def build_pix_targets(instances: Sequence[Instance], grid_size: int) -> np.ndarray:
    return np.stack([rasterize_box(i.object_box, grid_size).reshape(-1)
                     for i in instances])


def heatmap_center(grid: np.ndarray) -> np.ndarray:
    """Average the centers of all cells within 1e-9 of the peak activation.

    Returns (x, y) in normalized coordinates.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ModelError("heatmap must be a non-empty 2D grid")
    m_rows, m_cols = grid.shape
    peak = grid.max()
    ys, xs = np.nonzero(grid >= peak - 1e-9)
    cx = float(np.mean((xs + 0.5) / m_cols))
    cy = float(np.mean((ys + 0.5) / m_rows))
    return np.array([cx, cy])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(instances: Sequence[Instance], head: str,
          tables: Sequence[EmbeddingTable], config: TrainConfig | None = None,
          seed: int = 0, provenance: dict | None = None) -> TrainedModel:
    """Train one model with shuffled mini-batch RMSprop.

    Embedding tables stay frozen: inputs are assembled once and gradients
    stop at the first dense layer. The seed fixes both the weight
    initialization and the per-epoch shuffling.
    """
    if head not in HEADS:
        raise ModelError(f"unknown head {head!r}")
    if not instances:
        raise ModelError("training set is empty")
    config = config or TrainConfig()

    x = build_design_matrix(instances, tables, config.include_subject_size)
    if head == "reg":
        y = build_reg_targets(instances)
        out_dim, out_act = 4, "linear"
    else:
        y = build_pix_targets(instances, config.grid_size)
        out_dim, out_act = config.grid_size ** 2, "sigmoid"

    rng = np.random.default_rng(seed)
    sizes = [x.shape[1], *config.hidden_sizes, out_dim]
    params = net.init_dense(sizes, out_act, rng)
    state = net.OptimizerState.for_params(params, config.learning_rate,
                                          config.rho, config.epsilon)

    n = x.shape[0]
    batch = min(config.batch_size, n)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            fwd = net.forward(params, x[idx])
            loss, grad_out = net.loss_for_head(head, fwd.output, y[idx])
            if not np.isfinite(loss):
                raise net.TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {lo // batch}")
            grads = net.backward(params, fwd, grad_out)
            net.rmsprop_step(params, grads, state)
            total += loss * len(idx)
        epoch_losses.append(total / n)
        logger.info("epoch %d/%d %s loss %.6f", epoch + 1, config.epochs,
                    head, epoch_losses[-1])

    return TrainedModel(head=head, params=params,
                        subject_table=tables[0], relation_table=tables[1],
                        object_table=tables[2], config=config, seed=seed,
                        provenance=dict(provenance or {}),
                        epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _forward_design(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    return net.forward(model.params, x).output


def predict_reg(model: TrainedModel, query: Query) -> RegPrediction:
    if model.head != "reg":
        raise ModelError(f"model head is {model.head!r}, expected 'reg'")
    x = assemble_input(query, model.tables, model.config.include_subject_size)
    out = _forward_design(model, x)[0]
    return RegPrediction(center=out[:2].copy(), half=out[2:].copy())


def predict_pix(model: TrainedModel, query: Query) -> np.ndarray:
    """Return the M x M grid of sigmoid activations."""
    if model.head != "pix":
        raise ModelError(f"model head is {model.head!r}, expected 'pix'")
    x = assemble_input(query, model.tables, model.config.include_subject_size)
    out = _forward_design(model, x)[0]
    m = model.grid_size
    return out.reshape(m, m)


def predict_reg_batch(model: TrainedModel,
                      instances: Sequence[Instance]) -> np.ndarray:
    """(n, 4) raw regression outputs for a corpus slice."""
    if model.head != "reg":
        raise ModelError(f"model head is {model.head!r}, expected 'reg'")
    x = build_design_matrix(instances, model.tables,
                            model.config.include_subject_size)
    return _forward_design(model, x)


def predict_pix_batch(model: TrainedModel,
                      instances: Sequence[Instance]) -> np.ndarray:
    """(n, M, M) heatmaps for a corpus slice."""
    if model.head != "pix":
        raise ModelError(f"model head is {model.head!r}, expected 'pix'")
    x = build_design_matrix(instances, model.tables,
                            model.config.include_subject_size)
    out = _forward_design(model, x)
    m = model.grid_size
    return out.reshape(len(instances), m, m)


# ---------------------------------------------------------------------------
# Linear interpreter
# ---------------------------------------------------------------------------

def fit_linear_interpreter(instances: Sequence[Instance],
                           tables: Sequence[EmbeddingTable],
                           iterations: int = 20000,
                           provenance: dict | None = None) -> TrainedModel:
    """Fit the hidden-layer-free regression model used for weight readings.

    Requires one-hot tables so concatenation indices map to tokens. Trained
    by full-batch gradient descent from zero initialization, which converges
    to the minimum-norm least-squares solution and is fully deterministic;
    the step size is set from the Gram matrix's largest eigenvalue.
    """
    for table in tables:
        if table.variant != "one_hot":
            raise ModelError("the linear interpreter requires one-hot tables")
    if not instances:
        raise ModelError("training set is empty")

    x = build_design_matrix(instances, tables, include_subject_size=True)
    y = build_reg_targets(instances)
    n = x.shape[0]
    xb = np.hstack([x, np.ones((n, 1))])

    gram = (2.0 / n) * (xb.T @ xb)
    lam_max = float(np.linalg.eigvalsh(gram)[-1])
    lr = 1.0 / lam_max
    c = (2.0 / n) * (xb.T @ y)
    w = np.zeros((xb.shape[1], 4))
    for _ in range(iterations):
        w -= lr * (gram @ w - c)

    params = net.DenseParams([net.Layer(weights=w[:-1].copy(),
                                        bias=w[-1].copy(),
                                        activation="linear")])
    config = TrainConfig(epochs=iterations, batch_size=n, learning_rate=lr,
                         hidden_sizes=(), include_subject_size=True)
    fwd = net.forward(params, x)
    final_loss, _ = net.mse_loss(fwd.output, y)
    return TrainedModel(head="reg", params=params,
                        subject_table=tables[0], relation_table=tables[1],
                        object_table=tables[2], config=config, seed=None,
                        provenance=dict(provenance or {}),
                        epoch_losses=[final_loss])


def concat_index(tables: Sequence[EmbeddingTable], role: str, token: str) -> int:
    """Index of a token's slot in the one-hot concatenation layer.

    Subjects occupy [0, |V_S|), relations [|V_S|, |V_S|+|V_R|), objects the
    next |V_O| slots, then the four subject-box fields.
    """
    s_table, r_table, o_table = tables
    if role == "subject":
        return s_table.vocab.index_of(token)
    if role == "relation":
        return len(s_table.vocab) + r_table.vocab.index_of(token)
    if role == "object":
        return len(s_table.vocab) + len(r_table.vocab) + o_table.vocab.index_of(token)
    raise ModelError(f"unknown role {role!r}")


OUTPUT_DIMS = ("center_x", "center_y", "half_w", "half_h")


def rank_weights(model: TrainedModel, output_dim: int, role: str,
                 top_k: int | None = None,
                 smallest: bool = False) -> list[tuple[str, float]]:
    """Tokens of one role ranked by |weight| on the chosen output dimension.

    Descending by default ("largest"), ascending with smallest=True. Ties
    break lexicographically. top_k beyond the vocabulary returns the full
    ranking.
    """
    if not 0 <= output_dim <= 3:
        raise ModelError(f"output_dim must be in 0..3, got {output_dim}")
    if role == "subject":
        vocab = model.subject_table.vocab
    elif role == "relation":
        vocab = model.relation_table.vocab
    elif role == "object":
        vocab = model.object_table.vocab
    else:
        raise ModelError(f"unknown role {role!r}")
    weights = model.params.layers[-1].weights
    entries = []
    for token in vocab.tokens:
        idx = concat_index(model.tables, role, token)
        entries.append((token, float(weights[idx, output_dim])))
    entries.sort(key=lambda tw: (abs(tw[1]), tw[0]) if smallest
                 else (-abs(tw[1]), tw[0]))
    if top_k is not None:
        entries = entries[:top_k]
    return entries


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def model_to_json_dict(model: TrainedModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "head": model.head,
        "config": model.config.to_json_dict(),
        "seed": model.seed,
        "provenance": model.provenance,
        "epoch_losses": model.epoch_losses,
        "params": model.params.to_json_dict(),
        "embeddings": {
            "subject": model.subject_table.to_json_dict(),
            "relation": model.relation_table.to_json_dict(),
            "object": model.object_table.to_json_dict(),
        },
    }


def model_from_json_dict(d: dict) -> TrainedModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unrecognized checkpoint format {d.get('format')!r}")
    emb = d["embeddings"]
    return TrainedModel(
        head=d["head"],
        params=net.DenseParams.from_json_dict(d["params"]),
        subject_table=EmbeddingTable.from_json_dict(emb["subject"]),
        relation_table=EmbeddingTable.from_json_dict(emb["relation"]),
        object_table=EmbeddingTable.from_json_dict(emb["object"]),
        config=TrainConfig.from_json_dict(d["config"]),
        seed=d.get("seed"),
        provenance=d.get("provenance", {}),
        epoch_losses=list(d.get("epoch_losses", [])),
    )


def save_model(model: TrainedModel, path: str | Path) -> None:
    """Write a checkpoint; float64 values round-trip exactly through JSON."""
    payload = json.dumps(model_to_json_dict(model), sort_keys=True)
    Path(path).write_text(payload)


def load_model(path: str | Path) -> TrainedModel:
    return model_from_json_dict(json.loads(Path(path).read_text()))
