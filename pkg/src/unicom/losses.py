"""Margin softmax over randomly selected classes and feature coordinates.

The training loss scores each embedding against a per-step subset of the
class prototypes (all batch positives plus uniformly sampled negatives)
using only a per-step random subset of the feature coordinates. Both the
embedding and the prototype sub-vectors are renormalized after masking,
so the additive angular margin keeps its geometric meaning on the
selected subspace. Baselines kept alongside for comparison experiments:
the plain full softmax, an instance-contrastive (InfoNCE) loss, and a
per-sample feature Dropout variant.

All math runs in float64. Gradients are mean-reduced over the batch.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, DimensionMismatchError, ValidationError
from .rng import stream_rng
from .util import ratio_count

_NORM_EPS = 1e-12


@dataclass
class LossConfig:
    """Hyperparameters of the selection loss.

    margin: additive angular margin applied to the positive-class angle.
    scale: multiplier on all cosine logits.
    r1: fraction of classes selected per step (positives always included).
    r2: fraction of feature coordinates kept by the per-step mask.
    """

    margin: float = 0.3
    scale: float = 64.0
    r1: float = 0.1
    r2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.scale <= 0:
            raise ValidationError("scale must be > 0")
        if not 0.0 < self.r1 <= 1.0:
            raise ValidationError("r1 must lie in (0, 1]")
        if not 0.0 < self.r2 <= 1.0:
            raise ValidationError("r2 must lie in (0, 1]")


class PrototypeMatrix:
    """One unit-norm column per class; always at least two classes."""

    def __init__(self, columns: np.ndarray):
        columns = np.array(columns, dtype=np.float64)
        if columns.ndim != 2:
            raise ValidationError("prototype columns must form a 2-D matrix")
        if columns.shape[1] < 2:
            raise ValidationError("a prototype matrix needs k >= 2 classes")
        norms = np.linalg.norm(columns, axis=0)
        if np.any(norms < _NORM_EPS):
            bad = int(np.argmin(norms))
            raise DegenerateVectorError(f"prototype column {bad} has zero norm")
        self.columns = columns / norms[None, :]

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def classes(self) -> int:
        return self.columns.shape[1]


@dataclass
class SelectionPlan:
    """Frozen per-step randomness: class subset and feature mask."""

    step: int
    class_subset: np.ndarray  # sorted distinct int64 indices
    feature_mask: np.ndarray  # (d,) bool


@dataclass
class LossOutput:
    loss: float
    probs: np.ndarray  # (b, |S|), rows sum to 1
    grad_embeddings: np.ndarray | None = None  # (b, d)
    grad_prototypes: np.ndarray | None = None  # (|S|, d), rows follow class_subset


def sample_classes(batch_labels, num_classes: int, r1: float, seed: int, step: int):
    """Class subset for one step: batch positives plus random negatives.

    The subset size is round(num_classes * r1), floored at the number of
    distinct positives so every label in the batch is always scored.
    Negatives are drawn uniformly without replacement; the draw is fully
    determined by (seed, step). Returns sorted distinct indices.
    """
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("batch_labels must be non-empty")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    if not 0.0 < r1 <= 1.0:
        raise ValidationError("r1 must lie in (0, 1]")

    positives = np.unique(labels)
    target = max(ratio_count(num_classes, r1), positives.size)
    need = target - positives.size
    if need == 0:
        return positives
    negatives = np.setdiff1d(np.arange(num_classes, dtype=np.int64), positives)
    rng = stream_rng(seed, "class-sample", step)
    sampled = rng.choice(negatives, size=need, replace=False)
    return np.sort(np.concatenate([positives, sampled]))


def sample_feature_mask(dim: int, r2: float, seed: int, step: int) -> np.ndarray:
    """Boolean mask with exactly round(dim * r2) coordinates enabled.

    Coordinates are chosen uniformly without replacement and the mask is
    shared by every sample of the step's batch.
    """
    if not 0.0 < r2 <= 1.0:
        raise ValidationError("r2 must lie in (0, 1]")
    keep = ratio_count(dim, r2)
    if keep < 1:
        raise ValidationError(f"round({dim} * {r2}) selects no coordinates")
    mask = np.zeros(dim, dtype=bool)
    rng = stream_rng(seed, "feature-mask", step)
    mask[rng.choice(dim, size=keep, replace=False)] = True
    return mask


def make_selection_plan(batch_labels, num_classes: int, dim: int, cfg: LossConfig, step: int) -> SelectionPlan:
    return SelectionPlan(
        step=step,
        class_subset=sample_classes(batch_labels, num_classes, cfg.r1, cfg.seed, step),
        feature_mask=sample_feature_mask(dim, cfg.r2, cfg.seed, step),
    )


def _masked_unit(vectors: np.ndarray, what: str):
    """Norms and unit versions of already-masked vectors (rows)."""
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms < _NORM_EPS):
        raise DegenerateVectorError(f"zero-norm masked {what} sub-vector")
    return norms, vectors / norms[:, None]


def _selection_core(embeddings, labels, prototypes: PrototypeMatrix, plan: SelectionPlan, cfg: LossConfig, with_grad: bool) -> LossOutput:
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if e.ndim != 2 or e.shape[0] != labels.shape[0]:
        raise DimensionMismatchError("embeddings and labels disagree on batch size")
    b, d = e.shape
    if d != prototypes.dim:
        raise DimensionMismatchError(
            f"embedding dim {d} does not match prototype dim {prototypes.dim}"
        )
    mask = np.asarray(plan.feature_mask, dtype=bool)
    if mask.shape != (d,):
        raise DimensionMismatchError("feature mask length does not match dim")
    if not mask.any():
        raise ValidationError("feature mask selects no coordinates")
    subset = np.asarray(plan.class_subset, dtype=np.int64)

    # Positive-class positions inside the (sorted) subset.
    pos_idx = np.searchsorted(subset, labels)
    if np.any(pos_idx >= subset.size) or np.any(subset[np.minimum(pos_idx, subset.size - 1)] != labels):
        raise ValidationError("a batch label is outside the selected class subset")

    u = e * mask  # masked embeddings, exact zeros off-mask
    u_norm, u_hat = _masked_unit(u, "embedding")
    v = (prototypes.columns[:, subset] * mask[:, None]).T  # (|S|, d)
    v_norm, v_hat = _masked_unit(v, "prototype")

    cos = u_hat @ v_hat.T  # (b, |S|)
    cos = np.clip(cos, -1.0, 1.0)
    logits = cfg.scale * cos
    rows = np.arange(b)

    margin_factor = None
    if cfg.margin > 0.0:
        cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
        boundary = math.cos(math.pi - cfg.margin)
        c_pos = cos[rows, pos_idx]
        sin_pos = np.sqrt(np.clip(1.0 - c_pos * c_pos, 0.0, None))
        in_range = c_pos > boundary
        phi = np.where(
            in_range,
            c_pos * cos_m - sin_pos * sin_m,
            c_pos - cfg.margin * sin_m,
        )
        logits[rows, pos_idx] = cfg.scale * phi
        # d(phi)/d(cos theta) on each branch, used by the backward pass.
        safe_sin = np.maximum(sin_pos, _NORM_EPS)
        margin_factor = np.where(in_range, cos_m + sin_m * c_pos / safe_sin, 1.0)

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    probs = exp / denom[:, None]
    loss = float(np.mean(np.log(denom) - shifted[rows, pos_idx]))

    if not with_grad:
        return LossOutput(loss=loss, probs=probs)

    dlogits = probs.copy()
    dlogits[rows, pos_idx] -= 1.0
    dlogits /= b
    dcos = dlogits * cfg.scale
    if margin_factor is not None:
        dcos[rows, pos_idx] *= margin_factor

    # Chain through the sub-vector renormalizations. Both u_hat and v_hat
    # carry exact zeros off-mask, so the gradients do too.
    g_u_hat = dcos @ v_hat
    grad_e = (g_u_hat - np.sum(g_u_hat * u_hat, axis=1, keepdims=True) * u_hat) / u_norm[:, None]
    g_v_hat = dcos.T @ u_hat
    grad_w = (g_v_hat - np.sum(g_v_hat * v_hat, axis=1, keepdims=True) * v_hat) / v_norm[:, None]

    return LossOutput(loss=loss, probs=probs, grad_embeddings=grad_e, grad_prototypes=grad_w)


def selection_forward(embeddings, labels, prototypes, plan, cfg) -> LossOutput:
    """Loss and per-sample probabilities of the selection softmax."""
    return _selection_core(embeddings, labels, prototypes, plan, cfg, with_grad=False)


def selection_backward(embeddings, labels, prototypes, plan, cfg) -> LossOutput:
    """Like `selection_forward`, with analytic gradients populated.

    grad_embeddings is (b, d) with exact zeros outside the feature mask;
    grad_prototypes is (|S|, d) with one row per selected class, in
    class_subset order, also exactly zero off-mask. Classes outside the
    subset receive no gradient at all.
    """
    return _selection_core(embeddings, labels, prototypes, plan, cfg, with_grad=True)


def _full_plan(num_classes: int, dim: int) -> SelectionPlan:
    return SelectionPlan(
        step=0,
        class_subset=np.arange(num_classes, dtype=np.int64),
        feature_mask=np.ones(dim, dtype=bool),
    )


def full_softmax_loss(embeddings, labels, prototypes, scale: float = 64.0, with_grad: bool = True) -> LossOutput:
    """Plain softmax cross-entropy over all classes (no margin, no masks)."""
    cfg = LossConfig(margin=0.0, scale=scale, r1=1.0, r2=1.0)
    plan = _full_plan(prototypes.classes, prototypes.dim)
    return _selection_core(embeddings, labels, prototypes, plan, cfg, with_grad)


@dataclass
class NceOutput:
    loss: float
    probs: np.ndarray  # (b, 1 + m_neg); column 0 is the positive
    grad_anchors: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray


def instance_nce_loss(anchors, positives, negatives, temperature: float) -> NceOutput:
    """Instance-contrastive softmax over one positive and m negatives.

    Every anchor is scored against its own positive plus its negatives by
    plain dot product over temperature; the positive sits in the
    denominator. Inputs are expected row-normalized. Loss and gradients
    are mean-reduced over the batch.
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if a.shape != p.shape:
        raise DimensionMismatchError("anchors and positives must share a shape")
    if neg.ndim != 3 or neg.shape[0] != a.shape[0] or neg.shape[2] != a.shape[1]:
        raise DimensionMismatchError("negatives must be (b, m_neg, d)")
    if neg.shape[1] == 0:
        raise ValidationError("at least one negative per anchor is required")
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")

    b = a.shape[0]
    pos_logit = np.sum(a * p, axis=1) / temperature  # (b,)
    neg_logits = np.einsum("bd,bmd->bm", a, neg) / temperature  # (b, m)
    logits = np.concatenate([pos_logit[:, None], neg_logits], axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(exp.sum(axis=1)) - shifted[:, 0]))

    dlogits = probs.copy()
    dlogits[:, 0] -= 1.0
    dlogits /= b * temperature
    grad_a = dlogits[:, 0:1] * p + np.einsum("bm,bmd->bd", dlogits[:, 1:], neg)
    grad_p = dlogits[:, 0:1] * a
    grad_n = dlogits[:, 1:, None] * a[:, None, :]
    return NceOutput(loss, probs, grad_a, grad_p, grad_n)


def apply_feature_dropout(embeddings, r3: float, seed: int, step: int):
    """Per-sample Bernoulli feature dropout with inverted scaling.

    Each coordinate of each sample is independently zeroed with
    probability r3; survivors are scaled by 1/(1 - r3), so the masked
    embedding equals the original in expectation. A row that loses every
    coordinate (only plausible at very small dims) is redrawn, since a
    fully-zeroed sample has no usable direction. Returns the
    masked-scaled embeddings and the boolean keep mask.
    """
    if not 0.0 <= r3 < 1.0:
        raise ValidationError("r3 must lie in [0, 1)")
    e = np.asarray(embeddings, dtype=np.float64)
    rng = stream_rng(seed, "dropout", step)
    keep = rng.random(e.shape) >= r3
    for _ in range(100):
        dead = ~keep.any(axis=1)
        if not dead.any():
            break
        keep[dead] = rng.random((int(dead.sum()), e.shape[1])) >= r3
    return e * keep / (1.0 - r3), keep


def _dropout_core(embeddings, labels, prototypes, cfg: LossConfig, r3: float, step: int, with_grad: bool) -> LossOutput:
    dropped, keep = apply_feature_dropout(embeddings, r3, cfg.seed, step)
    plan = _full_plan(prototypes.classes, prototypes.dim)
    out = _selection_core(dropped, labels, prototypes, plan, cfg, with_grad)
    if with_grad:
        out.grad_embeddings = out.grad_embeddings * keep / (1.0 - r3)
    return out


def dropout_forward(embeddings, labels, prototypes, cfg: LossConfig, r3: float, step: int = 0) -> LossOutput:
    """Full softmax on per-sample dropout-masked embeddings.

    The contrast case to the shared feature mask: the random pattern
    differs per sample and the prototypes stay unmasked, so gradients
    still span every feature dimension.
    """
    return _dropout_core(embeddings, labels, prototypes, cfg, r3, step, with_grad=False)


def dropout_backward(embeddings, labels, prototypes, cfg: LossConfig, r3: float, step: int = 0) -> LossOutput:
    """`dropout_forward` with gradients (chained through the dropout mask)."""
    return _dropout_core(embeddings, labels, prototypes, cfg, r3, step, with_grad=True)

