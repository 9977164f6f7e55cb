"""Adaptation objective: anchoring, alignment, and baseline losses.

The combined objective for one test batch is

    total = anchor_term + alignment_term

where the anchor term distills the adapting model's predictions (original
and augmented views) toward the batch-statistics-adjusted source model, and
the alignment term is a supervised-style contrastive loss over original,
augmented, and nearest-prototype views sharing pseudo-labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_LOG, Tensor
from .errors import ConfigError, ContractError, EmptyPositiveSetError, ShapeError
from .prototypes import PrototypeBank, assign_prototype_view

PROB_ROW_TOL = 1e-6
UNIT_ROW_TOL = 1e-6


def _rows_of(t, name: str) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def _check_probability_rows(arr: np.ndarray, name: str) -> None:
    sums = arr.sum(axis=1)
    if np.abs(sums - 1.0).max() > PROB_ROW_TOL or arr.min() < -PROB_ROW_TOL:
        raise ContractError(f"{name} rows are not probability vectors")


def source_anchor_loss(probs_original: Tensor, probs_augmented: Tensor | None, anchor_probs) -> Tensor:
    """Self-distillation toward the source model's batch-adjusted predictions.

    ``-(1/N) sum_i sum_j (p_ij + q_ij) * log(a_ij)`` with the anchor ``a``
    held constant (log-clamped), so gradients flow only into the adapting
    model's probabilities ``p`` and ``q``. Pass ``probs_augmented=None`` for
    the original-view-only variant.
    """
    anchor = _rows_of(anchor_probs, "anchor_probs")
    p = _rows_of(probs_original, "probs_original")
    if p.shape != anchor.shape:
        raise ShapeError(f"probs {p.shape} do not match anchor {anchor.shape}")
    _check_probability_rows(anchor, "anchor_probs")
    _check_probability_rows(p, "probs_original")
    log_anchor = np.log(np.maximum(anchor, EPS_LOG))
    n = anchor.shape[0]
    total = ad.tsum(ad.multiply(probs_original, log_anchor))
    if probs_augmented is not None:
        q = _rows_of(probs_augmented, "probs_augmented")
        if q.shape != anchor.shape:
            raise ShapeError(f"augmented probs {q.shape} do not match anchor {anchor.shape}")
        _check_probability_rows(q, "probs_augmented")
        total = ad.add(total, ad.tsum(ad.multiply(probs_augmented, log_anchor)))
    return ad.scale(total, -1.0 / n)


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean Shannon entropy of prediction rows: ``-(1/N) sum p log p``."""
    arr = _rows_of(probs, "probs")
    _check_probability_rows(arr, "probs")
    n = arr.shape[0]
    probs = ad.as_tensor(probs)
    return ad.scale(ad.tsum(ad.multiply(probs, ad.log(probs))), -1.0 / n)


def contrastive_loss(embeddings: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Supervised-style contrastive loss over unit-norm embedding rows.

    For each row i with positive set ``S_i = {j != i : labels_j == labels_i}``:

        -(1/|S_i|) * sum_{j in S_i} log( exp(z_i.z_j / tau)
                                         / sum_{k != i} exp(z_i.z_k / tau) )

    summed over all rows (no 1/M prefactor). Row reductions run in canonical
    value order, making the result exactly invariant to joint row/label
    permutations.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = _rows_of(embeddings, "embeddings")
    y = np.asarray(labels)
    m = z.shape[0]
    if y.shape != (m,):
        raise ShapeError(f"labels shape {y.shape} does not match {m} embedding rows")
    norms = np.linalg.norm(z, axis=1)
    if np.abs(norms - 1.0).max() > UNIT_ROW_TOL:
        raise ContractError("embedding rows must be unit-norm")
    same = y[:, None] == y[None, :]
    off_diag = ~np.eye(m, dtype=bool)
    pos_mask = same & off_diag
    pos_counts = pos_mask.sum(axis=1)
    lonely = np.nonzero(pos_counts == 0)[0]
    if lonely.size:
        raise EmptyPositiveSetError(
            f"labels {sorted(set(y[lonely].tolist()))} occur only once; no positives"
        )
    embeddings = ad.as_tensor(embeddings)
    sim = ad.scale(ad.pairwise_dot(embeddings), 1.0 / tau)
    denom = ad.rowsum_sorted(ad.multiply(ad.exp(sim), off_diag.astype(np.float64)))
    mean_pos = ad.multiply(
        ad.rowsum_sorted(ad.multiply(sim, pos_mask.astype(np.float64))),
        1.0 / pos_counts,
    )
    return ad.sum_sorted(ad.subtract(ad.log(denom), mean_pos))


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true classes (source training)."""
    arr = _rows_of(probs, "probs")
    y = np.asarray(labels)
    n, c = arr.shape
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), y] = 1.0
    return ad.scale(ad.tsum(ad.multiply(ad.log(probs), one_hot)), -1.0 / n)


def pseudo_label(anchor_probs) -> np.ndarray:
    """Per-row argmax class; ties break to the lowest class index."""
    arr = _rows_of(anchor_probs, "anchor_probs")
    return np.argmax(arr, axis=1)


def augment(
    x: np.ndarray,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.9, 1.1),
    noise_std: float = 0.05,
) -> np.ndarray:
    """Second view of a batch: per-sample scale jitter plus coordinate noise."""
    x = np.asarray(x, dtype=np.float64)
    scales = rng.uniform(scale_range[0], scale_range[1], size=(x.shape[0], 1))
    noise = rng.normal(0.0, noise_std, size=x.shape)
    return x * scales + noise


@dataclass
class ViewBatch:
    """One test batch prepared for adaptation: raw views plus anchor outputs."""

    originals: np.ndarray
    augmented: np.ndarray
    anchor_probs: np.ndarray
    pseudo_labels: np.ndarray


def build_view_batch(snapshot, x: np.ndarray, rng: np.random.Generator) -> ViewBatch:
    """Run the frozen source model on the batch and assemble both views.

    The anchor predictions use the current batch's statistics and are
    constants in any subsequent graph.
    """
    x = np.asarray(x, dtype=np.float64)
    anchor = snapshot.predict_proba(x, bn_mode="batch").data
    return ViewBatch(
        originals=x,
        augmented=augment(x, rng),
        anchor_probs=anchor,
        pseudo_labels=pseudo_label(anchor),
    )


def target_alignment_loss(
    model,
    feats: Tensor,
    feats_augmented: Tensor | None,
    pseudo_labels: np.ndarray,
    bank: PrototypeBank | None,
    tau: float,
) -> Tensor:
    """Contrastive alignment over projected views sharing pseudo-labels.

    Views, in block order: projected original features, projected augmented
    features (optional), and projected nearest-prototype features (optional).
    Prototype features skip the feature extractor and carry no gradient.
    """
    blocks = [model.project(feats)]
    if feats_augmented is not None:
        blocks.append(model.project(feats_augmented))
    if bank is not None:
        _, proto_feats = assign_prototype_view(feats.data, bank)
        blocks.append(model.project(proto_feats))
    if len(blocks) < 2:
        raise ConfigError("target alignment needs at least two views per sample")
    z = ad.concat(blocks, axis=0)
    labels = np.tile(np.asarray(pseudo_labels), len(blocks))
    return contrastive_loss(z, labels, tau)


def sata_loss(
    model,
    batch: ViewBatch,
    bank: PrototypeBank | None,
    tau: float = 0.1,
    use_target_alignment: bool = True,
    use_prototypes: bool = True,
    use_augmented_view: bool = True,
) -> tuple[Tensor, Tensor]:
    """Full adaptation objective for one batch.

    Returns ``(loss, probs_original)`` where the probabilities come from the
    same forward pass the loss uses, so callers can report predictions that
    predate the parameter update. With ``use_target_alignment=False`` the
    returned loss is exactly the anchor term.
    """
    feats = model.features(batch.originals, bn_mode="batch")
    probs = ad.softmax(model.logits(feats))
    feats_aug = None
    probs_aug = None
    if use_augmented_view:
        feats_aug = model.features(batch.augmented, bn_mode="batch")
        probs_aug = ad.softmax(model.logits(feats_aug))
    loss = source_anchor_loss(probs, probs_aug, batch.anchor_probs)
    if use_target_alignment:
        alignment = target_alignment_loss(
            model,
            feats,
            feats_aug,
            batch.pseudo_labels,
            bank if use_prototypes else None,
            tau,
        )
        loss = ad.add(loss, alignment)
    return loss, probs
