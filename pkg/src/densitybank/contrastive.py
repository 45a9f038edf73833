"""Crowd/background patch contrast on the feature grid.

Patches are chosen from the predicted density map: after max-normalizing
and thresholding it, each ``patch x patch`` cell is labelled crowd (> 50 %
of pixels above threshold), background (< 10 %) or ambiguous (discarded).
Each batch pulls an anchor crowd cell toward another crowd cell and pushes
it away from ``k`` background cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grid import Rect, normalize_max, threshold_binarize

log = logging.getLogger(__name__)

CROWD_FRACTION = 0.5
BACKGROUND_FRACTION = 0.1


@dataclass(frozen=True)
class PatchEmbedding:
    rect: Rect
    vector: np.ndarray  # unit norm, (D,)
    norm: float  # length of the raw average before normalization


@dataclass(frozen=True)
class PairBatch:
    anchor: PatchEmbedding
    positive: PatchEmbedding
    negatives: tuple[PatchEmbedding, ...]


def embed_patch(features: np.ndarray, rect: Rect) -> PatchEmbedding | None:
    """Average the feature grid over ``rect`` and L2-normalize; ``None`` for a zero average."""
    raw = features[(slice(None), *rect.slices)].mean(axis=(1, 2))
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        return None
    return PatchEmbedding(rect, raw / norm, norm)


def classify_cells(density, threshold: float, patch: int) -> tuple[list[Rect], list[Rect]]:
    """Split the full ``patch``-sized cells into (crowd, background) lists, row-major."""
    binary = threshold_binarize(normalize_max(density), threshold)
    h, w = binary.shape
    crowd, background = [], []
    for v0 in range(0, h - patch + 1, patch):
        for u0 in range(0, w - patch + 1, patch):
            frac = binary[v0 : v0 + patch, u0 : u0 + patch].mean()
            rect = Rect(u0, v0, patch, patch)
            if frac > CROWD_FRACTION:
                crowd.append(rect)
            elif frac < BACKGROUND_FRACTION:
                background.append(rect)
    return crowd, background


def select_pairs(
    density,
    features: np.ndarray,
    threshold: float = 0.2,
    patch: int = 8,
    k: int = 8,
    rng: np.random.Generator | None = None,
    cap: int = 16,
) -> list[PairBatch]:
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must lie in (0, 1], got {threshold}")
    if patch < 1 or k < 1:
        raise ParameterError(f"patch and k must be >= 1, got patch={patch} k={k}")
    density = np.asarray(density)
    if features.shape[1:] != density.shape:
        raise ParameterError(f"features {features.shape} not aligned with density {density.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)

    crowd_cells, bg_cells = classify_cells(density, threshold, patch)
    crowd = [e for e in (embed_patch(features, r) for r in crowd_cells) if e is not None]
    background = [e for e in (embed_patch(features, r) for r in bg_cells) if e is not None]
    if len(crowd) < 2 or len(background) < k:
        log.debug("contrastive step skipped: %d crowd, %d background cells", len(crowd), len(background))
        return []

    batches = []
    for _ in range(min(len(crowd) - 1, cap)):
        a, p = rng.choice(len(crowd), size=2, replace=False)
        negs = rng.choice(len(background), size=k, replace=False)
        batches.append(PairBatch(crowd[a], crowd[p], tuple(background[n] for n in negs)))
    return batches


def reembed(batches: list[PairBatch], features: np.ndarray) -> list[PairBatch]:
    """Same cells, embeddings recomputed from ``features``."""

    def again(e: PatchEmbedding) -> PatchEmbedding:
        fresh = embed_patch(features, e.rect)
        if fresh is None:
            raise ParameterError(f"patch {e.rect} has a zero average embedding")
        return fresh

    return [
        PairBatch(again(b.anchor), again(b.positive), tuple(again(n) for n in b.negatives))
        for b in batches
    ]


def info_nce(
    anchor: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    tau: float,
    include_positive: bool = False,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Contrastive loss and its gradients w.r.t. anchor, positive and each negative.

    By default the denominator sums over the negatives only, so the loss is
    ``-a.p/tau + logsumexp(a.n_k/tau)`` and may be negative. With
    ``include_positive`` it becomes the usual softmax cross-entropy.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    s_pos = a @ p / tau
    logits = n @ a / tau
    if include_positive:
        logits = np.concatenate([[s_pos], logits])
    top = logits.max()
    weights = np.exp(logits - top)
    lse = top + np.log(weights.sum())
    weights /= weights.sum()
    loss = float(lse - s_pos)

    if include_positive:
        w_pos, w_neg = weights[0], weights[1:]
    else:
        w_pos, w_neg = 0.0, weights
    g_anchor = ((w_pos - 1.0) * p + w_neg @ n) / tau
    g_positive = (w_pos - 1.0) * a / tau
    g_negatives = w_neg[:, None] * a[None, :] / tau
    return loss, g_anchor, g_positive, g_negatives


def batch_info_nce(batch: PairBatch, tau: float, include_positive: bool = False):
    negs = np.stack([e.vector for e in batch.negatives])
    return info_nce(batch.anchor.vector, batch.positive.vector, negs, tau, include_positive)


def _normalized_grad(e: PatchEmbedding, g: np.ndarray) -> np.ndarray:
    """Pull a gradient on the unit vector back to the raw average."""
    return (g - e.vector * (e.vector @ g)) / e.norm


def contrastive_loss(
    batches: list[PairBatch],
    tau: float,
    feature_shape: tuple[int, int, int],
    include_positive: bool = False,
) -> tuple[float, np.ndarray]:
    """Mean loss over batches and its gradient on the feature grid."""
    grad = np.zeros(feature_shape, dtype=np.float64)
    if not batches:
        return 0.0, grad
    total = 0.0
    scale = 1.0 / len(batches)
    for batch in batches:
        loss, g_a, g_p, g_n = batch_info_nce(batch, tau, include_positive)
        total += loss
        pairs = [(batch.anchor, g_a), (batch.positive, g_p)]
        pairs += list(zip(batch.negatives, g_n))
        for emb, g in pairs:
            r = emb.rect
            g_raw = _normalized_grad(emb, g) * scale / (r.width * r.height)
            grad[(slice(None), *r.slices)] += g_raw[:, None, None]
    return total * scale, grad
