"""Cross-modal similarity at token, mid and global granularity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hcmi import autodiff as ad
from hcmi.aggregator import MASK_FILL, EmptyInputError, HierarchicalEmbedding
from hcmi.autodiff import Tensor

GRANULARITIES = ("token", "mid", "global", "combined")


@dataclass(frozen=True)
class GranularityWeights:
    alpha: float = 0.5
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"granularity weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class ScoreMatrix:
    """Similarity matrix with rows = texts and columns = videos."""

    values: Tensor
    granularity: str

    @property
    def array(self) -> np.ndarray:
        return self.values.data

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def ti_matrix(a: Tensor, a_mask: np.ndarray, b: Tensor, b_mask: np.ndarray) -> Tensor:
    """Token-wise interaction between every item of ``a`` and every item of ``b``.

    ``a`` is (Na, na, D) and ``b`` is (Nb, nb, D), both with unit rows; masks flag
    valid tokens. Entry (i, j) averages, over each side's valid tokens, the best
    match found in the other side, then halves the sum of the two averages.
    """
    if a.shape[0] == 0 or b.shape[0] == 0 or a.shape[1] == 0 or b.shape[1] == 0:
        raise EmptyInputError("token interaction needs non-empty token sets")
    sims = ad.pairwise_dot(a, b)  # (Na, Nb, na, nb)
    a_valid = a_mask[:, None, :, None]
    b_valid = b_mask[None, :, None, :]

    best_for_a = ad.max(sims + np.where(b_valid, 0.0, MASK_FILL), axis=3)  # (Na, Nb, na)
    a_weights = (a_mask / a_mask.sum(axis=1, keepdims=True))[:, None, :]
    a_side = ad.sum(ad.mul(best_for_a, a_weights), axis=2)

    best_for_b = ad.max(sims + np.where(a_valid, 0.0, MASK_FILL), axis=2)  # (Na, Nb, nb)
    b_weights = (b_mask / b_mask.sum(axis=1, keepdims=True))[None, :, :]
    b_side = ad.sum(ad.mul(best_for_b, b_weights), axis=2)
    return ad.scale(a_side + b_side, 0.5)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Dot products between unit global rows: ``a`` (Na, 1, D), ``b`` (Nb, 1, D)."""
    return ad.reshape(ad.pairwise_dot(a, b), (a.shape[0], b.shape[0]))


def token_interaction(a, b) -> float:
    """TI between two unit-row token matrices (na, D) and (nb, D)."""
    a, b = np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyInputError("token interaction needs non-empty token sets")
    out = ti_matrix(Tensor(a[None]), np.ones((1, a.shape[0]), bool), Tensor(b[None]), np.ones((1, b.shape[0]), bool))
    return float(out.data[0, 0])


def global_similarity(a, b) -> float:
    return float(np.dot(np.ravel(a), np.ravel(b)))


def _granular(videos: HierarchicalEmbedding, texts: HierarchicalEmbedding, granularity: str) -> Tensor:
    if granularity == "token":
        return ti_matrix(texts.tokens_n, texts.mask, videos.tokens_n, videos.mask)
    if granularity == "mid":
        tm = np.ones(texts.mid_n.shape[:2], dtype=bool)
        vm = np.ones(videos.mid_n.shape[:2], dtype=bool)
        return ti_matrix(texts.mid_n, tm, videos.mid_n, vm)
    if granularity == "global":
        return cosine_matrix(texts.glob_n, videos.glob_n)
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


def score_matrix(
    videos: HierarchicalEmbedding,
    texts: HierarchicalEmbedding,
    granularity: str = "combined",
    w: GranularityWeights = GranularityWeights(),
) -> ScoreMatrix:
    """Text-by-video similarity at one granularity (rectangular allowed)."""
    if len(videos) == 0 or len(texts) == 0:
        raise EmptyInputError("score_matrix needs at least one video and one text")
    if granularity != "combined":
        return ScoreMatrix(_granular(videos, texts, granularity), granularity)
    values = _granular(videos, texts, "token")
    if w.alpha:
        values = values + ad.scale(_granular(videos, texts, "mid"), w.alpha)
    if w.beta:
        values = values + ad.scale(_granular(videos, texts, "global"), w.beta)
    return ScoreMatrix(values, "combined")


def combine(token: Tensor, mid: Tensor, glob: Tensor, w: GranularityWeights) -> Tensor:
    return token + ad.scale(mid, w.alpha) + ad.scale(glob, w.beta)


def combined_score(hv: HierarchicalEmbedding, ht: HierarchicalEmbedding, w: GranularityWeights = GranularityWeights()) -> float:
    """TI(tokens) + alpha * TI(mid) + beta * cosine(global) for one video/text pair."""
    return float(score_matrix(hv, ht, "combined", w).array[0, 0])
