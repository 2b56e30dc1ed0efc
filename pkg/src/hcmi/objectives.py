"""Training objectives: positive-set InfoNCE at three granularities, the
hardest-negative triplet term, their weighted total, and the GDP/TWI baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hcmi import autodiff as ad
from hcmi.aggregator import HierarchicalEmbedding
from hcmi.autodiff import Tensor
from hcmi.interaction import GranularityWeights, ScoreMatrix, score_matrix

NO_NEGATIVE = -1
VARIANTS = ("gdp", "twi", "hci")


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.1
    theta: float = 0.1
    lam: float = 0.1

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError(f"margin theta must be >= 0, got {self.theta}")
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("alpha, beta and lambda must be >= 0")

    @property
    def granularity(self) -> GranularityWeights:
        return GranularityWeights(self.alpha, self.beta)


class BatchLabels:
    """Positive sets for a batch, stored as a boolean (N, N) mask.

    ``pos[i, k]`` is true when pair k counts as a positive for item i; the
    diagonal is always true. Negatives are the complement.
    """

    def __init__(self, pos: np.ndarray):
        pos = np.array(pos, dtype=bool)
        if pos.ndim != 2 or pos.shape[0] != pos.shape[1]:
            raise ValueError(f"positive mask must be square, got {pos.shape}")
        if not np.diag(pos).all():
            raise ValueError("every item must be its own positive")
        pos.setflags(write=False)
        self.pos = pos

    @classmethod
    def identity(cls, n: int) -> BatchLabels:
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def from_sets(cls, sets) -> BatchLabels:
        n = len(sets)
        pos = np.zeros((n, n), dtype=bool)
        for i, s in enumerate(sets):
            pos[i, list(s)] = True
        return cls(pos)

    @property
    def neg(self) -> np.ndarray:
        return ~self.pos

    def __len__(self) -> int:
        return self.pos.shape[0]

    def pos_sets(self) -> list[set[int]]:
        return [set(np.flatnonzero(row).tolist()) for row in self.pos]

    def neg_sets(self) -> list[set[int]]:
        return [set(np.flatnonzero(row).tolist()) for row in self.neg]

    def __eq__(self, other):
        return isinstance(other, BatchLabels) and np.array_equal(self.pos, other.pos)

    def __repr__(self):
        return f"BatchLabels({self.pos_sets()})"


def _values(s) -> Tensor:
    if isinstance(s, ScoreMatrix):
        return s.values
    return ad.as_tensor(s)


def _directional_log_terms(s: Tensor, pos: np.ndarray) -> Tensor:
    # log( e^{s_ik} / (sum_{j in neg_i} e^{s_ij} + e^{s_ik}) ), summed over positive (i, k)
    lse_neg = ad.logsumexp(s, axis=1, mask=~pos)
    log_denom = ad.logaddexp(ad.reshape(lse_neg, (s.shape[0], 1)), s)
    return ad.sum(ad.mul(s - log_denom, pos.astype(float)))


def infonce_positive_set(s, labels: BatchLabels) -> Tensor:
    """Symmetric InfoNCE where each positive competes only against negatives.

    ``s`` is a square score matrix. For every item i and every positive k the
    denominator runs over neg_i plus k itself; the text->video and video->text
    directions share the same positive sets.
    """
    s = _values(s)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise ValueError(f"InfoNCE needs a square score matrix, got {s.shape}")
    if len(labels) != n:
        raise ValueError(f"labels cover {len(labels)} items but the batch has {n}")
    total = _directional_log_terms(s, labels.pos) + _directional_log_terms(ad.transpose(s), labels.pos)
    return ad.scale(total, -1.0 / (2 * n))


def _scaled(m: Tensor, logit_scale: Tensor | None) -> Tensor:
    return m if logit_scale is None else ad.mul(m, ad.exp(logit_scale))


def _check_batch(videos: HierarchicalEmbedding, texts: HierarchicalEmbedding) -> int:
    if len(videos) != len(texts):
        raise DegenerateBatchError(f"{len(videos)} videos vs {len(texts)} texts")
    if len(videos) < 2:
        raise DegenerateBatchError(f"contrastive losses need at least 2 pairs, got {len(videos)}")
    return len(videos)


def loss_hci(
    videos: HierarchicalEmbedding,
    texts: HierarchicalEmbedding,
    labels: BatchLabels,
    w: LossWeights = LossWeights(),
    logit_scale: Tensor | None = None,
) -> Tensor:
    """Token-level InfoNCE + alpha * mid-level + beta * global-level."""
    _check_batch(videos, texts)
    loss = infonce_positive_set(_scaled(score_matrix(videos, texts, "token").values, logit_scale), labels)
    if w.alpha:
        mid = score_matrix(videos, texts, "mid").values
        loss = loss + ad.scale(infonce_positive_set(_scaled(mid, logit_scale), labels), w.alpha)
    if w.beta:
        glob = score_matrix(videos, texts, "global").values
        loss = loss + ad.scale(infonce_positive_set(_scaled(glob, logit_scale), labels), w.beta)
    return loss


def baseline_gdp(videos, texts, labels: BatchLabels, logit_scale: Tensor | None = None) -> Tensor:
    _check_batch(videos, texts)
    return infonce_positive_set(_scaled(score_matrix(videos, texts, "global").values, logit_scale), labels)


def baseline_twi(videos, texts, labels: BatchLabels, logit_scale: Tensor | None = None) -> Tensor:
    _check_batch(videos, texts)
    return infonce_positive_set(_scaled(score_matrix(videos, texts, "token").values, logit_scale), labels)


def select_hardest(s_combined, labels: BatchLabels) -> tuple[np.ndarray, np.ndarray]:
    """Hardest negatives by score, ties to the lowest index.

    Returns (video index per text row, text index per video column); items
    without negatives get ``NO_NEGATIVE``.
    """
    s = s_combined.array if isinstance(s_combined, ScoreMatrix) else np.asarray(getattr(s_combined, "data", s_combined))
    neg = labels.neg
    has_neg = neg.any(axis=1)
    by_text = np.where(has_neg, np.argmax(np.where(neg, s, -np.inf), axis=1), NO_NEGATIVE)
    by_video = np.where(has_neg, np.argmax(np.where(neg, s.T, -np.inf), axis=1), NO_NEGATIVE)
    return by_text, by_video


def loss_hsm(global_sims, hardest: tuple[np.ndarray, np.ndarray], theta: float = 0.1) -> Tensor:
    """Hinge triplet loss at global level against the hardest in-batch negatives.

    ``global_sims`` has rows = texts, columns = videos. Per item i the loss is
    half the sum of the video-anchored and text-anchored hinges; the batch mean
    is returned.
    """
    if theta < 0:
        raise ValueError(f"margin theta must be >= 0, got {theta}")
    g = _values(global_sims)
    n = g.shape[0]
    video_for_text, text_for_video = (np.asarray(h) for h in hardest)
    total = Tensor(0.0)
    idx = np.arange(n)
    # video anchor V_i: hardest text j, compare <V_i, T_j> with <V_i, T_i>
    keep = text_for_video != NO_NEGATIVE
    if keep.any():
        i = idx[keep]
        gap = ad.take(g, (text_for_video[keep], i)) - ad.take(g, (i, i))
        total = total + ad.sum(ad.hinge(gap + theta))
    # text anchor T_i: hardest video k
    keep = video_for_text != NO_NEGATIVE
    if keep.any():
        i = idx[keep]
        gap = ad.take(g, (i, video_for_text[keep])) - ad.take(g, (i, i))
        total = total + ad.sum(ad.hinge(gap + theta))
    return ad.scale(total, 0.5 / n)


@dataclass
class LossTerms:
    total: Tensor
    hci: Tensor
    hsm: Tensor


def variant_loss(videos, texts, labels, variant: str, w: LossWeights, logit_scale=None) -> Tensor:
    if variant == "hci":
        return loss_hci(videos, texts, labels, w, logit_scale)
    if variant == "twi":
        return baseline_twi(videos, texts, labels, logit_scale)
    if variant == "gdp":
        return baseline_gdp(videos, texts, labels, logit_scale)
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


def ranking_matrix(videos, texts, variant: str, w: GranularityWeights) -> ScoreMatrix:
    """The score matrix a variant ranks by (combined for hci)."""
    if variant == "hci":
        return score_matrix(videos, texts, "combined", w)
    if variant == "twi":
        return score_matrix(videos, texts, "token")
    if variant == "gdp":
        return score_matrix(videos, texts, "global")
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


def total_loss(
    videos: HierarchicalEmbedding,
    texts: HierarchicalEmbedding,
    labels: BatchLabels,
    w: LossWeights = LossWeights(),
    variant: str = "hci",
    mse: bool = True,
    logit_scale: Tensor | None = None,
) -> LossTerms:
    """Contrastive loss of ``variant`` plus lambda * hardest-negative triplet loss."""
    main = variant_loss(videos, texts, labels, variant, w, logit_scale)
    if not mse or w.lam == 0:
        return LossTerms(main, main, Tensor(0.0))
    ranking = ranking_matrix(videos, texts, variant, w.granularity)
    hardest = select_hardest(ranking.array, labels)
    glob = score_matrix(videos, texts, "global").values
    hsm = loss_hsm(glob, hardest, w.theta)
    return LossTerms(main + ad.scale(hsm, w.lam), main, hsm)
