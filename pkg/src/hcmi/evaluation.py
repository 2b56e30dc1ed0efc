"""Rank metrics, dual-softmax re-scoring and frame-word matching dumps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hcmi.aggregator import HierarchicalEmbedding

REPORT_FIELDS = ("direction", "r1", "r5", "r10", "mdr", "mnr", "tie_count")
DIRECTIONS = ("text->video", "video->text")


@dataclass
class RetrievalReport:
    direction: str
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float
    tie_count: int = 0
    ranks: np.ndarray | None = field(default=None, compare=False, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def ranks_of_truth(scores: np.ndarray, truth) -> tuple[np.ndarray, np.ndarray]:
    """1-based optimistic rank of each query's correct column, plus tie counts.

    A rank is 1 + the number of columns scoring strictly higher; ``ties`` counts
    the other columns with exactly the truth's score.
    """
    s = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=int)
    if truth.shape != (s.shape[0],):
        raise ValueError(f"need one truth column per query: {truth.shape} vs {s.shape[0]} queries")
    if truth.size and (truth.min() < 0 or truth.max() >= s.shape[1]):
        raise IndexError(f"truth column out of range [0, {s.shape[1]})")
    target = s[np.arange(s.shape[0]), truth][:, None]
    ranks = 1 + np.sum(s > target, axis=1)
    ties = np.sum(s == target, axis=1) - 1
    return ranks, ties


def summarize_ranks(ranks, direction: str = "text->video", tie_count: int = 0) -> RetrievalReport:
    ranks = np.asarray(ranks)
    n = len(ranks)
    mdr = float(np.sort(ranks)[(n - 1) // 2])
    return RetrievalReport(
        direction=direction,
        r1=100.0 * np.count_nonzero(ranks <= 1) / n,
        r5=100.0 * np.count_nonzero(ranks <= 5) / n,
        r10=100.0 * np.count_nonzero(ranks <= 10) / n,
        mdr=mdr,
        mnr=float(np.mean(ranks)),
        tie_count=int(tie_count),
        ranks=ranks,
    )


def rank_metrics(scores, truth=None, direction: str = "text->video") -> RetrievalReport:
    """R@1/5/10, median rank (lower middle) and mean rank with rows as queries."""
    scores = np.asarray(scores, dtype=float)
    if truth is None:
        truth = np.arange(scores.shape[0])
    ranks, ties = ranks_of_truth(scores, truth)
    return summarize_ranks(ranks, direction, int(ties.sum()))


def both_directions(scores, truth=None) -> list[RetrievalReport]:
    """Reports for text->video (rows) and video->text (columns) of a text x video matrix."""
    scores = np.asarray(scores, dtype=float)
    if truth is None:
        if scores.shape[0] != scores.shape[1]:
            raise ValueError("a rectangular matrix needs an explicit truth mapping")
        truth = np.arange(scores.shape[0])
    truth = np.asarray(truth)
    t2v = rank_metrics(scores, truth, "text->video")
    # each video query's correct text: texts whose truth is that video (first one)
    inverse = np.full(scores.shape[1], -1)
    for text_idx in range(len(truth) - 1, -1, -1):
        inverse[truth[text_idx]] = text_idx
    keep = inverse >= 0
    v2t = rank_metrics(scores.T[keep], inverse[keep], "video->text")
    return [t2v, v2t]


def dual_softmax_factors(scores, gamma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise and column-wise softmax of gamma * scores."""
    if not gamma > 0:
        raise ValueError(f"dual softmax temperature must be > 0, got {gamma}")
    z = gamma * np.asarray(scores, dtype=float)
    if not np.isfinite(z).all():
        raise ValueError("dual softmax needs finite scores")
    row = np.exp(z - z.max(axis=1, keepdims=True))
    row /= row.sum(axis=1, keepdims=True)
    col = np.exp(z - z.max(axis=0, keepdims=True))
    col /= col.sum(axis=0, keepdims=True)
    return row, col


def dual_softmax(scores, gamma: float = 1.0) -> np.ndarray:
    row, col = dual_softmax_factors(scores, gamma)
    return row * col


# -- CSV ----------------------------------------------------------------------


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return buf.getvalue()


def write_reports(reports, path) -> None:
    Path(path).write_text(reports_to_csv(reports), encoding="utf-8")


def parse_reports(text: str) -> list[RetrievalReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        if tuple(row) != REPORT_FIELDS:
            raise ValueError(f"unexpected report columns {tuple(row)}")
        out.append(
            RetrievalReport(
                direction=row["direction"],
                r1=float(row["r1"]),
                r5=float(row["r5"]),
                r10=float(row["r10"]),
                mdr=float(row["mdr"]),
                mnr=float(row["mnr"]),
                tie_count=int(row["tie_count"]),
            )
        )
    return out


def read_reports(path) -> list[RetrievalReport]:
    return parse_reports(Path(path).read_text(encoding="utf-8"))


# -- matching dumps -------------------------------------------------------------


@dataclass
class MatchingDump:
    word_best_frame: np.ndarray  # (n_words,)
    word_similarity: np.ndarray  # (n_words,)
    phrase_top_words: list[list[int]]
    phrase_top_weights: list[list[float]]
    clip_top_frames: list[list[int]]
    clip_top_weights: list[list[float]]

    def words_csv(self) -> str:
        lines = ["word_index,word_best_frame,similarity"]
        for k, (f, s) in enumerate(zip(self.word_best_frame, self.word_similarity)):
            lines.append(f"{k},{int(f)},{float(s)!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _slots_csv(tokens, weights) -> str:
        lines = ["slot_index,top_tokens,top_weights"]
        for k, (t, w) in enumerate(zip(tokens, weights)):
            lines.append(f"{k},{';'.join(map(str, t))},{';'.join(repr(float(x)) for x in w)}")
        return "\n".join(lines) + "\n"

    def phrases_csv(self) -> str:
        return self._slots_csv(self.phrase_top_words, self.phrase_top_weights)

    def clips_csv(self) -> str:
        return self._slots_csv(self.clip_top_frames, self.clip_top_weights)


def _top_k(weights: np.ndarray, k: int) -> tuple[list[list[int]], list[list[float]]]:
    # stable sort on -w keeps the lowest index first among equal weights
    order = np.argsort(-weights, axis=1, kind="stable")[:, :k]
    return order.tolist(), np.take_along_axis(weights, order, axis=1).tolist()


def matching_dump(video: HierarchicalEmbedding, text: HierarchicalEmbedding, top_k: int = 3) -> MatchingDump:
    """Best frame for every word and the top contributing tokens of every slot.

    Both embeddings hold a single item (use ``HierarchicalEmbedding.item``).
    """
    frames = video.tokens_n.data[0][video.mask[0]]
    words = text.tokens_n.data[0][text.mask[0]]
    sims = words @ frames.T
    best = np.argmax(sims, axis=1)
    phrase_w = text.mid_weights.data[0][:, text.mask[0]]
    clip_w = video.mid_weights.data[0][:, video.mask[0]]
    pw, pv = _top_k(phrase_w, top_k)
    cw, cv = _top_k(clip_w, top_k)
    return MatchingDump(best, sims[np.arange(len(best)), best], pw, pv, cw, cv)
