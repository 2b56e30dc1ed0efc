"""Learned token aggregation and the per-modality encoding heads.

A head maps raw token features (frames or words) to three levels: the tokens
themselves, ``m`` mid-level slots (clips or phrases), and one global row.
Each slot is a softmax-weighted convex combination, over tokens, of a small
D-2D-D MLP applied to every token.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from hcmi import autodiff as ad
from hcmi.autodiff import ParamSet, ShapeError, Tensor

# Added to the aggregation logits of padded tokens so their softmax weight is 0.
MASK_FILL = -1e30


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    """Shape description of one modality head."""

    prefix: str
    d_in: int
    dim: int
    n_slots: int
    n_max: int = 0  # 0 disables the positional table

    @property
    def positional(self) -> bool:
        return self.n_max > 0


@dataclass
class HierarchicalEmbedding:
    """Three-level representation of a batch of items.

    Arrays are batched: ``tokens`` is (N, n, D), ``mid`` (N, m, D), ``glob``
    (N, 1, D). ``mask`` marks the valid token rows (N, n). The ``*_n`` fields are
    the L2-normalized copies.
    """

    tokens: Tensor
    mid: Tensor
    glob: Tensor
    mask: np.ndarray
    tokens_n: Tensor
    mid_n: Tensor
    glob_n: Tensor
    mid_weights: Tensor | None = None

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def item(self, i: int) -> HierarchicalEmbedding:
        """Detached single-item view, trimmed to its valid tokens."""
        keep = self.mask[i]
        weights = None if self.mid_weights is None else Tensor(self.mid_weights.data[i : i + 1, :, keep])
        return HierarchicalEmbedding(
            tokens=Tensor(self.tokens.data[i : i + 1, keep]),
            mid=Tensor(self.mid.data[i : i + 1]),
            glob=Tensor(self.glob.data[i : i + 1]),
            mask=self.mask[i : i + 1, keep],
            tokens_n=Tensor(self.tokens_n.data[i : i + 1, keep]),
            mid_n=Tensor(self.mid_n.data[i : i + 1]),
            glob_n=Tensor(self.glob_n.data[i : i + 1]),
            mid_weights=weights,
        )

    def detach(self) -> HierarchicalEmbedding:
        w = None if self.mid_weights is None else self.mid_weights.detach()
        return HierarchicalEmbedding(
            self.tokens.detach(), self.mid.detach(), self.glob.detach(), self.mask,
            self.tokens_n.detach(), self.mid_n.detach(), self.glob_n.detach(), w,
        )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_aggregator(params: ParamSet, prefix: str, dim: int, n_slots: int, rng: np.random.Generator) -> None:
    if n_slots < 1:
        raise ValueError(f"{prefix}: number of aggregation slots must be >= 1, got {n_slots}")
    params.add(f"{prefix}.W", _uniform(rng, dim, (dim, n_slots)))
    params.add(f"{prefix}.h1", _uniform(rng, dim, (dim, 2 * dim)))
    params.add(f"{prefix}.b1", np.zeros(2 * dim))
    params.add(f"{prefix}.h2", _uniform(rng, 2 * dim, (2 * dim, dim)))
    params.add(f"{prefix}.b2", np.zeros(dim))


def init_head(params: ParamSet, spec: HeadSpec, rng: np.random.Generator) -> None:
    """Register a head's parameters: projection, optional positions, two aggregators."""
    params.add(f"{spec.prefix}.proj", _uniform(rng, spec.d_in, (spec.d_in, spec.dim)))
    params.add(f"{spec.prefix}.proj_b", np.zeros(spec.dim))
    if spec.positional:
        params.add(f"{spec.prefix}.pos", np.zeros((spec.n_max, spec.dim)))
    init_aggregator(params, f"{spec.prefix}.mid", spec.dim, spec.n_slots, rng)
    init_aggregator(params, f"{spec.prefix}.glob", spec.dim, 1, rng)


def mlp(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.relu(ad.matmul(x, p[f"{prefix}.h1"]) + p[f"{prefix}.b1"])
    return ad.matmul(hidden, p[f"{prefix}.h2"]) + p[f"{prefix}.b2"]


def aggregate(
    x: Tensor, p: Mapping[str, Tensor], prefix: str, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Pool tokens ``x`` (..., n, D) into slots (..., m, D).

    Returns the pooled slots and the slot weights (..., m, n); each weight
    row sums to one over the valid tokens.
    """
    if x.shape[-2] == 0:
        raise EmptyInputError("aggregate needs at least one token")
    logits = ad.matmul(x, p[f"{prefix}.W"])  # (..., n, m)
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise EmptyInputError("every item needs at least one valid token")
        logits = logits + np.where(mask, 0.0, MASK_FILL)[..., None]
    weights = ad.swap_last(ad.softmax(logits, axis=-2))  # (..., m, n)
    return ad.matmul(weights, mlp(x, p, prefix)), weights


def encode(
    x_raw: np.ndarray,
    p: Mapping[str, Tensor],
    spec: HeadSpec,
    mask: np.ndarray | None = None,
    positions: np.ndarray | None = None,
) -> HierarchicalEmbedding:
    """Encode a padded batch ``x_raw`` (N, n, D_in) into a HierarchicalEmbedding.

    ``positions`` (N, n) selects positional rows per token; defaults to 0..n-1.
    """
    x_raw = np.asarray(x_raw, dtype=ad.DTYPE)
    if x_raw.ndim == 2:
        x_raw = x_raw[None]
    n_items, n, d_in = x_raw.shape
    if d_in != spec.d_in:
        raise ShapeError(f"{spec.prefix}: input dim {d_in} does not match projection input {spec.d_in}")
    if mask is None:
        mask = np.ones((n_items, n), dtype=bool)
    tokens = ad.matmul(Tensor(x_raw), p[f"{spec.prefix}.proj"]) + p[f"{spec.prefix}.proj_b"]
    if spec.positional:
        if positions is None:
            if n > spec.n_max:
                raise ShapeError(f"{spec.prefix}: {n} tokens exceed positional table of {spec.n_max}")
            pos = ad.take(p[f"{spec.prefix}.pos"], slice(0, n))
        else:
            positions = np.asarray(positions)
            if positions.size and positions.max() >= spec.n_max:
                raise ShapeError(f"{spec.prefix}: position {positions.max()} outside table of {spec.n_max}")
            pos = ad.take(p[f"{spec.prefix}.pos"], positions)
        tokens = tokens + pos
    mid, weights = aggregate(tokens, p, f"{spec.prefix}.mid", mask)
    glob, _ = aggregate(mid, p, f"{spec.prefix}.glob")
    return HierarchicalEmbedding(
        tokens=tokens,
        mid=mid,
        glob=glob,
        mask=mask,
        tokens_n=ad.l2_normalize(tokens),
        mid_n=ad.l2_normalize(mid),
        glob_n=ad.l2_normalize(glob),
        mid_weights=weights,
    )
