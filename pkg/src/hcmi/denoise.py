"""Adaptive label denoising via two random frame views per video."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

from hcmi.aggregator import HeadSpec, encode
from hcmi.autodiff import Tensor
from hcmi.objectives import BatchLabels

UNIT_TOL = 1e-6

ViewPair = tuple[np.ndarray, np.ndarray]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def view_size(n_frames: int) -> int:
    return math.ceil(n_frames / 2)


def sample_views(n_frames: int, seed) -> ViewPair:
    """Two independent without-replacement subsets of ceil(n/2) frame indices.

    Indices are returned sorted so each view keeps the original frame order.
    """
    if n_frames < 1:
        raise ValueError(f"need at least one frame, got {n_frames}")
    rng = _rng(seed)
    k = view_size(n_frames)
    first = np.sort(rng.choice(n_frames, size=k, replace=False))
    second = np.sort(rng.choice(n_frames, size=k, replace=False))
    return first, second


def _check_unit(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    if not np.allclose(norms, 1.0, atol=UNIT_TOL):
        raise ValueError(f"{name} rows must be unit length (max deviation {np.abs(norms - 1).max():.3g})")


def build_positive_sets(view1: np.ndarray, view2: np.ndarray, symmetric: bool = False) -> BatchLabels:
    """Pair j joins pos_i when cos(v_i^1, v_j^1) >= cos(v_i^1, v_i^2).

    Inputs are (N, D) unit rows: the global embeddings of view 1 and view 2.
    The relation is directional unless ``symmetric`` is set, in which case
    it is closed under swapping i and j.
    """
    view1 = np.asarray(view1, dtype=float)
    view2 = np.asarray(view2, dtype=float)
    if view1.shape != view2.shape or view1.ndim != 2:
        raise ValueError(f"view embeddings must share an (N, D) shape, got {view1.shape} and {view2.shape}")
    _check_unit(view1, "view1")
    _check_unit(view2, "view2")
    cross = np.sum(view1[:, None, :] * view1[None, :, :], axis=-1)
    self_sim = np.sum(view1 * view2, axis=-1)
    pos = cross >= self_sim[:, None]
    np.fill_diagonal(pos, True)
    if symmetric:
        pos = pos | pos.T
    return BatchLabels(pos)


def view_globals(
    frames: Sequence[np.ndarray],
    plans: Sequence[ViewPair],
    params: Mapping[str, Tensor | np.ndarray],
    spec: HeadSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized global embeddings of both views of every video, detached.

    Positional rows follow each frame's original index.
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    out = []
    for which in (0, 1):
        idx = [plan[which] for plan in plans]
        n = max(len(i) for i in idx)
        x = np.zeros((len(frames), n, spec.d_in))
        mask = np.zeros((len(frames), n), dtype=bool)
        pos = np.zeros((len(frames), n), dtype=int)
        for b, (f, i) in enumerate(zip(frames, idx)):
            x[b, : len(i)] = f[i]
            mask[b, : len(i)] = True
            pos[b, : len(i)] = i
        emb = encode(x, p, spec, mask=mask, positions=pos if spec.positional else None)
        out.append(np.array(emb.glob_n.data[:, 0, :]))
    return out[0], out[1]


def denoised_labels(frames, plans, params, spec: HeadSpec, symmetric: bool = False) -> BatchLabels:
    v1, v2 = view_globals(frames, plans, params, spec)
    return build_positive_sets(v1, v2, symmetric=symmetric)
