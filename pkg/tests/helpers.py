"""Builders for hand-made hierarchical embeddings."""

import numpy as np

from hcmi.aggregator import HierarchicalEmbedding
from hcmi.autodiff import Tensor


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def embedding(tokens, mid, glob):
    """Batched HierarchicalEmbedding from lists of already-normalized arrays."""
    n = max(len(t) for t in tokens)
    x = np.zeros((len(tokens), n, tokens[0].shape[1]))
    mask = np.zeros((len(tokens), n), dtype=bool)
    for k, t in enumerate(tokens):
        x[k, : len(t)] = t
        mask[k, : len(t)] = True
    tok, mi, gl = Tensor(x), Tensor(np.stack(mid)), Tensor(np.stack(glob))
    return HierarchicalEmbedding(tok, mi, gl, mask, tok, mi, gl)


def random_embedding(rng, count, n_tokens=(1, 5), m=3, d=4):
    tokens = [unit_rows(rng, rng.integers(*n_tokens, endpoint=True), d) for _ in range(count)]
    mid = [unit_rows(rng, m, d) for _ in range(count)]
    glob = [unit_rows(rng, 1, d) for _ in range(count)]
    return embedding(tokens, mid, glob), tokens, mid, glob
