import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import unit_rows
from hcmi.config import ExperimentConfig
from hcmi.data import make_batches
from hcmi.denoise import build_positive_sets, denoised_labels, sample_views, view_globals
from hcmi.objectives import BatchLabels, LossWeights, loss_hci
from hcmi.training import build_model, training_step_loss


class TestViews:
    def test_single_frame(self):
        a, b = sample_views(1, 0)
        assert a.tolist() == [0] and b.tolist() == [0]

    def test_twelve_frames(self):
        a, b = sample_views(12, 5)
        assert len(a) == len(b) == 6
        assert len(set(a.tolist())) == 6 and len(set(b.tolist())) == 6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 10_000))
    def test_sorted_subsets_of_half_size(self, n, seed):
        for view in sample_views(n, seed):
            assert len(view) == -(-n // 2)
            assert np.all(np.diff(view) > 0)
            assert view.min() >= 0 and view.max() < n

    def test_deterministic(self):
        a = sample_views(12, 7)
        b = sample_views(12, 7)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_zero_frames(self):
        with pytest.raises(ValueError):
            sample_views(0, 0)


class TestPositiveSets:
    def test_duplicate_video_is_mutual(self):
        rng = np.random.default_rng(0)
        v1 = unit_rows(rng, 4, 6)
        v2 = unit_rows(rng, 4, 6)
        v1[3], v2[3] = v1[1], v2[1]
        labels = build_positive_sets(v1, v2)
        assert labels.pos[1, 3] and labels.pos[3, 1]

    def test_orthogonal_views_give_identity(self):
        v = np.eye(4)
        assert build_positive_sets(v, v) == BatchLabels.identity(4)

    def test_threshold_is_inclusive(self):
        v1 = np.array([[1.0, 0.0], [0.6, 0.8]])
        v2 = np.array([[0.6, 0.8], [0.6, 0.8]])
        # cos(v1_0, v1_1) = 0.6 == cos(v1_0, v2_0): joins; the reverse needs 0.6 >= 1.0
        labels = build_positive_sets(v1, v2)
        assert labels.pos_sets() == [{0, 1}, {1}]
        assert build_positive_sets(v1, v2, symmetric=True).pos_sets() == [{0, 1}, {0, 1}]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        base = unit_rows(rng, 5, 3)
        v1 = base + 0.4 * rng.normal(size=base.shape)
        v2 = base + 0.4 * rng.normal(size=base.shape)
        v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
        v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
        assert build_positive_sets(v1, v2).pos_sets() == oracles.positive_sets(v1.tolist(), v2.tolist())

    def test_non_unit_rows_rejected(self):
        with pytest.raises(ValueError):
            build_positive_sets(np.ones((2, 2)), np.eye(2))


class TestInTraining:
    def config(self, **kw):
        base = dict(dim=8, n_c=2, n_p=2, batch_size=4, steps=1, seed=1)
        base.update(kw)
        return ExperimentConfig(train_manifest="unused", test_manifest="unused", **base)

    def test_disabled_equals_identity_formula(self, tiny_store):
        config = self.config(denoise=False, mse=False)
        model = build_model(config, tiny_store)
        batch = make_batches(tiny_store.manifest, 4, 1)[0]
        leaves = model.leaves()
        terms, labels = training_step_loss(model, config, tiny_store, batch, leaves)
        assert labels == BatchLabels.identity(4)
        videos = model.encode_videos([tiny_store.videos[i] for i in batch.ids], leaves)
        texts = model.encode_texts([tiny_store.texts[i] for i in batch.ids], leaves)
        expected = loss_hci(videos, texts, BatchLabels.identity(4), LossWeights())
        assert abs(terms.total.item() - expected.item()) <= 1e-12

    def test_labels_are_detached_and_contain_self(self, tiny_store):
        config = self.config()
        model = build_model(config, tiny_store)
        batch = make_batches(tiny_store.manifest, 4, 1)[0]
        frames = [tiny_store.videos[i] for i in batch.ids]
        v1, v2 = view_globals(frames, batch.views, model.params.values, model.video)
        assert isinstance(v1, np.ndarray) and isinstance(v2, np.ndarray)
        labels = denoised_labels(frames, batch.views, model.params.values, model.video)
        assert np.all(np.diag(labels.pos))
