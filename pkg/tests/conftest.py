import pytest

from hcmi.data import FeatureStore, SyntheticSpec, generate_synthetic

TINY = SyntheticSpec(n_pairs=12, dim=8, n_frames=6, n_words=5, n_concepts=2, noise_sigma=0.1, distractor_count=2, seed=3, n_test_pairs=6)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic(TINY, out)
    return out


@pytest.fixture(scope="session")
def tiny_store(tiny_dir):
    from hcmi.data import load_manifest

    return FeatureStore(load_manifest(tiny_dir / "train.json"))
