import csv
import json

import numpy as np
import pytest

from helpers import embedding
from hcmi import autodiff as ad
from hcmi.cli import main
from hcmi.config import ExperimentConfig
from hcmi.data import FeatureStore, SyntheticSpec, generate_synthetic, load_manifest
from hcmi.evaluation import matching_dump
from hcmi.model import load_checkpoint, save_checkpoint
from hcmi.training import (
    ABLATION_FIELDS,
    GRADCHECK_LOSSES,
    TrainingError,
    ablate,
    eval_scores,
    evaluate,
    run_gradcheck,
    train,
)


def small_config(tiny_dir, **kw):
    base = dict(
        train_manifest=str(tiny_dir / "train.json"),
        test_manifest=str(tiny_dir / "test.json"),
        dim=8,
        n_c=2,
        n_p=2,
        batch_size=4,
        steps=6,
        seed=0,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def trained(tiny_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = small_config(tiny_dir, out_dir=str(out), temperature_learnable=True)
    return train(config), config, out


class TestTrain:
    def test_writes_log_and_checkpoint(self, trained):
        result, _, out = trained
        rows = list(csv.DictReader(open(out / "train_log.csv")))
        assert list(rows[0]) == ["step", "loss", "loss_hci", "loss_hsm"]
        assert [int(r["step"]) for r in rows] == list(range(6))
        assert (out / "checkpoint" / "params.json").is_file()
        assert result.checkpoint == out / "checkpoint"

    def test_bit_identical_reruns(self, tiny_dir, tmp_path):
        for name in ("a", "b"):
            train(small_config(tiny_dir, out_dir=str(tmp_path / name)))
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()

    def test_seed_changes_run(self, tiny_dir):
        a = train(small_config(tiny_dir, steps=2), save=False).log
        b = train(small_config(tiny_dir, steps=2, seed=1), save=False).log
        assert a != b

    def test_noiseless_loss_decreases(self, tmp_path):
        spec = SyntheticSpec(n_pairs=8, dim=8, n_frames=6, n_words=6, n_concepts=2, noise_sigma=0.0, distractor_count=2, seed=1, n_test_pairs=0)
        store = FeatureStore(generate_synthetic(spec, tmp_path)["train"])
        config = ExperimentConfig(dim=8, n_c=2, n_p=2, batch_size=4, steps=200, learning_rate=1e-2)
        log = train(config, store, save=False).log
        first = np.mean([r["loss"] for r in log[:10]])
        last = np.mean([r["loss"] for r in log[-10:]])
        assert last < 0.75 * first

    def test_hsm_zero_when_disabled(self, tiny_dir):
        log = train(small_config(tiny_dir, steps=2, mse=False), save=False).log
        assert all(r["loss_hsm"] == 0.0 and r["loss"] == r["loss_hci"] for r in log)

    def test_too_few_samples_for_batch(self, tiny_dir):
        with pytest.raises(TrainingError):
            train(small_config(tiny_dir, batch_size=64), save=False)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, trained, tmp_path):
        result, config, out = trained
        model, loaded_config = load_checkpoint(out / "checkpoint")
        assert loaded_config == config
        assert set(model.params.values) == set(result.model.params.values)
        for name, value in result.model.params.values.items():
            assert model.params[name].tobytes() == value.tobytes(), name
            assert model.params.trainable[name] == result.model.params.trainable[name]
        save_checkpoint(model, loaded_config, tmp_path / "again")
        for blob in sorted((out / "checkpoint" / "params").iterdir()):
            assert (tmp_path / "again" / "params" / blob.name).read_bytes() == blob.read_bytes()

    def test_evaluation_identical_after_reload(self, trained, tiny_dir):
        result, config, out = trained
        model, _ = load_checkpoint(out / "checkpoint")
        store = FeatureStore(load_manifest(tiny_dir / "test.json"))
        assert np.array_equal(eval_scores(result.model, store, config), eval_scores(model, store, config))

    def test_dim_mismatch(self, trained, tmp_path):
        result, config, _ = trained
        spec = SyntheticSpec(n_pairs=2, dim=5, n_frames=3, n_words=3, n_concepts=1, distractor_count=1, n_test_pairs=0)
        manifest = generate_synthetic(spec, tmp_path)["train"]
        with pytest.raises(ad.ShapeError):
            evaluate(result.model, manifest, config)


class TestAblation:
    def test_rows_share_config(self, tiny_dir, tmp_path):
        config = small_config(tiny_dir, steps=2)
        conds = ["gdp", "hci", "hci+denoise+mse", "hci+denoise+mse+dsl"]
        rows = ablate(config, seeds=(0,), conditions=conds, out_path=tmp_path / "a.csv")
        assert [r["condition"] for r in rows] == conds
        assert len({r["shared_config"] for r in rows}) == 1
        with open(tmp_path / "a.csv") as fh:
            assert tuple(next(csv.reader(fh))) == ABLATION_FIELDS


class TestGradcheck:
    def test_all_losses_pass(self):
        rows = run_gradcheck(seeds=(0,))
        assert [r.loss for r in rows] == list(GRADCHECK_LOSSES)
        assert all(r.passed for r in rows), [(r.loss, r.max_rel_error) for r in rows]
        assert "logit_scale" in rows[0].params

    def test_corrupted_gradient_fails(self):
        def corrupt(kind, grads):
            name = sorted(grads)[0]
            grads[name] = grads[name] * 1.01
            return grads

        rows = run_gradcheck(seeds=(0,), losses=("gdp",), corrupt=corrupt)
        assert not rows[0].passed


class TestMatchingOnNoiselessData:
    def test_best_frames_share_planted_concept(self, tmp_path):
        spec = SyntheticSpec(n_pairs=4, dim=8, n_frames=6, n_words=6, n_concepts=3, noise_sigma=0.0, distractor_count=2, seed=2, n_test_pairs=0)
        store = FeatureStore(generate_synthetic(spec, tmp_path)["train"])
        alignment = json.loads((tmp_path / "train_alignment.json").read_text())

        def unit(x):
            return x / np.linalg.norm(x, axis=1, keepdims=True)

        for sid in store.ids:
            frames, words = unit(store.videos[sid]), unit(store.texts[sid])
            video = embedding([frames], [frames[:1]], [frames[:1]])
            text = embedding([words], [words[:1]], [words[:1]])
            video.mid_weights = ad.Tensor(np.full((1, 1, 6), 1 / 6))
            text.mid_weights = ad.Tensor(np.full((1, 1, 6), 1 / 6))
            dump = matching_dump(video, text)
            fc, wc = alignment[sid]["frame_concepts"], alignment[sid]["word_concepts"]
            for w, f in enumerate(dump.word_best_frame):
                if wc[w] >= 0:
                    assert fc[f] == wc[w]
                    assert dump.word_similarity[w] == pytest.approx(1.0, abs=1e-6)


class TestCli:
    def test_full_workflow(self, tmp_path, capsys):
        spec = tmp_path / "spec.txt"
        spec.write_text("n_pairs = 8\nn_test_pairs = 4\ndim = 8\nn_frames = 4\nn_words = 4\nn_concepts = 2\ndistractor_count = 1\n")
        assert main(["gen", str(spec), str(tmp_path / "data")]) == 0
        cfg = tmp_path / "exp.txt"
        cfg.write_text(
            "train_manifest = data/train.json\ntest_manifest = data/test.json\nout_dir = run\n"
            "dim = 8\nn_c = 2\nn_p = 2\nbatch_size = 4\nsteps = 3\n"
        )
        assert main(["train", str(cfg)]) == 0
        ckpt = tmp_path / "run" / "checkpoint"
        assert ckpt.is_dir()
        capsys.readouterr()
        assert main(["eval", str(ckpt), str(tmp_path / "data" / "test.json"), "--dsl", "--out", str(tmp_path / "r.csv")]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "direction,r1,r5,r10,mdr,mnr,tie_count"
        assert (tmp_path / "r.csv").read_text() == out
        assert main(["dump-matching", str(ckpt), str(tmp_path / "data" / "test.json"), "test00000", "--out-dir", str(tmp_path / "m")]) == 0
        assert (tmp_path / "m" / "test00000_clips.csv").is_file()
        assert main(["ablate", str(cfg), "--seeds", "1", "--out", str(tmp_path / "abl.csv")]) == 0
        assert len((tmp_path / "abl.csv").read_text().splitlines()) == 7

    def test_errors_are_one_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.txt"
        cfg.write_text("colour = red\n")
        assert main(["train", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and "ConfigError" in err and "key=colour" in err

    def test_gradcheck_exit_status(self, monkeypatch, capsys):
        import hcmi.cli as cli

        real = cli.run_gradcheck
        monkeypatch.setattr(cli, "run_gradcheck", lambda seeds: real(seeds=seeds, losses=("hsm",)))
        assert main(["gradcheck", "--seeds", "1"]) == 0
        assert "ok" in capsys.readouterr().out

        def broken(seeds):
            return real(seeds=seeds, losses=("hsm",), corrupt=lambda kind, g: {k: v + 1.0 for k, v in g.items()})

        monkeypatch.setattr(cli, "run_gradcheck", broken)
        assert main(["gradcheck", "--seeds", "1"]) == 1
        assert "FAIL" in capsys.readouterr().out
