"""Training loop, evaluation, the ablation sweep and the gradient-check suite."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hcmi import autodiff as ad
from hcmi.config import ExperimentConfig
from hcmi.data import FeatureStore, Manifest, load_manifest, make_batches
from hcmi.denoise import denoised_labels
from hcmi.evaluation import RetrievalReport, both_directions, dual_softmax
from hcmi.model import LOGIT_SCALE, HCMIModel, save_checkpoint, score_items
from hcmi.objectives import (
    BatchLabels,
    LossWeights,
    baseline_gdp,
    baseline_twi,
    loss_hci,
    loss_hsm,
    ranking_matrix,
    select_hardest,
    total_loss,
)
from hcmi.interaction import score_matrix

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "loss_hci", "loss_hsm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: HCMIModel
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _store(path_or_manifest) -> FeatureStore:
    manifest = path_or_manifest if isinstance(path_or_manifest, Manifest) else load_manifest(path_or_manifest)
    return FeatureStore(manifest)


def build_model(config: ExperimentConfig, store: FeatureStore) -> HCMIModel:
    m = store.manifest
    return HCMIModel.from_config(
        config,
        d_in=m.dim,
        n_frames_max=max(s.n_frames for s in m.samples),
        n_words_max=max(s.n_words for s in m.samples),
    )


def training_step_loss(model: HCMIModel, config: ExperimentConfig, store: FeatureStore, batch, leaves):
    """Forward pass for one batch; returns (LossTerms, labels)."""
    frames = [store.videos[i] for i in batch.ids]
    words = [store.texts[i] for i in batch.ids]
    if config.denoise:
        labels = denoised_labels(frames, batch.views, model.params.values, model.video, config.denoise_symmetric)
    else:
        labels = BatchLabels.identity(len(batch.ids))
    videos = model.encode_videos(frames, leaves)
    texts = model.encode_texts(words, leaves)
    terms = total_loss(
        videos, texts, labels, config.weights, config.loss_variant, config.mse, leaves.get(LOGIT_SCALE)
    )
    return terms, labels


def train(
    config: ExperimentConfig,
    train_data=None,
    out_dir=None,
    save: bool = True,
) -> TrainResult:
    """Adam on the configured objective for ``config.steps`` batches.

    Writes ``train_log.csv`` and a checkpoint under ``out_dir`` when ``save``.
    The final parameters are rounded to float32 so the in-memory model and the
    checkpoint evaluate identically.
    """
    store = train_data if isinstance(train_data, FeatureStore) else _store(train_data or config.train_manifest)
    model = build_model(config, store)
    optimizer = ad.Adam(model.params, lr=config.learning_rate)
    names = model.params.names(trainable_only=True)
    log = []
    step, epoch = 0, 0
    while step < config.steps:
        batches = make_batches(store.manifest, config.batch_size, config.seed, epoch)
        if not batches:
            raise TrainingError(f"no full batch of {config.batch_size} fits {len(store.manifest)} samples")
        for batch in batches:
            if step >= config.steps:
                break
            leaves = model.leaves()
            terms, _ = training_step_loss(model, config, store, batch, leaves)
            loss = terms.total.item()
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = ad.backward(terms.total, [leaves[n] for n in names])
            optimizer.step(dict(zip(names, grads)))
            log.append({"step": step, "loss": loss, "loss_hci": terms.hci.item(), "loss_hsm": terms.hsm.item()})
            step += 1
        epoch += 1
    model.round_to_storage()
    result = TrainResult(model, log)
    if save:
        out = Path(out_dir or config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(log, out / "train_log.csv")
        result.checkpoint = save_checkpoint(model, config, out / "checkpoint")
    return result


def write_log(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def eval_scores(model: HCMIModel, store: FeatureStore, config: ExperimentConfig, dsl: bool = False, gamma=None) -> np.ndarray:
    frames = [store.videos[i] for i in store.ids]
    words = [store.texts[i] for i in store.ids]
    scores = score_items(model, frames, words, config.loss_variant, config.weights.granularity)
    if dsl:
        scores = dual_softmax(scores, config.gamma if gamma is None else gamma)
    return scores


def evaluate(model: HCMIModel, data, config: ExperimentConfig, dsl: bool = False, gamma=None) -> list[RetrievalReport]:
    """Text->video and video->text reports for paired data (item i matches item i)."""
    store = data if isinstance(data, FeatureStore) else _store(data)
    if store.manifest.dim != model.video.d_in:
        raise ad.ShapeError(f"data dim {store.manifest.dim} does not match model input dim {model.video.d_in}")
    return both_directions(eval_scores(model, store, config, dsl, gamma))


# -- ablation -------------------------------------------------------------------

ABLATION_CONDITIONS = {
    "gdp": dict(loss_variant="gdp", denoise=False, mse=False, dsl=False),
    "twi": dict(loss_variant="twi", denoise=False, mse=False, dsl=False),
    "hci": dict(loss_variant="hci", denoise=False, mse=False, dsl=False),
    "hci+denoise": dict(loss_variant="hci", denoise=True, mse=False, dsl=False),
    "hci+denoise+mse": dict(loss_variant="hci", denoise=True, mse=True, dsl=False),
    "hci+denoise+mse+dsl": dict(loss_variant="hci", denoise=True, mse=True, dsl=True),
}
ABLATION_FIELDS = ("condition", "seed", "r1", "r5", "r10", "mdr", "mnr", "shared_config")


def shared_config_digest(config: ExperimentConfig) -> str:
    text = ";".join(f"{k}={v!r}" for k, v in config.shared_items())
    return hashlib.sha1(text.encode()).hexdigest()[:12]


def ablate(
    config: ExperimentConfig,
    seeds=(0, 1, 2),
    conditions=None,
    train_data=None,
    test_data=None,
    out_path=None,
) -> list[dict]:
    """Train every condition per seed on identical data and report test text->video metrics.

    The ``+dsl`` condition reuses the model of the condition without it, since
    dual softmax only changes inference.
    """
    conditions = list(conditions or ABLATION_CONDITIONS)
    train_store = train_data if isinstance(train_data, FeatureStore) else _store(train_data or config.train_manifest)
    test_store = test_data if isinstance(test_data, FeatureStore) else _store(test_data or config.test_manifest)
    rows = []
    for seed in seeds:
        trained: dict[tuple, HCMIModel] = {}
        for name in conditions:
            cond = config.replace(seed=seed, **ABLATION_CONDITIONS[name])
            key = (cond.loss_variant, cond.denoise, cond.mse)
            if key not in trained:
                logger.info("training %s seed=%d", name, seed)
                trained[key] = train(cond, train_store, save=False).model
            t2v = evaluate(trained[key], test_store, cond, dsl=cond.dsl)[0]
            rows.append(
                {
                    "condition": name,
                    "seed": seed,
                    "r1": t2v.r1,
                    "r5": t2v.r5,
                    "r10": t2v.r10,
                    "mdr": t2v.mdr,
                    "mnr": t2v.mnr,
                    "shared_config": shared_config_digest(cond.replace(seed=config.seed)),
                }
            )
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return rows


def mean_by_condition(rows, metric: str = "r1") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["condition"], []).append(float(r[metric]))
    return {k: float(np.mean(v)) for k, v in out.items()}


# -- gradient checks --------------------------------------------------------------

GRADCHECK_LOSSES = ("gdp", "twi", "hci", "hsm", "total")
GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5
KINK_GAP = 1e-3
# difference quotients in extended precision; analytic gradients stay float64
GRADCHECK_FD_DTYPE = np.longdouble


@dataclass
class MicroBatch:
    model: HCMIModel
    frames: np.ndarray
    words: np.ndarray
    labels: BatchLabels


def micro_batch(seed: int, n: int = 3, n_frames: int = 4, n_words: int = 3, dim: int = 4) -> MicroBatch:
    """Random well-conditioned micro-batch for finite-difference checks.

    Slot-logit matrices are N(0, 1), other weight matrices N(0, 1/fan_in) and
    vectors N(0, 1/4), so no softmax saturates and no gradient entry falls to
    the finite-difference noise floor.
    """
    rng = np.random.default_rng(seed)
    model = HCMIModel.create(dim, dim, 2, 2, n_frames, n_words, temperature_learnable=True, seed=seed)
    for name in model.params:
        shape = model.params[name].shape
        if name.endswith(".W"):
            model.params.set(name, rng.normal(size=shape))
        elif len(shape) == 2 and not name.endswith(".pos"):
            model.params.set(name, rng.normal(size=shape) / np.sqrt(shape[0]))
        else:
            model.params.set(name, 0.5 * rng.normal(size=shape))
    frames = rng.normal(size=(n, n_frames, dim))
    words = rng.normal(size=(n, n_words, dim))
    pos = np.eye(n, dtype=bool) | (rng.random((n, n)) < 0.25)
    return MicroBatch(model, frames, words, BatchLabels(pos))


def _kink_free_theta(mb: MicroBatch, w: LossWeights) -> float:
    """Nudge the margin until no hinge sits within KINK_GAP of its kink."""
    videos = mb.model.encode_videos(list(mb.frames))
    texts = mb.model.encode_texts(list(mb.words))
    g = score_matrix(videos, texts, "global").array
    by_text, by_video = select_hardest(ranking_matrix(videos, texts, "hci", w.granularity).array, mb.labels)
    idx = np.arange(len(g))
    gaps = np.concatenate([
        g[by_video[by_video >= 0], idx[by_video >= 0]] - np.diag(g)[by_video >= 0],
        g[idx[by_text >= 0], by_text[by_text >= 0]] - np.diag(g)[by_text >= 0],
    ])
    theta = w.theta
    while gaps.size and np.min(np.abs(gaps + theta)) < KINK_GAP:
        theta += KINK_GAP
    return theta


def gradcheck_loss_fn(kind: str, mb: MicroBatch, w: LossWeights = LossWeights()):
    """Loss closure over parameter leaves for one of ``GRADCHECK_LOSSES``."""
    if kind in ("hsm", "total"):
        w = LossWeights(w.alpha, w.beta, _kink_free_theta(mb, w), w.lam)
    model = mb.model

    def fn(leaves):
        videos = model.encode_videos(list(mb.frames), leaves)
        texts = model.encode_texts(list(mb.words), leaves)
        scale = leaves.get(LOGIT_SCALE)
        if kind == "gdp":
            return baseline_gdp(videos, texts, mb.labels, scale)
        if kind == "twi":
            return baseline_twi(videos, texts, mb.labels, scale)
        if kind == "hci":
            return loss_hci(videos, texts, mb.labels, w, scale)
        if kind == "hsm":
            hardest = select_hardest(ranking_matrix(videos, texts, "hci", w.granularity).array, mb.labels)
            return loss_hsm(score_matrix(videos, texts, "global").values, hardest, w.theta)
        if kind == "total":
            return total_loss(videos, texts, mb.labels, w, "hci", True, scale).total
        raise ValueError(f"unknown loss {kind!r}")

    return fn


@dataclass
class GradcheckRow:
    loss: str
    seed: int
    max_rel_error: float
    params: list[str]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOL


def run_gradcheck(seeds=(0, 1, 2), losses=GRADCHECK_LOSSES, corrupt=None) -> list[GradcheckRow]:
    """Finite-difference check of every loss; ``corrupt`` may rewrite analytic gradients."""
    rows = []
    for seed in seeds:
        mb = micro_batch(seed)
        for kind in losses:
            fn = gradcheck_loss_fn(kind, mb)
            _, analytic = ad.grad(fn, mb.model.params)
            if corrupt is not None:
                analytic = corrupt(kind, dict(analytic))
            err = ad.finite_diff_check(
                fn, mb.model.params, GRADCHECK_STEP, seed, analytic=analytic, fd_dtype=GRADCHECK_FD_DTYPE
            )
            rows.append(GradcheckRow(kind, seed, err, mb.model.params.names(trainable_only=True)))
    return rows


def format_gradcheck(rows) -> str:
    lines = ["loss,seed,max_rel_error,status"]
    for r in rows:
        lines.append(f"{r.loss},{r.seed},{r.max_rel_error:.3e},{'ok' if r.passed else 'FAIL'}")
    if rows:
        lines.append("# parameters: " + " ".join(rows[0].params))
    return "\n".join(lines) + "\n"
