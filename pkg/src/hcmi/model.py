"""Two-head retrieval model and its on-disk checkpoint format."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict
from pathlib import Path

import numpy as np

from hcmi.aggregator import HeadSpec, HierarchicalEmbedding, encode, init_head
from hcmi.autodiff import ParamSet, ShapeError, Tensor
from hcmi.config import ExperimentConfig, load_config
from hcmi.data import pad, read_blob, write_blob
from hcmi.interaction import GranularityWeights
from hcmi.objectives import ranking_matrix

LOGIT_SCALE = "logit_scale"


class HCMIModel:
    """Video and text heads sharing no parameters, plus an optional logit scale."""

    def __init__(self, params: ParamSet, video: HeadSpec, text: HeadSpec):
        self.params = params
        self.video = video
        self.text = text

    @classmethod
    def create(
        cls,
        d_in: int,
        dim: int,
        n_c: int,
        n_p: int,
        n_frames_max: int = 0,
        n_words_max: int = 0,
        temperature_learnable: bool = False,
        seed: int = 0,
    ) -> HCMIModel:
        rng = np.random.default_rng(seed)
        params = ParamSet()
        video = HeadSpec("video", d_in, dim, n_c, n_frames_max)
        text = HeadSpec("text", d_in, dim, n_p, n_words_max)
        init_head(params, video, rng)
        init_head(params, text, rng)
        if temperature_learnable:
            params.add(LOGIT_SCALE, np.zeros(()))
        return cls(params, video, text)

    @classmethod
    def from_config(cls, config: ExperimentConfig, d_in: int, n_frames_max: int, n_words_max: int) -> HCMIModel:
        return cls.create(
            d_in,
            config.dim,
            config.n_c,
            config.n_p,
            n_frames_max if config.positional else 0,
            n_words_max if config.positional else 0,
            config.temperature_learnable,
            config.seed,
        )

    def leaves(self) -> dict[str, Tensor]:
        return self.params.leaves()

    def encode_videos(self, frames: Sequence[np.ndarray], leaves=None) -> HierarchicalEmbedding:
        x, mask = pad(frames)
        return encode(x, leaves or self._frozen(), self.video, mask)

    def encode_texts(self, words: Sequence[np.ndarray], leaves=None) -> HierarchicalEmbedding:
        x, mask = pad(words)
        return encode(x, leaves or self._frozen(), self.text, mask)

    def _frozen(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.values.items()}

    def round_to_storage(self) -> None:
        """Round every parameter to float32 so memory matches a saved checkpoint."""
        for name in self.params:
            self.params.values[name] = self.params[name].astype(np.float32).astype(np.float64)


def score_items(
    model: HCMIModel,
    frames: Sequence[np.ndarray],
    words: Sequence[np.ndarray],
    variant: str = "hci",
    w: GranularityWeights = GranularityWeights(),
    chunk: int = 16,
) -> np.ndarray:
    """Text x video score matrix for evaluation, computed in row chunks."""
    videos = model.encode_videos(frames)
    rows = []
    for start in range(0, len(words), chunk):
        texts = model.encode_texts(words[start : start + chunk])
        rows.append(ranking_matrix(videos, texts, variant, w).array)
    return np.concatenate(rows, axis=0)


# -- checkpoint -----------------------------------------------------------------

PARAMS_FILE = "params.json"
CONFIG_FILE = "config.txt"


def _blob_shape(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return int(np.prod(shape[:-1])), shape[-1]


def save_checkpoint(model: HCMIModel, config: ExperimentConfig | None, path) -> Path:
    """Write one blob per parameter, a JSON parameter manifest and the config."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in model.params:
        value = model.params[name]
        blob = f"params/{name}.hcmb"
        write_blob(value.reshape(_blob_shape(value.shape)), root / blob)
        entries.append({"name": name, "shape": list(value.shape), "blob": blob, "trainable": model.params.trainable[name]})
    doc = {"video": asdict(model.video), "text": asdict(model.text), "params": entries}
    (root / PARAMS_FILE).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if config is not None:
        config.save(root / CONFIG_FILE)
    return root


def load_checkpoint(path) -> tuple[HCMIModel, ExperimentConfig | None]:
    root = Path(path)
    doc = json.loads((root / PARAMS_FILE).read_text(encoding="utf-8"))
    params = ParamSet()
    for e in doc["params"]:
        value = read_blob(root / e["blob"]).astype(np.float64)
        shape = tuple(e["shape"])
        if value.size != int(np.prod(shape)):
            raise ShapeError(f"checkpoint parameter {e['name']}: blob has {value.size} values, shape {shape}")
        params.add(e["name"], value.reshape(shape), trainable=e["trainable"])
    model = HCMIModel(params, HeadSpec(**doc["video"]), HeadSpec(**doc["text"]))
    config = load_config(root / CONFIG_FILE) if (root / CONFIG_FILE).exists() else None
    return model, config

