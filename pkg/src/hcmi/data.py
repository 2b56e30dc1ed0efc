"""Feature blobs, manifests, synthetic data with planted concepts, and batching.

Blob layout (all little-endian)::

    offset 0   4 bytes  magic b"HCMB"
    offset 4   u32      version (= 1)
    offset 8   u32      rows
    offset 12  u32      cols
    offset 16  f32[rows * cols]  row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hcmi.denoise import ViewPair, sample_views

MAGIC = b"HCMB"
VERSION = 1
HEADER = struct.Struct("<4sIII")
U32_MAX = 2**32 - 1


class BlobError(ValueError):
    """Base class for malformed feature blobs."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: at byte {offset}: {message}")
        self.path = path
        self.offset = offset


class BlobMagicError(BlobError):
    pass


class BlobVersionError(BlobError):
    pass


class BlobLengthError(BlobError):
    pass


class ManifestError(ValueError):
    pass


def write_blob(matrix, path) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"blob payload must be a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    if rows > U32_MAX or cols > U32_MAX:
        raise ValueError(f"shape {m.shape} does not fit in u32")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    Path(path).write_bytes(HEADER.pack(MAGIC, VERSION, rows, cols) + payload)


def read_blob_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    return _parse_header(path, head)[:2]


def _parse_header(path, raw: bytes) -> tuple[int, int, int]:
    if len(raw) < HEADER.size:
        raise BlobLengthError(path, len(raw), f"truncated header: {len(raw)} of {HEADER.size} bytes")
    magic, version, rows, cols = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BlobMagicError(path, 0, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BlobVersionError(path, 4, f"unsupported version {version}, expected {VERSION}")
    expected = HEADER.size + 4 * rows * cols
    if len(raw) > HEADER.size and len(raw) != expected:
        raise BlobLengthError(
            path, len(raw), f"file is {len(raw)} bytes but header {rows}x{cols} needs {expected}"
        )
    return rows, cols, expected


def read_blob(path) -> np.ndarray:
    """Read a blob as float32 (rows, cols); validates magic, version and length."""
    raw = Path(path).read_bytes()
    rows, cols, expected = _parse_header(path, raw)
    if len(raw) != expected:
        raise BlobLengthError(path, len(raw), f"file is {len(raw)} bytes but header {rows}x{cols} needs {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(rows, cols).astype(np.float32)


# -- manifest -----------------------------------------------------------------


@dataclass
class SampleRecord:
    id: str
    video_blob: str
    text_blob: str
    n_frames: int
    n_words: int
    dim: int


@dataclass
class Manifest:
    """Sample records plus the dataset dim; blob paths resolve against ``root``."""

    dim: int
    samples: list[SampleRecord]
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def record(self, sample_id: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(f"no sample with id {sample_id!r}")

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def to_json(self) -> str:
        return json.dumps({"dim": self.dim, "samples": [asdict(s) for s in self.samples]}, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def validate(self) -> None:
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.dim != self.dim:
                raise ManifestError(f"sample {s.id!r}: dim {s.dim} differs from dataset dim {self.dim}")
            for kind, rel, n in (("video_blob", s.video_blob, s.n_frames), ("text_blob", s.text_blob, s.n_words)):
                if n < 1:
                    raise ManifestError(f"sample {s.id!r}: {kind} must hold at least one token")
                path = self.resolve(rel)
                if not path.is_file():
                    raise ManifestError(f"sample {s.id!r}: {kind} {rel!r} does not exist")
                shape = read_blob_header(path)
                if shape != (n, s.dim):
                    raise ManifestError(f"sample {s.id!r}: {kind} header {shape} != declared {(n, s.dim)}")


_RECORD_FIELDS = {"id": str, "video_blob": str, "text_blob": str, "n_frames": int, "n_words": int, "dim": int}


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "dim" not in doc or "samples" not in doc:
        raise ManifestError(f"{path}: manifest needs 'dim' and 'samples'")
    if not isinstance(doc["dim"], int) or doc["dim"] < 1:
        raise ManifestError(f"{path}: 'dim' must be a positive integer")
    records = []
    for k, rec in enumerate(doc["samples"]):
        if not isinstance(rec, dict):
            raise ManifestError(f"{path}: sample {k} is not an object")
        missing = set(_RECORD_FIELDS) - set(rec)
        extra = set(rec) - set(_RECORD_FIELDS)
        if missing or extra:
            raise ManifestError(f"{path}: sample {k}: missing {sorted(missing)} unexpected {sorted(extra)}")
        for key, typ in _RECORD_FIELDS.items():
            if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
                raise ManifestError(f"{path}: sample {k}: field {key!r} must be {typ.__name__}")
        records.append(SampleRecord(**rec))
    manifest = Manifest(doc["dim"], records, root=path.parent)
    manifest.validate()
    return manifest


class FeatureStore:
    """All features of a manifest, widened to float64 in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.videos: dict[str, np.ndarray] = {}
        self.texts: dict[str, np.ndarray] = {}
        for s in manifest.samples:
            self.videos[s.id] = read_blob(manifest.resolve(s.video_blob)).astype(np.float64)
            self.texts[s.id] = read_blob(manifest.resolve(s.text_blob)).astype(np.float64)

    @property
    def ids(self) -> list[str]:
        return self.manifest.ids

    def padded(self, ids, modality: str) -> tuple[np.ndarray, np.ndarray]:
        table = self.videos if modality == "video" else self.texts
        return pad([table[i] for i in ids])


def pad(items) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (n_i, D) matrices into (N, max n, D) plus a validity mask."""
    n = max(x.shape[0] for x in items)
    out = np.zeros((len(items), n, items[0].shape[1]))
    mask = np.zeros((len(items), n), dtype=bool)
    for k, x in enumerate(items):
        out[k, : x.shape[0]] = x
        mask[k, : x.shape[0]] = True
    return out, mask


# -- synthetic data -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_pairs: int = 64
    dim: int = 32
    n_frames: int = 12
    n_words: int = 8
    n_concepts: int = 3
    noise_sigma: float = 0.1
    distractor_count: int = 3
    seed: int = 0
    n_test_pairs: int = 32

    def validate(self) -> None:
        if self.n_concepts < 1 or self.n_concepts > min(self.n_frames, self.n_words - self.distractor_count):
            raise ValueError(
                f"n_concepts={self.n_concepts} must be in [1, min(n_frames, n_words - distractor_count)]"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_pairs < 0 or self.n_test_pairs < 0 or self.distractor_count < 0:
            raise ValueError("pair and distractor counts must be >= 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


def _unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _make_pair(spec: SyntheticSpec, rng: np.random.Generator, pool: np.ndarray):
    concepts = _unit(rng, spec.n_concepts, spec.dim)
    segments = np.array_split(np.arange(spec.n_frames), spec.n_concepts)
    frame_concepts = np.concatenate([np.full(len(seg), c) for c, seg in enumerate(segments)])
    frames = concepts[frame_concepts] + spec.noise_sigma * rng.normal(size=(spec.n_frames, spec.dim))

    n_concept_words = spec.n_words - spec.distractor_count
    slots = np.sort(rng.choice(spec.n_words, size=spec.distractor_count, replace=False))
    word_concepts = np.full(spec.n_words, -1)
    word_concepts[np.setdiff1d(np.arange(spec.n_words), slots)] = np.arange(n_concept_words) % spec.n_concepts
    words = np.empty((spec.n_words, spec.dim))
    is_concept = word_concepts >= 0
    words[is_concept] = concepts[word_concepts[is_concept]]
    words[~is_concept] = pool[: spec.distractor_count]
    words += spec.noise_sigma * rng.normal(size=words.shape)
    return frames, words, frame_concepts, word_concepts


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, Manifest]:
    """Write a train/test split of synthetic video-caption pairs under ``out_dir``.

    Each pair draws its own unit concept vectors. Frames cover the concepts in
    contiguous segments; caption words repeat the concepts and are interleaved
    with distractor tokens from one pool shared by every caption. Returns the
    manifests keyed by split (``train``, and ``test`` when requested); each
    split also gets an ``<split>_alignment.json`` sidecar with the planted
    frame->concept and word->concept labels (-1 marks a distractor word).
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "blobs").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    pool = _unit(rng, spec.distractor_count, spec.dim)
    manifests = {}
    splits = [("train", spec.n_pairs), ("test", spec.n_test_pairs)]
    for split, count in splits:
        if split == "test" and count == 0:
            continue
        records, alignment = [], {}
        for k in range(count):
            sid = f"{split}{k:05d}"
            frames, words, fc, wc = _make_pair(spec, rng, pool)
            write_blob(frames, out / "blobs" / f"{sid}_video.hcmb")
            write_blob(words, out / "blobs" / f"{sid}_text.hcmb")
            records.append(
                SampleRecord(sid, f"blobs/{sid}_video.hcmb", f"blobs/{sid}_text.hcmb", spec.n_frames, spec.n_words, spec.dim)
            )
            alignment[sid] = {"frame_concepts": fc.tolist(), "word_concepts": wc.tolist()}
        manifest = Manifest(spec.dim, records, root=out)
        manifest.save(out / f"{split}.json")
        (out / f"{split}_alignment.json").write_text(json.dumps(alignment, indent=1) + "\n", encoding="utf-8")
        manifests[split] = manifest
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n", encoding="utf-8")
    return manifests


def load_synthetic_spec(path) -> SyntheticSpec:
    """Read a SyntheticSpec from JSON or ``key = value`` lines."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                doc[key.strip()] = value.strip()
    defaults = asdict(SyntheticSpec())
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ValueError(f"unknown synthetic spec key(s): {sorted(unknown)}")
    kwargs = {k: type(defaults[k])(v) for k, v in doc.items()}
    return SyntheticSpec(**kwargs)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    views: list[ViewPair]


def make_batches(manifest: Manifest, batch_size: int, seed: int, epoch: int = 0) -> list[Batch]:
    """One epoch of shuffled full batches; leftover samples are dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if len(manifest) < 2:
        raise ValueError(f"dataset has {len(manifest)} samples; at least 2 are required")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(manifest))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        chunk = order[start : start + batch_size]
        ids = [manifest.samples[i].id for i in chunk]
        views = [sample_views(manifest.samples[i].n_frames, rng) for i in chunk]
        batches.append(Batch(ids, views))
    return batches
