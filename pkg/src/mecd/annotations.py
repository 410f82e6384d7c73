"""MECD-format annotations, MECDFEAT feature files, vocabulary and event masking.

Event indices in the public API are 1-based, as in the annotation files:
premises are ``1..N-1`` and ``N`` is the result event.
"""

from __future__ import annotations

import json
import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    EventIndexError,
    LengthMismatchError,
    SchemaError,
    TimestampRangeError,
    TruncatedFeatureError,
)

PAD, UNK, MASK, BOS, EOS = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<unk>", "<mask>", "<bos>", "<eos>")
MAX_CAPTION_LEN = 50
DEFAULT_VOCAB_CAP = 8192

FEATURE_MAGIC = b"MECDFEAT"
_HEADER = struct.Struct("<8sII")

# words after which the next token is taken as an object mention
DETERMINERS = frozenset(
    "the a an this that these those his her their its my your our some another each".split()
)


class DatasetWarning(UserWarning):
    """Dataset departs from the statistics of the real benchmark."""


@dataclass
class Event:
    video_feature: np.ndarray  # [T_frames, D_v] float32
    caption_tokens: np.ndarray  # [max_caption_len] int64


@dataclass
class VideoSample:
    video_id: str
    duration: float
    timestamps: list[tuple[float, float]]
    sentences: list[str]
    relation: list[int]
    cot: list[str] = field(default_factory=list)
    existence: list[str] = field(default_factory=list)
    # per-event frames, filled by attach_features(); not part of the annotation
    frames: list[np.ndarray] | None = field(default=None, compare=False, repr=False)

    @property
    def n_events(self) -> int:
        return len(self.sentences)

    def validate(self) -> None:
        n = len(self.sentences)
        if n < 2:
            raise LengthMismatchError(f"{self.video_id}: need at least 2 events, got {n}")
        if len(self.timestamps) != n:
            raise LengthMismatchError(
                f"{self.video_id}: {len(self.timestamps)} timestamps for {n} sentences"
            )
        if len(self.relation) != n - 1:
            raise LengthMismatchError(
                f"{self.video_id}: relation has length {len(self.relation)}, expected {n - 1}"
            )
        for name in ("cot", "existence"):
            extra = getattr(self, name)
            if extra and len(extra) != n - 1:
                raise LengthMismatchError(
                    f"{self.video_id}: {name} has length {len(extra)}, expected {n - 1}"
                )
        if any(r not in (0, 1) for r in self.relation):
            raise SchemaError(f"{self.video_id}: relation entries must be 0 or 1")
        if not self.duration > 0:
            raise TimestampRangeError(f"{self.video_id}: duration must be positive")
        prev = -np.inf
        for s, e in self.timestamps:
            if not (0 <= s < e <= self.duration):
                raise TimestampRangeError(
                    f"{self.video_id}: timestamp [{s}, {e}] outside [0, {self.duration}]"
                )
            if s < prev:
                raise TimestampRangeError(f"{self.video_id}: timestamp starts decrease")
            prev = s
        if self.frames is not None and len(self.frames) != n:
            raise LengthMismatchError(f"{self.video_id}: {len(self.frames)} frame blocks for {n} events")

    def to_json(self) -> dict:
        out = {
            "duration": self.duration,
            "timestamps": [[s, e] for s, e in self.timestamps],
            "sentences": list(self.sentences),
            "relation": list(self.relation),
        }
        if self.cot:
            out["cot"] = list(self.cot)
        if self.existence:
            out["existence"] = list(self.existence)
        return out


@dataclass
class MaskedView:
    base: VideoSample
    masked_index: int
    events: list[Event]


# ---------------------------------------------------------------------------
# annotation files
# ---------------------------------------------------------------------------

def _require(entry: dict, key: str, kind, video_id: str):
    if key not in entry:
        raise SchemaError(f"{video_id}: missing key {key!r}")
    value = entry[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"{video_id}: {key!r} has wrong type {type(value).__name__}")
    return value


def _string_list(entry: dict, key: str, video_id: str, optional=False) -> list[str]:
    if optional and key not in entry:
        return []
    value = _require(entry, key, list, video_id)
    if not all(isinstance(v, str) for v in value):
        raise SchemaError(f"{video_id}: {key!r} must be a list of strings")
    return list(value)


def sample_from_json(video_id: str, entry) -> VideoSample:
    if not isinstance(entry, dict):
        raise SchemaError(f"{video_id}: entry must be an object")
    duration = float(_require(entry, "duration", (int, float), video_id))
    raw_ts = _require(entry, "timestamps", list, video_id)
    timestamps = []
    for pair in raw_ts:
        if (
            not isinstance(pair, list)
            or len(pair) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair)
        ):
            raise SchemaError(f"{video_id}: timestamps must be [start, end] number pairs")
        timestamps.append((float(pair[0]), float(pair[1])))
    sentences = _string_list(entry, "sentences", video_id)
    relation = _require(entry, "relation", list, video_id)
    if not all(isinstance(r, int) and not isinstance(r, bool) for r in relation):
        raise SchemaError(f"{video_id}: relation must be a list of integers")
    sample = VideoSample(
        video_id=video_id,
        duration=duration,
        timestamps=timestamps,
        sentences=sentences,
        relation=list(relation),
        cot=_string_list(entry, "cot", video_id, optional=True),
        existence=_string_list(entry, "existence", video_id, optional=True),
    )
    sample.validate()
    return sample


def parse_dataset(path) -> list[VideoSample]:
    """Parse an annotation file, preserving the file's video order."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: top level must map video_id to annotation")
    samples = [sample_from_json(vid, entry) for vid, entry in data.items()]
    _warn_statistics(samples, path)
    return samples


def _warn_statistics(samples: Sequence[VideoSample], source) -> None:
    odd_len = sum(not 4 <= s.n_events <= 11 for s in samples)
    few_pos = sum(sum(s.relation) < 2 for s in samples)
    if odd_len or few_pos:
        warnings.warn(
            f"{source}: {odd_len} videos with N outside [4, 11], "
            f"{few_pos} videos with fewer than 2 causal premises",
            DatasetWarning,
            stacklevel=3,
        )


def serialize_dataset(samples: Iterable[VideoSample]) -> str:
    return json.dumps({s.video_id: s.to_json() for s in samples}, indent=1, ensure_ascii=False)


def write_dataset(samples: Iterable[VideoSample], path) -> None:
    Path(path).write_text(serialize_dataset(samples) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# MECDFEAT feature files
# ---------------------------------------------------------------------------

def encode_features(features: np.ndarray) -> bytes:
    arr = np.asarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    t, d = arr.shape
    return _HEADER.pack(FEATURE_MAGIC, t, d) + np.ascontiguousarray(arr).tobytes()


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TruncatedFeatureError("file shorter than the 16-byte header")
    magic, t, d = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"expected {FEATURE_MAGIC!r}, found {magic!r}")
    need = t * d * 4
    payload = blob[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedFeatureError(f"payload holds {len(payload) // 4} values, header says {t * d}")
    if len(payload) > need:
        raise SchemaError(f"{len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)


def load_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


def save_features(path, features: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(features))


def assign_frames(features: np.ndarray, timestamps, duration: float) -> list[np.ndarray]:
    """Split a [T, D] frame matrix into per-event blocks.

    Frame i sits at time ``i * duration / T`` and goes to the earliest event
    whose half-open interval [start, end) contains it. Frames outside every
    interval are dropped.
    """
    owner = frame_owners(features.shape[0], timestamps, duration)
    return [features[owner == idx] for idx in range(len(timestamps))]


def frame_owners(t: int, timestamps, duration: float) -> np.ndarray:
    """Event index owning each of ``t`` frames, -1 for unowned frames."""
    times = np.arange(t) * (duration / t) if t else np.zeros(0)
    owner = np.full(t, -1)
    for idx, (start, end) in enumerate(timestamps):
        hit = (owner < 0) & (times >= start) & (times < end)
        owner[hit] = idx
    return owner


# ---------------------------------------------------------------------------
# vocabulary and tokenization
# ---------------------------------------------------------------------------

_STRIP = re.compile(r"^\W+|\W+$")


def words(text: str) -> list[str]:
    out = []
    for tok in text.lower().split():
        if tok in RESERVED:
            out.append(tok)
            continue
        tok = _STRIP.sub("", tok)
        if tok:
            out.append(tok)
    return out


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @classmethod
    def build(cls, texts: Iterable[str], cap: int = DEFAULT_VOCAB_CAP) -> "Vocabulary":
        counts = Counter(w for text in texts for w in words(text))
        # frequency order, alphabetical among ties
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[: max(cap - len(RESERVED), 0)])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    def encode(self, text: str, max_len: int = MAX_CAPTION_LEN) -> np.ndarray:
        ids = [self.stoi.get(w, UNK) for w in words(text)][:max_len]
        ids += [PAD] * (max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_CAPTION_LEN) -> np.ndarray:
    return vocab.encode(text, max_len)


def vocabulary_texts(samples: Iterable[VideoSample]) -> list[str]:
    """Captions plus auxiliary texts (stored or fallback) of every sample."""
    texts = []
    for s in samples:
        texts.extend(s.sentences)
        for k in range(1, s.n_events):
            texts.append(auxiliary_text(s, k, "cot"))
            texts.append(auxiliary_text(s, k, "existence"))
    return texts


# ---------------------------------------------------------------------------
# events, masking, auxiliary texts
# ---------------------------------------------------------------------------

def _check_premise(sample: VideoSample, k: int) -> None:
    if not 1 <= k <= sample.n_events - 1:
        raise EventIndexError(
            f"{sample.video_id}: premise index {k} outside [1, {sample.n_events - 1}]"
        )


def attach_features(sample: VideoSample, features: np.ndarray) -> VideoSample:
    return replace(sample, frames=assign_frames(features, sample.timestamps, sample.duration))


def build_events(sample: VideoSample, vocab: Vocabulary, max_len: int = MAX_CAPTION_LEN) -> list[Event]:
    if sample.frames is None:
        raise SchemaError(f"{sample.video_id}: no features attached")
    return [
        Event(frames, vocab.encode(text, max_len))
        for frames, text in zip(sample.frames, sample.sentences)
    ]


def masked_event(like: Event) -> Event:
    return Event(
        np.zeros_like(like.video_feature),
        np.full_like(like.caption_tokens, MASK),
    )


def mask_event(sample: VideoSample, k: int, vocab: Vocabulary, max_len: int = MAX_CAPTION_LEN) -> MaskedView:
    """Zero premise ``k``'s frames and replace its caption with MASK tokens."""
    _check_premise(sample, k)
    events = build_events(sample, vocab, max_len)
    events[k - 1] = masked_event(events[k - 1])
    return MaskedView(sample, k, events)


def existence_fallback(sentence: str) -> str:
    objects = []
    toks = words(sentence)
    for prev, tok in zip(toks, toks[1:]):
        if prev in DETERMINERS and tok not in DETERMINERS and tok not in objects:
            objects.append(tok)
    if not objects:
        return "There are no objects."
    return "There are objects " + ", ".join(objects) + "."


def cot_fallback(sample: VideoSample, k: int) -> str:
    prev = sample.sentences[max(k - 2, 0)].strip()
    return f"Because {prev} therefore {sample.sentences[-1].strip()}"


def auxiliary_text(sample: VideoSample, k: int, kind: str) -> str:
    """Chain-of-thought or existence-only text for premise ``k``."""
    _check_premise(sample, k)
    if kind == "cot":
        stored, fallback = sample.cot, lambda: cot_fallback(sample, k)
    elif kind == "existence":
        stored, fallback = sample.existence, lambda: existence_fallback(sample.sentences[k - 1])
    else:
        raise ValueError(f"unknown auxiliary text kind {kind!r}")
    if stored and stored[k - 1]:
        return stored[k - 1]
    return fallback()


def truncate(sample: VideoSample, j: int, relation: Sequence[int] | None = None) -> VideoSample:
    """Keep events 1..j, making event j the result.

    Stored chains of thought end at the old result event and are dropped;
    ``relation`` supplies the labels of the new result when known, else zeros.
    """
    if not 2 <= j <= sample.n_events:
        raise EventIndexError(f"{sample.video_id}: cannot truncate to {j} events")
    if j == sample.n_events:
        return sample
    rel = list(relation) if relation is not None else [0] * (j - 1)
    return VideoSample(
        video_id=sample.video_id,
        duration=sample.duration,
        timestamps=sample.timestamps[:j],
        sentences=sample.sentences[:j],
        relation=rel,
        cot=[],
        existence=sample.existence[: j - 1] if sample.existence else [],
        frames=sample.frames[:j] if sample.frames is not None else None,
    )


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def feature_path(root, video_id: str) -> Path:
    return Path(root) / "features" / f"{video_id}.bin"


def load_split(root, split: str) -> list[VideoSample]:
    """Annotations of ``<root>/<split>.json`` with frames attached."""
    samples = parse_dataset(Path(root) / f"{split}.json")
    return [attach_features(s, load_features(feature_path(root, s.video_id))) for s in samples]


def load_diagrams(path) -> dict[str, np.ndarray]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {vid: np.asarray(rows, dtype=np.int64) for vid, rows in data.items()}
