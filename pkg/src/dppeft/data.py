"""Synthetic random-transcript corpora, a deterministic pseudo-TTS, and the on-disk format.

Token ids: 0 is the CTC blank, 1 is the word separator (space), 2..27 are
``a``..``z``. A dataset directory holds ``manifest.json`` plus one feature blob
of little-endian float32 frames.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng

ALPHABET = " abcdefghijklmnopqrstuvwxyz"
VOCAB_SIZE = len(ALPHABET) + 1  # + blank
FEATURE_DIM = 16
FRAMES_PER_CHAR = (2, 3, 4, 5)
CHAR_TABLE_SEED = 1234
MANIFEST = "manifest.json"
BLOB = "features.f32"


class DatasetError(ValueError):
    pass


def encode_text(text: str) -> np.ndarray:
    try:
        return np.array([ALPHABET.index(c) + 1 for c in text], dtype=np.int64)
    except ValueError:
        bad = sorted(set(text) - set(ALPHABET))
        raise DatasetError(f"characters outside the vocabulary: {bad}") from None


def decode_ids(ids: Sequence[int]) -> str:
    return "".join(ALPHABET[i - 1] for i in ids if 1 <= i <= len(ALPHABET))


def make_word_list(n: int, seed: int, min_len: int = 3, max_len: int = 8) -> list[str]:
    """``n`` distinct pseudo-words over a-z with no letter repeated back to back."""
    rng = Rng(seed).child("words")
    letters = ALPHABET[1:]
    words: list[str] = []
    seen: set[str] = set()
    capacity = sum(26 * 25 ** (k - 1) for k in range(min_len, max_len + 1))
    if n > capacity:
        raise ValueError(f"cannot draw {n} distinct words")
    while len(words) < n:
        length = int(rng.integers(min_len, max_len + 1))
        chars = [int(rng.integers(0, 26))]
        for _ in range(length - 1):
            nxt = int(rng.integers(0, 25))
            chars.append(nxt + (nxt >= chars[-1]))
        w = "".join(letters[c] for c in chars)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class CorpusSpec:
    num_utterances: int = 20000
    words_per_utterance: int = 7
    vocab_words: int = 10000
    num_voices: int = 4
    seed: int = 0
    word_seed: int = 17
    zipf: float | None = None  # exponent for frequency-weighted sampling; None = uniform

    def validate(self) -> None:
        if self.num_utterances < 0 or min(self.words_per_utterance, self.vocab_words, self.num_voices) < 1:
            raise ValueError("corpus sizes must be positive")


def gen_transcripts(spec: CorpusSpec, words: list[str] | None = None) -> list[list[str]]:
    """Each transcript is ``words_per_utterance`` words drawn with replacement."""
    spec.validate()
    words = words if words is not None else make_word_list(spec.vocab_words, spec.word_seed)
    if len(words) != spec.vocab_words:
        raise ValueError("word list length must equal vocab_words")
    rng = Rng(spec.seed).child("transcripts")
    p = None
    if spec.zipf is not None:
        ranks = np.arange(1, len(words) + 1, dtype=np.float64)
        p = ranks ** -spec.zipf
        p /= p.sum()
    idx = rng.choice(len(words), size=(spec.num_utterances, spec.words_per_utterance), p=p)
    return [[words[i] for i in row] for row in idx]


def char_table(feature_dim: int = FEATURE_DIM, seed: int = CHAR_TABLE_SEED) -> np.ndarray:
    """Fixed embedding per token id (row 0, the blank, is unused)."""
    return Rng(seed).child("char_table").normal((VOCAB_SIZE, feature_dim), 1.0, dtype=np.float64)


@dataclass(frozen=True)
class Voice:
    offset: tuple[float, ...]
    frames_per_char: int


def make_voices(n: int, seed: int, feature_dim: int = FEATURE_DIM, offset_std: float = 0.5) -> list[Voice]:
    """Voice ``i`` gets a seeded additive offset and ``FRAMES_PER_CHAR[i % 4]`` frames per char."""
    rng = Rng(seed).child("voices")
    out = []
    for i in range(n):
        off = rng.child(i).normal((feature_dim,), offset_std, dtype=np.float64)
        out.append(Voice(tuple(float(v) for v in off), FRAMES_PER_CHAR[i % len(FRAMES_PER_CHAR)]))
    return out


def random_voice(rng: Rng, feature_dim: int = FEATURE_DIM, offset_std: float = 0.5) -> Voice:
    off = rng.normal((feature_dim,), offset_std, dtype=np.float64)
    return Voice(tuple(float(v) for v in off), int(FRAMES_PER_CHAR[int(rng.integers(0, 4))]))


def pseudo_tts(
    transcript: str | Sequence[str],
    voice: Voice,
    rng: Rng,
    jitter: float = 0.1,
    table: np.ndarray | None = None,
) -> np.ndarray:
    """Frames ``[n_chars * d, F]``: each character repeated ``d`` times as
    ``char_vec + voice_offset + N(0, jitter^2)``."""
    text = transcript if isinstance(transcript, str) else " ".join(transcript)
    if not text:
        raise DatasetError("transcript must be non-empty")
    ids = encode_text(text)
    table = char_table() if table is None else table
    base = table[ids] + np.asarray(voice.offset)
    frames = np.repeat(base, voice.frames_per_char, axis=0)
    if jitter > 0:
        frames = frames + rng.normal(frames.shape, jitter, dtype=np.float64)
    return frames.astype(np.float32)


@dataclass
class Utterance:
    uid: str
    words: list[str]
    features: np.ndarray
    voice_id: int

    @property
    def text(self) -> str:
        return " ".join(self.words)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def label_ids(self) -> np.ndarray:
        return encode_text(self.text)


def synthesize_corpus(
    spec: CorpusSpec,
    voice_seed: int,
    jitter: float = 0.1,
    prefix: str = "utt",
    random_voices: bool = False,
    words: list[str] | None = None,
) -> list[Utterance]:
    """Transcripts from ``spec`` rendered with the pseudo-TTS.

    Utterance ``i`` uses voice ``i % num_voices`` from the bank seeded by
    ``voice_seed``, or a fresh random voice when ``random_voices`` is set.
    """
    transcripts = gen_transcripts(spec, words)
    voices = make_voices(spec.num_voices, voice_seed)
    table = char_table()
    root = Rng(spec.seed).child("tts")
    out = []
    for i, words_i in enumerate(transcripts):
        rng = root.child(i)
        if random_voices:
            voice, vid = random_voice(rng.child("voice")), -1
        else:
            vid = i % spec.num_voices
            voice = voices[vid]
        feats = pseudo_tts(words_i, voice, rng.child("jitter"), jitter, table)
        out.append(Utterance(f"{prefix}-{i:06d}", list(words_i), feats, vid))
    return out


def utterance_digest(u: Utterance) -> str:
    h = hashlib.sha256(u.text.encode())
    h.update(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# on-disk format


@dataclass
class ManifestEntry:
    uid: str
    transcript: str
    offset: int
    nbytes: int
    frames: int
    voice_id: int


@dataclass
class Manifest:
    dataset_id: str
    feature_dim: int
    vocabulary: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "feature_dim": self.feature_dim,
            "vocabulary": self.vocabulary,
            "meta": self.meta,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Manifest:
        return cls(
            d["dataset_id"],
            int(d["feature_dim"]),
            list(d["vocabulary"]),
            [ManifestEntry(**e) for e in d["entries"]],
            dict(d.get("meta", {})),
        )


def write_dataset(
    utterances: Sequence[Utterance],
    path: str | os.PathLike,
    dataset_id: str | None = None,
    meta: dict | None = None,
) -> Manifest:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    feature_dim = int(utterances[0].features.shape[1]) if utterances else FEATURE_DIM
    manifest = Manifest(dataset_id or path.name, feature_dim, list(ALPHABET), meta=dict(meta or {}))
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for u in utterances:
            if u.features.ndim != 2 or u.features.shape[1] != feature_dim:
                raise DatasetError(f"utterance {u.uid}: features must be [frames, {feature_dim}]")
            if not np.isfinite(u.features).all():
                raise DatasetError(f"utterance {u.uid}: non-finite features")
            blob = np.ascontiguousarray(u.features, dtype="<f4").tobytes()
            fh.write(blob)
            manifest.entries.append(ManifestEntry(u.uid, u.text, offset, len(blob), u.num_frames, u.voice_id))
            offset += len(blob)
    with open(path / MANIFEST, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
    return manifest


class Dataset:
    """Read-only view of a dataset directory; features are memory-mapped lazily."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            with open(self.path / MANIFEST) as fh:
                self.manifest = Manifest.from_dict(json.load(fh))
        except FileNotFoundError:
            raise DatasetError(f"no manifest in {self.path}") from None
        if self.manifest.vocabulary != list(ALPHABET):
            raise DatasetError("dataset vocabulary differs from the model alphabet")
        blob = self.path / BLOB
        size = blob.stat().st_size if blob.exists() else 0
        end = 0
        fd = self.manifest.feature_dim
        for e in self.manifest.entries:
            if e.nbytes != e.frames * fd * 4:
                raise DatasetError(f"utterance {e.uid}: blob length {e.nbytes} != frames*feature_dim*4")
            if e.offset < end:
                raise DatasetError(f"utterance {e.uid}: overlapping blob offset")
            end = e.offset + e.nbytes
            if end > size:
                raise DatasetError(f"utterance {e.uid}: feature blob truncated ({size} bytes on disk)")
        self._blob = np.memmap(blob, dtype="<f4", mode="r") if size else np.zeros(0, "<f4")

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def features(self, i: int) -> np.ndarray:
        e = self.manifest.entries[i]
        start = e.offset // 4
        return np.array(self._blob[start : start + e.frames * self.manifest.feature_dim]).reshape(
            e.frames, self.manifest.feature_dim
        ).astype(np.float32)

    def __getitem__(self, i: int) -> Utterance:
        e = self.manifest.entries[i]
        return Utterance(e.uid, e.transcript.split(" "), self.features(i), e.voice_id)

    def __iter__(self) -> Iterator[Utterance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def max_frames(self) -> int:
        return max((e.frames for e in self.manifest.entries), default=0)


def read_dataset(path: str | os.PathLike) -> Dataset:
    return Dataset(path)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    features: np.ndarray  # [B, T, F], zero padded
    lengths: np.ndarray  # [B]
    labels: list[np.ndarray]
    transcripts: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def example(self, i: int) -> Batch:
        """Singleton batch trimmed to the example's own length."""
        n = int(self.lengths[i])
        return Batch(self.features[i : i + 1, :n], self.lengths[i : i + 1], [self.labels[i]], [self.transcripts[i]])


def collate(utterances: Sequence[Utterance], pad_to: int | None = None) -> Batch:
    """Stack utterances into a zero-padded batch.

    ``pad_to`` fixes the padded length; outputs of one example are then
    bit-identical regardless of which other examples share the batch.
    """
    if not utterances:
        raise ValueError("cannot collate an empty batch")
    lengths = np.array([u.num_frames for u in utterances], dtype=np.int64)
    t = int(lengths.max()) if pad_to is None else int(pad_to)
    if t < lengths.max():
        raise ValueError(f"pad_to={pad_to} is shorter than the longest utterance ({lengths.max()})")
    fd = utterances[0].features.shape[1]
    feats = np.zeros((len(utterances), t, fd), np.float32)
    for i, u in enumerate(utterances):
        feats[i, : u.num_frames] = u.features
    return Batch(feats, lengths, [u.label_ids() for u in utterances], [u.text for u in utterances])
