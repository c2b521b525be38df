import json

import numpy as np
import pytest

from dppeft.data import (
    ALPHABET,
    BLOB,
    MANIFEST,
    CorpusSpec,
    DatasetError,
    Voice,
    char_table,
    collate,
    decode_ids,
    encode_text,
    gen_transcripts,
    make_voices,
    make_word_list,
    pseudo_tts,
    read_dataset,
    synthesize_corpus,
    utterance_digest,
    write_dataset,
)
from dppeft.rng import Rng

from cases import tiny_corpus


def test_default_spec_counts():
    t = gen_transcripts(CorpusSpec())
    assert len(t) == 20000 and all(len(x) == 7 for x in t)


def test_single_word_vocab():
    t = gen_transcripts(CorpusSpec(num_utterances=5, words_per_utterance=1, vocab_words=1))
    assert len({tuple(x) for x in t}) == 1


def test_transcripts_deterministic():
    spec = CorpusSpec(num_utterances=50, vocab_words=100)
    assert gen_transcripts(spec) == gen_transcripts(spec)


def test_word_list_properties():
    words = make_word_list(500, seed=3)
    assert len(set(words)) == 500
    assert all(3 <= len(w) <= 8 and w.isalpha() for w in words)
    assert all(a != b for w in words for a, b in zip(w, w[1:]))


def test_zipf_is_frequency_weighted():
    words = make_word_list(100, 17)
    t = gen_transcripts(CorpusSpec(num_utterances=2000, vocab_words=100, zipf=1.2), words)
    flat = [w for x in t for w in x]
    assert flat.count(words[0]) > 5 * flat.count(words[50])


def test_text_round_trip():
    ids = encode_text("hello world")
    assert ids.min() >= 1 and decode_ids(ids) == "hello world"
    with pytest.raises(DatasetError):
        encode_text("héllo")


def test_single_char_jitterless():
    v = make_voices(1, seed=0)[0]
    feats = pseudo_tts("a", v, Rng(0), jitter=0.0)
    want = (char_table()[encode_text("a")[0]] + np.asarray(v.offset)).astype(np.float32)
    assert feats.shape[0] == v.frames_per_char
    assert all(np.array_equal(f, want) for f in feats)


def test_two_voices_differ_by_offset():
    v1 = Voice(tuple(np.full(16, 0.3)), 3)
    v2 = Voice(tuple(np.full(16, -0.2)), 3)
    a = pseudo_tts("abc", v1, Rng(0), jitter=0.0).astype(np.float64)
    b = pseudo_tts("abc", v2, Rng(0), jitter=0.0).astype(np.float64)
    np.testing.assert_allclose(a - b, 0.5, atol=1e-6)


def test_nearest_char_round_trip():
    table = char_table()
    v = make_voices(4, seed=9)[2]
    text = "the quick brown fox"
    feats = pseudo_tts(text, v, Rng(0), jitter=0.0).astype(np.float64) - np.asarray(v.offset)
    d = ((feats[:, None, :] - table[None, 1:, :]) ** 2).sum(-1)
    ids = d.argmin(1) + 1
    chars = [decode_ids([i]) for i in ids[:: v.frames_per_char]]
    assert "".join(chars) == text


def test_empty_transcript_rejected():
    with pytest.raises(DatasetError):
        pseudo_tts("", make_voices(1, 0)[0], Rng(0))


def test_feature_statistics_within_jitter():
    v = make_voices(1, seed=2)[0]
    feats = pseudo_tts("a" * 2000, v, Rng(1), jitter=0.1).astype(np.float64)
    centre = char_table()[encode_text("a")[0]] + np.asarray(v.offset)
    assert np.abs(feats.mean(0) - centre).max() < 4 * 0.1 / np.sqrt(len(feats))
    assert abs(feats.std(0).mean() - 0.1) < 0.01


def test_round_trip_bit_exact(tmp_path):
    utts = synthesize_corpus(CorpusSpec(num_utterances=100, words_per_utterance=3, vocab_words=300), voice_seed=4)
    write_dataset(utts, tmp_path / "ds")
    ds = read_dataset(tmp_path / "ds")
    assert len(ds) == 100
    for u, r in zip(utts, ds):
        assert r.text == u.text and r.voice_id == u.voice_id
        assert r.features.tobytes() == u.features.tobytes()


def test_empty_dataset(tmp_path):
    write_dataset([], tmp_path / "empty")
    ds = read_dataset(tmp_path / "empty")
    assert len(ds) == 0
    assert json.loads((tmp_path / "empty" / MANIFEST).read_text())["entries"] == []


def test_truncated_blob_detected(tmp_path):
    utts = tiny_corpus(5)
    write_dataset(utts, tmp_path / "ds")
    blob = tmp_path / "ds" / BLOB
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(DatasetError, match=utts[-1].uid):
        read_dataset(tmp_path / "ds")


def test_corrupt_length_names_utterance(tmp_path):
    utts = tiny_corpus(3)
    write_dataset(utts, tmp_path / "ds")
    path = tmp_path / "ds" / MANIFEST
    m = json.loads(path.read_text())
    m["entries"][1]["nbytes"] += 4
    path.write_text(json.dumps(m))
    with pytest.raises(DatasetError, match=utts[1].uid):
        read_dataset(tmp_path / "ds")


def test_determinism_and_disjointness():
    spec_pub = CorpusSpec(num_utterances=200, words_per_utterance=3, vocab_words=1000, seed=1)
    spec_priv = CorpusSpec(num_utterances=200, words_per_utterance=3, vocab_words=1000, seed=2)
    a = [utterance_digest(u) for u in synthesize_corpus(spec_pub, voice_seed=1001)]
    b = [utterance_digest(u) for u in synthesize_corpus(spec_pub, voice_seed=1001)]
    c = [utterance_digest(u) for u in synthesize_corpus(spec_priv, voice_seed=2002)]
    assert a == b
    assert not set(a) & set(c)
    pub_voices = {v.offset for v in make_voices(4, 1001)}
    priv_voices = {v.offset for v in make_voices(4, 2002)}
    assert not pub_voices & priv_voices


def test_frame_count_lower_bound():
    for u in tiny_corpus(10):
        assert u.num_frames >= len(u.text) * 2
        assert np.isfinite(u.features).all()


def test_collate_padding():
    utts = tiny_corpus(4)
    b = collate(utts, pad_to=200)
    assert b.features.shape == (4, 200, 16)
    for i, u in enumerate(utts):
        assert not b.features[i, u.num_frames :].any()
        assert b.example(i).features.shape[1] == u.num_frames
    with pytest.raises(ValueError):
        collate(utts, pad_to=3)
    assert ALPHABET[0] == " "
