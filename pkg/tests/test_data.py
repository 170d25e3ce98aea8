import json
import struct

import numpy as np
import pytest

from kstransformer.data import (
    Dataset,
    Sample,
    SynthSpec,
    collate,
    decode_dataset,
    decollate,
    encode_dataset,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from kstransformer.errors import ConfigError, CorruptFileError, FormatError, SchemaError


def handmade_file() -> bytes:
    header = json.dumps({"audio_dim": 2, "text_dim": 1, "label_names": ["angry", "neutral", "happy", "sad"]}).encode()
    out = b"KSEF" + bytes([1]) + (2).to_bytes(4, "little") + len(header).to_bytes(4, "little") + header
    # record "a": label 3, audio 1x2, text 2x1
    out += (1).to_bytes(4, "little") + b"a" + bytes([3]) + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    out += struct.pack("<2f", 0.5, -1.25) + struct.pack("<2f", 2.0, 3.0)
    # record "bb": label 0, audio 2x2, text 1x1
    out += (2).to_bytes(4, "little") + b"bb" + bytes([0]) + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
    out += struct.pack("<4f", 1.0, 2.0, 3.0, 4.0) + struct.pack("<f", -0.0625)
    return out


class TestKSEF:
    def test_handmade_two_samples(self):
        ds = decode_dataset(handmade_file())
        assert (ds.audio_dim, ds.text_dim, len(ds)) == (2, 1, 2)
        a, b = ds.samples
        assert (a.id, a.label, b.id, b.label) == ("a", 3, "bb", 0)
        np.testing.assert_array_equal(a.audio, [[0.5, -1.25]])
        np.testing.assert_array_equal(a.text, [[2.0], [3.0]])
        np.testing.assert_array_equal(b.audio, [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(b.text, [[-0.0625]])
        assert ds.histogram() == {"angry": 1, "neutral": 0, "happy": 0, "sad": 1}

    def test_empty_payload(self):
        header = b'{"audio_dim":3,"text_dim":2,"label_names":["x","y"]}'
        ds = decode_dataset(b"KSEF\x01" + (0).to_bytes(4, "little") + len(header).to_bytes(4, "little") + header)
        assert len(ds) == 0 and ds.audio_dim == 3

    def test_round_trip_bit_exact(self, tmp_path, small_synth):
        save_dataset(small_synth, tmp_path / "d.ksef")
        back = load_dataset(tmp_path / "d.ksef")
        assert [s.id for s in back] == [s.id for s in small_synth]
        for x, y in zip(back, small_synth):
            assert x.label == y.label
            np.testing.assert_array_equal(x.audio, y.audio)
            np.testing.assert_array_equal(x.text, y.text)
        assert encode_dataset(back) == (tmp_path / "d.ksef").read_bytes()

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_dataset(b"NOPE" + handmade_file()[4:])

    def test_bad_version(self):
        buf = bytearray(handmade_file())
        buf[4] = 2
        with pytest.raises(FormatError):
            decode_dataset(bytes(buf))

    def test_truncated_record_reports_offset(self):
        buf = handmade_file()
        with pytest.raises(CorruptFileError) as err:
            decode_dataset(buf[:-3])
        assert err.value.offset == len(buf) - 4
        assert "offset" in str(err.value)

    def test_unknown_label(self):
        header = b'{"audio_dim":1,"text_dim":1,"label_names":["x","y"]}'
        buf = b"KSEF\x01" + (1).to_bytes(4, "little") + len(header).to_bytes(4, "little") + header
        buf += (1).to_bytes(4, "little") + b"z" + bytes([5]) + (1).to_bytes(4, "little") * 2 + struct.pack("<2f", 0, 0)
        with pytest.raises(SchemaError):
            decode_dataset(buf)

    def test_trailing_garbage(self):
        with pytest.raises(CorruptFileError):
            decode_dataset(handmade_file() + b"\x00")


class TestCollate:
    def test_masks_and_decollate(self, small_synth):
        batch = collate(small_synth.samples)
        np.testing.assert_array_equal(batch.audio_valid.sum(1), [len(s.audio) for s in small_synth])
        np.testing.assert_array_equal(batch.text_valid.sum(1), [len(s.text) for s in small_synth])
        for (a, t), s in zip(decollate(batch), small_synth):
            np.testing.assert_array_equal(a, s.audio)
            np.testing.assert_array_equal(t, s.text)
        assert np.all(batch.audio[~batch.audio_valid] == 0.0)

    def test_split_is_disjoint(self, small_synth):
        tr, dev = small_synth.split(0.25, seed=3)
        assert len(tr) + len(dev) == len(small_synth) and len(dev) == 3
        assert not {s.id for s in tr} & {s.id for s in dev}


class TestSynthetic:
    def test_deterministic(self):
        spec = SynthSpec(n_samples=30, seed=5)
        assert encode_dataset(generate_synthetic(spec)) == encode_dataset(generate_synthetic(spec))
        assert encode_dataset(generate_synthetic(spec)) != encode_dataset(generate_synthetic(SynthSpec(n_samples=30, seed=6)))

    def test_balanced_by_default(self):
        assert set(generate_synthetic(SynthSpec(n_samples=40)).histogram().values()) == {10}

    def test_imbalance_knob(self):
        hist = generate_synthetic(SynthSpec(n_samples=100, class_weights=(7, 1, 1, 1))).histogram()
        assert hist["angry"] == 70 and sum(hist.values()) == 100

    def test_lengths_and_token_counts(self):
        spec = SynthSpec(n_samples=20, signal_token_count=2, noise_token_count=3, audio_len=(6, 9), text_len=(5, 5))
        for s in generate_synthetic(spec):
            assert 6 <= len(s.audio) <= 9 and len(s.text) == 5
            assert len(s.meta["audio_signal"]) == 2 and len(s.meta["text_noise"]) == 3
            assert not set(s.meta["audio_signal"]) & set(s.meta["audio_noise"])

    def test_centroid_oracle_separates_high_strength(self):
        ds = generate_synthetic(SynthSpec(n_samples=200, signal_strength=6.0, seed=2))
        feats = np.array([np.concatenate([s.audio[s.meta["audio_signal"]].mean(0), s.text[s.meta["text_signal"]].mean(0)]) for s in ds])
        labels = np.array([s.label for s in ds])
        centroids = np.stack([feats[labels == c].mean(0) for c in range(4)])
        pred = np.argmin(((feats[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
        assert (pred == labels).mean() == 1.0

    def test_zero_strength_carries_no_label_signal(self):
        ds = generate_synthetic(SynthSpec(n_samples=400, signal_strength=0.0, seed=4))
        means = np.array([[np.concatenate([s.audio.mean(0), s.text.mean(0)]) for s in ds if s.label == c] for c in range(4)])
        class_means = means.mean(1)
        # class means differ only by sampling noise
        assert np.abs(class_means - class_means.mean(0)).max() < 0.25

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SynthSpec(signal_token_count=0)
        with pytest.raises(ConfigError):
            SynthSpec(signal_token_count=3, noise_token_count=3, text_len=(4, 8))

    def test_values_survive_float32(self):
        ds = generate_synthetic(SynthSpec(n_samples=3))
        for s in ds:
            np.testing.assert_array_equal(s.audio, s.audio.astype(np.float32).astype(np.float64))


def test_dataset_find_and_slice(small_synth):
    assert small_synth.find(small_synth[3].id) is small_synth[3]
    assert isinstance(small_synth[:4], Dataset) and len(small_synth[:4]) == 4
    with pytest.raises(KeyError):
        small_synth.find("missing")
