import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdprune.data import Batcher, FrameSequence, frame_pairs, load_raw, synth_corpus, synth_sequence, write_raw
from gdprune.errors import FormatError


def test_static_sequence_frames_identical():
    seq = synth_sequence(1, 4, 16, 12, (0, 0))
    assert seq.frames.shape == (4, 1, 12, 16)
    assert all(np.array_equal(seq.frames[0], f) for f in seq.frames)


def test_seed_determinism():
    a = synth_sequence(7, 3, 16, 16, (1, 2), channels=3)
    b = synth_sequence(7, 3, 16, 16, (1, 2), channels=3)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert not np.array_equal(a.frames, synth_sequence(8, 3, 16, 16, (1, 2), channels=3).frames)


def test_full_width_motion_wraps():
    seq = synth_sequence(2, 3, 16, 16, 16)
    assert np.array_equal(seq.frames[0], seq.frames[1])


def test_motion_is_a_roll():
    seq = synth_sequence(3, 2, 16, 16, (2, -1))
    np.testing.assert_array_equal(seq.frames[1], np.roll(seq.frames[0], (-1, 2), axis=(1, 2)))
    assert seq.frames.min() >= 0 and seq.frames.max() <= 1


def test_raw_round_trip_is_identity_on_8bit(tmp_path):
    rng = np.random.default_rng(0)
    samples = rng.integers(0, 256, size=(3, 2, 5, 7)).astype(np.float32) / 255.0
    seq = FrameSequence(samples)
    write_raw(tmp_path / "a.tvsf", seq)
    back = load_raw(tmp_path / "a.tvsf", width=7, height=5, channels=2)
    assert back.source == "file"
    np.testing.assert_array_equal(back.frames, samples)


def test_raw_layout_is_interleaved(tmp_path):
    frames = np.zeros((1, 3, 1, 2), dtype=np.float32)
    frames[0, :, 0, 0] = np.array([1, 2, 3]) / 255
    frames[0, :, 0, 1] = np.array([4, 5, 6]) / 255
    write_raw(tmp_path / "b.tvsf", FrameSequence(frames))
    data = (tmp_path / "b.tvsf").read_bytes()
    assert data[:4] == b"TVSF"
    assert struct.unpack("<5I", data[4:24]) == (1, 2, 1, 3, 1)
    assert data[24:] == bytes([1, 2, 3, 4, 5, 6])


def _header(magic=b"TVSF", version=1, w=2, h=2, c=1, n=1):
    return struct.pack("<4s5I", magic, version, w, h, c, n)


@pytest.mark.parametrize("blob,match", [
    (_header(magic=b"XXXX") + bytes(4), "magic"),
    (_header(version=2) + bytes(4), "version"),
    (_header(w=0), "zero"),
    (_header() + bytes(3), "truncated"),
    (_header() + bytes(5), "trailing"),
    (b"TVS", "truncated"),
])
def test_raw_errors(tmp_path, blob, match):
    p = tmp_path / "bad.tvsf"
    p.write_bytes(blob)
    with pytest.raises(FormatError, match=match):
        load_raw(p)


def test_raw_expectation_mismatch(tmp_path):
    p = tmp_path / "c.tvsf"
    p.write_bytes(_header() + bytes(4))
    with pytest.raises(FormatError, match="width"):
        load_raw(p, width=4)


@given(st.integers(0, 1000))
def test_batcher_is_stateless_per_step(k):
    seqs = synth_corpus(0, 2, 3, 16, 1)
    a = Batcher(seqs, 2, 8, seed=5).batch_at(k)
    b = Batcher(seqs, 2, 8, seed=5).batch_at(k)
    assert a.current.tobytes() == b.current.tobytes()
    assert a.reference.tobytes() == b.reference.tobytes()
    assert a.current.shape == (2, 1, 8, 8)


def test_batcher_pairs_are_consecutive():
    seq = synth_sequence(0, 5, 16, 16, (3, 0))
    ctx = Batcher([seq], 1, 16, seed=1).batch_at(0)
    t = next(i for i in range(1, 5) if np.array_equal(seq.frames[i], ctx.current[0]))
    np.testing.assert_array_equal(ctx.reference[0], seq.frames[t - 1])


def test_batcher_stream_and_checks():
    seqs = synth_corpus(1, 2, 3, 16, 1)
    b = Batcher(seqs, 2, 8, seed=3)
    it = iter(b)
    first, second = next(it), next(it)
    assert first.current.tobytes() == b.batch_at(0).current.tobytes()
    assert second.current.tobytes() == b.batch_at(1).current.tobytes()
    with pytest.raises(ValueError):
        Batcher(seqs, 2, 32, seed=0)
    with pytest.raises(ValueError):
        Batcher([], 2, 8, seed=0)


def test_frame_pairs_count():
    seqs = synth_corpus(2, 3, 4, 8, 1)
    assert len(list(frame_pairs(seqs))) == 3 * 3
