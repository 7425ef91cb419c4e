import struct

import numpy as np
import pytest

from gdprune.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from gdprune.codec import CodecConfig, ToyCodec
from gdprune.errors import FormatError


def make(seed=0):
    model = ToyCodec(CodecConfig(base_width=4, latent_channels=4, num_downsamples=2), seed=seed)
    arrays = dict(model.state_arrays())
    arrays["threshold/pred.dec0"] = np.array(0.25, dtype=np.float32)
    arrays["mask/pred.dec0"] = np.array([1, 0, 1, 1], dtype=np.float32)
    return model, Checkpoint(model.config, model.topology, arrays, {"kind": "sparse", "step": 3})


def test_round_trip_bit_exact(tmp_path):
    model, ckpt = make()
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    assert back.topology == model.topology
    assert back.meta == ckpt.meta
    assert list(back.arrays) == list(ckpt.arrays)
    for k, v in ckpt.arrays.items():
        assert back.arrays[k].shape == np.shape(v)
        assert back.arrays[k].tobytes() == np.asarray(v, dtype=np.float32).tobytes()
    save_checkpoint(tmp_path / "n.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_header_layout(tmp_path):
    _, ckpt = make()
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:4] == b"GDPC"
    version, hlen = struct.unpack_from("<II", data, 4)
    assert version == 1 and data[12] == ord("{")


@pytest.mark.parametrize("mutate,match", [
    (lambda d: b"NOPE" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
    (lambda d: d[:-3], "truncated|corrupt"),
    (lambda d: d + b"\0", "trailing"),
    (lambda d: d[:40], "corrupt|truncated"),
])
def test_corrupt_files(tmp_path, mutate, match):
    _, ckpt = make()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, ckpt)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_checkpoint(p)


def test_layer_ids_stable_across_save_load(tmp_path):
    from gdprune.codec import FrameContext
    from gdprune.train import model_from_checkpoint

    model, ckpt = make(1)
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    x = np.random.default_rng(0).uniform(size=(1, 1, 8, 8)).astype(np.float32)
    a = model.code_frame(FrameContext(x, x))
    b = back.code_frame(FrameContext(x, x))
    assert sorted(a.hidden) == sorted(b.hidden)
    assert a.reconstruction.value.tobytes() == b.reconstruction.value.tobytes()
