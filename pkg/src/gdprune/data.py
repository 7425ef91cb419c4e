"""Synthetic and on-disk frame sequences, and the training batcher.

On-disk sequences use the TVSF layout::

    b"TVSF" | u32 version | u32 width | u32 height | u32 channels | u32 frames
    frames * height * width * channels bytes, 8-bit, channel-interleaved

All integers little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gdprune.codec import FrameContext
from gdprune.errors import FormatError

TVSF_MAGIC = b"TVSF"
TVSF_VERSION = 1
_HEADER = struct.Struct("<4s5I")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, C, H, W) float32 in [0, 1]
    source: str = "synthetic"

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError("frames must be (T, C, H, W)")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


def _texture(rng: np.random.Generator, h: int, w: int, channels: int) -> np.ndarray:
    # band-limited noise: white noise with a Gaussian low-pass in the Fourier domain
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    cutoff = rng.uniform(0.05, 0.15)
    lowpass = np.exp(-(fx ** 2 + fy ** 2) / (2 * cutoff ** 2))
    out = np.empty((channels, h, w))
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    for c in range(channels):
        noise = np.real(np.fft.ifft2(np.fft.fft2(rng.normal(size=(h, w))) * lowpass))
        noise = (noise - noise.mean()) / (noise.std() + 1e-12)
        # periodic gradients keep the pattern seamless under toroidal shifts
        a, b = rng.uniform(0, 2 * np.pi, size=2)
        grad = 0.5 * np.sin(2 * np.pi * xx + a) + 0.5 * np.cos(2 * np.pi * yy + b)
        mix = rng.uniform(0.3, 0.7)
        out[c] = mix * noise + (1 - mix) * grad
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo)


def synth_sequence(seed: int, length: int, width: int, height: int, motion_px_per_frame=(1, 0),
                   channels: int = 1) -> FrameSequence:
    """Textured pattern translated by an integer (dx, dy) per frame with wrap-around."""
    if isinstance(motion_px_per_frame, int):
        motion_px_per_frame = (motion_px_per_frame, 0)
    dx, dy = (int(m) for m in motion_px_per_frame)
    rng = np.random.default_rng(seed)
    base = _texture(rng, height, width, channels)
    frames = np.stack([np.roll(base, shift=(t * dy, t * dx), axis=(1, 2)) for t in range(length)])
    return FrameSequence(frames.astype(np.float32), "synthetic")


def synth_corpus(seed: int, count: int, length: int, size: int, max_motion: int, channels: int = 1
                 ) -> list[FrameSequence]:
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(count):
        s = int(rng.integers(0, 2 ** 31 - 1))
        motion = tuple(int(m) for m in rng.integers(-max_motion, max_motion + 1, size=2))
        seqs.append(synth_sequence(s, length, size, size, motion, channels))
    return seqs


def write_raw(path: str | Path, seq: FrameSequence) -> None:
    samples = np.clip(np.round(seq.frames * 255.0), 0, 255).astype(np.uint8)
    payload = samples.transpose(0, 2, 3, 1).tobytes()  # (T, H, W, C) interleaved
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TVSF_MAGIC, TVSF_VERSION, seq.width, seq.height, seq.channels, seq.length))
        fh.write(payload)


def load_raw(path: str | Path, width: int | None = None, height: int | None = None,
             channels: int | None = None) -> FrameSequence:
    """Read a TVSF file; optional keyword expectations are checked against the header."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, w, h, c, n = _HEADER.unpack_from(data)
    if magic != TVSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TVSF_MAGIC!r}")
    if version != TVSF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(w, h, c, n) == 0:
        raise FormatError(f"{path}: zero dimension in header (w={w}, h={h}, c={c}, frames={n})")
    for name, want, got in (("width", width, w), ("height", height, h), ("channels", channels, c)):
        if want is not None and want != got:
            raise FormatError(f"{path}: {name} {got} does not match expected {want}")
    need = n * h * w * c
    body = data[_HEADER.size:]
    if len(body) < need:
        raise FormatError(f"{path}: truncated payload, {len(body)} of {need} bytes")
    if len(body) > need:
        raise FormatError(f"{path}: {len(body) - need} trailing bytes after {n} frames")
    samples = np.frombuffer(body, dtype=np.uint8).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return FrameSequence((samples.astype(np.float32) / 255.0), "file")


class Batcher:
    """Seeded random crops of (previous, current) frame pairs.

    Batch ``k`` depends only on ``(seed, k)``, so a resumed run sees the same
    stream as an uninterrupted one.
    """

    def __init__(self, sequences: Sequence[FrameSequence], batch: int, crop: int, seed: int):
        if not sequences:
            raise ValueError("batcher needs at least one sequence")
        for s in sequences:
            if s.length < 2:
                raise ValueError("sequences need at least two frames")
            if s.height < crop or s.width < crop:
                raise ValueError(f"crop {crop} exceeds frame size {s.height}x{s.width}")
        self.sequences = list(sequences)
        self.batch = batch
        self.crop = crop
        self.seed = seed

    def batch_at(self, k: int) -> FrameContext:
        rng = np.random.default_rng([self.seed, k])
        cur, ref = [], []
        for _ in range(self.batch):
            seq = self.sequences[int(rng.integers(len(self.sequences)))]
            t = int(rng.integers(1, seq.length))
            y = int(rng.integers(0, seq.height - self.crop + 1))
            x = int(rng.integers(0, seq.width - self.crop + 1))
            window = (slice(None), slice(y, y + self.crop), slice(x, x + self.crop))
            cur.append(seq.frames[t][window])
            ref.append(seq.frames[t - 1][window])
        return FrameContext(np.stack(cur), np.stack(ref))

    def __iter__(self) -> Iterator[FrameContext]:
        k = 0
        while True:
            yield self.batch_at(k)
            k += 1


def frame_pairs(sequences: Sequence[FrameSequence]) -> Iterator[FrameContext]:
    """Every consecutive (reference, current) pair, one pair per context."""
    for seq in sequences:
        for t in range(1, seq.length):
            yield FrameContext(seq.frames[t:t + 1], seq.frames[t - 1:t])
