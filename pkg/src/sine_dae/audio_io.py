"""RIFF/WAVE I/O, down-mixing, segmentation and silence detection."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCM = 0x0001
IEEE_FLOAT = 0x0003
EXTENSIBLE = 0xFFFE
SILENCE_DB = -60.0


class WavFormatError(ValueError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(WavFormatError):
    """The WAVE encoding is not 16/24-bit PCM or 32-bit float."""


class ClippingWarning(UserWarning):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SegmentSet:
    segments: list[np.ndarray]
    n: int
    hop: int
    source_tag: str = "vocals"
    starts: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.segments)

    def as_array(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0, self.n))
        return np.stack(self.segments)


def downmix(frames: np.ndarray) -> np.ndarray:
    """Average channels of a ``(frames, channels)`` array into mono."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames if frames.ndim == 1 else frames.mean(axis=1)


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise WavFormatError(f"truncated {cid!r} chunk")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path: str | Path) -> Waveform:
    """Load a 16/24-bit PCM or float32 WAV file as a mono float64 waveform."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = body = None
    for cid, chunk in _chunks(data):
        if cid == b"fmt ":
            fmt = chunk
        elif cid == b"data":
            body = chunk
    if fmt is None or body is None:
        raise WavFormatError(f"{path}: missing 'fmt ' or 'data' chunk")
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: short 'fmt ' chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {channels} channels not supported")
    width = bits // 8
    if (tag, bits) == (PCM, 16):
        raw = np.frombuffer(body, dtype="<i2", count=len(body) // 2).astype(np.float64) / 32768.0
    elif (tag, bits) == (PCM, 24):
        b = np.frombuffer(body, dtype=np.uint8, count=len(body) // 3 * 3).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        raw = ints.astype(np.float64) / float(1 << 23)
    elif (tag, bits) == (IEEE_FLOAT, 32):
        raw = np.frombuffer(body, dtype="<f4", count=len(body) // 4).astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: format tag {tag:#06x} with {bits} bits not supported")
    if block_align != width * channels:
        raise WavFormatError(f"{path}: block align {block_align} inconsistent with {channels}x{bits} bits")
    nframes = raw.size // channels
    frames = raw[:nframes * channels].reshape(nframes, channels)
    samples = downmix(frames)
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: non-finite samples")
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform, bits: int | str = "float32") -> None:
    """Write a mono WAV file. Integer depths clip out-of-range samples with a warning."""
    x = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    if bits in ("float32", 32):
        tag, nbits = IEEE_FLOAT, 32
        payload = x.astype("<f4").tobytes()
    elif bits in (16, 24, "16", "24"):
        tag, nbits = PCM, int(bits)
        scale = float(1 << (nbits - 1))
        q = np.round(x * scale)
        clipped = int(np.count_nonzero((q > scale - 1) | (q < -scale)))
        if clipped:
            warnings.warn(f"{clipped} samples clipped writing {path}", ClippingWarning, stacklevel=2)
        q = np.clip(q, -scale, scale - 1).astype(np.int32)
        if nbits == 16:
            payload = q.astype("<i2").tobytes()
        else:
            u = (q & 0xFFFFFF).astype("<u4")
            payload = u.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    else:
        raise UnsupportedCodecError(f"unsupported bit depth {bits!r}")
    width = nbits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, w.sample_rate, w.sample_rate * width, width, nbits)
    pad = b"\x00" if len(payload) & 1 else b""
    riff_size = 4 + (8 + len(fmt)) + (8 + len(payload) + len(pad))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI4s", b"RIFF", riff_size, b"WAVE"))
        fh.write(struct.pack("<4sI", b"fmt ", len(fmt)) + fmt)
        fh.write(struct.pack("<4sI", b"data", len(payload)) + payload + pad)


def segment(x: np.ndarray | Waveform, n: int, hop: int, pad_last: bool = False, source_tag: str = "vocals") -> SegmentSet:
    """Cut ``x`` into length-``n`` windows starting every ``hop`` samples."""
    if n <= 0 or not 0 < hop <= n:
        raise ValueError(f"need n > 0 and 0 < hop <= n, got n={n}, hop={hop}")
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    segs, starts = [], []
    start = 0
    while start + n <= samples.size:
        segs.append(samples[start:start + n].copy())
        starts.append(start)
        start += hop
    if pad_last and start < samples.size:
        tail = np.zeros(n)
        tail[:samples.size - start] = samples[start:]
        segs.append(tail)
        starts.append(start)
    return SegmentSet(segs, n, hop, source_tag, starts)


def concatenate(segments: SegmentSet) -> np.ndarray:
    """Inverse of non-overlapping segmentation (keeps any trailing padding)."""
    if segments.hop != segments.n:
        raise ValueError("only non-overlapping segment sets can be concatenated")
    return np.concatenate(segments.segments) if segments.segments else np.zeros(0)


def power_db(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    p = float(np.mean(x * x)) if x.size else 0.0
    return -np.inf if p == 0.0 else 10.0 * np.log10(p)


def is_silent(x: np.ndarray | Waveform, threshold_db: float = SILENCE_DB) -> bool:
    samples = x.samples if isinstance(x, Waveform) else x
    return power_db(samples) < threshold_db
