"""Shared fixtures: a hand-rolled WAV encoder and small model configs.

The encoder here is deliberately independent of the package's decoder --
it assembles RIFF chunks with struct.pack -- so the decode tests exercise
two separately written implementations of the format.
"""

from __future__ import annotations

import struct

import numpy as np
import pytest

from meltag.dsp import DspConfig
from meltag.network import ModelConfig


def encode_wav(
    samples: np.ndarray,
    sample_rate: int,
    fmt: str = "pcm16",
    extra_chunks: list[tuple[bytes, bytes]] | None = None,
) -> bytes:
    """samples: [n] mono or [n, channels]; fmt: pcm16 | float32."""
    data = np.atleast_2d(np.asarray(samples, dtype=np.float64).T).T
    n_channels = data.shape[1]
    if fmt == "pcm16":
        code, width = 1, 2
        payload = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif fmt == "float32":
        code, width = 3, 4
        payload = data.astype("<f4").tobytes()
    else:
        raise ValueError(fmt)
    fmt_chunk = struct.pack(
        "<HHIIHH",
        code,
        n_channels,
        sample_rate,
        sample_rate * n_channels * width,
        n_channels * width,
        width * 8,
    )
    chunks = [(b"fmt ", fmt_chunk)]
    chunks += extra_chunks or []
    chunks.append((b"data", payload))
    body = b"WAVE"
    for tag, content in chunks:
        body += tag + struct.pack("<I", len(content)) + content
        if len(content) % 2:
            body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


@pytest.fixture
def wav_factory(tmp_path):
    counter = [0]

    def write(samples, sample_rate, fmt="pcm16", name=None, extra_chunks=None):
        counter[0] += 1
        path = tmp_path / (name or f"clip{counter[0]:03d}.wav")
        path.write_bytes(encode_wav(samples, sample_rate, fmt, extra_chunks))
        return path

    return write


def sine(freq_hz: float, seconds: float, sample_rate: int, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return amplitude * np.sin(2.0 * np.pi * freq_hz * t)


# --- model configs sized for fast tests --------------------------------------


def tiny_dsp(patch_frames: int = 8, n_mels: int = 8) -> DspConfig:
    return DspConfig(
        sample_rate=2000,
        fft_size=64,
        hop_size=32,
        n_mels=n_mels,
        fmin=0.0,
        fmax=1000.0,
        patch_frames=patch_frames,
        patch_hop_frames=patch_frames,
    )


def tiny_musicnn(backend: str = "temporal_pooling", n_tags: int = 2, **kwargs) -> ModelConfig:
    defaults = dict(
        family="musicnn",
        backend=backend,
        n_tags=n_tags,
        dsp=tiny_dsp(),
        timbral_channels=2,
        temporal_filter_lengths=(5, 3),
        temporal_channels=1,
        midend_channels=3,
        penultimate_units=4,
    )
    defaults.update(kwargs)
    return ModelConfig(**defaults)


def tiny_vgg(n_tags: int = 2, **kwargs) -> ModelConfig:
    defaults = dict(
        family="vgg",
        n_tags=n_tags,
        dsp=tiny_dsp(),
        vgg_block_channels=(2, 2, 2, 2, 2),
        vgg_pool_shapes=((2, 2), (2, 2), (1, 1), (1, 2), (2, 1)),
    )
    defaults.update(kwargs)
    return ModelConfig(**defaults)
