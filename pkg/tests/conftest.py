"""Shared fixtures: hand-rolled WAV writers and synthetic tone corpora.

The WAV writers here are independent of the package's reader (write side vs
read side), and the tone corpus gives five spectrally separated classes so
end-to-end training tests have a learnable task.
"""

import struct
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from timbrecls import dataset
from timbrecls.tensor import Rng

SR = 22050

# Five tonal classes mapped onto real instrument names (class indices
# 0, 7, 10, 17, 18 in the fixed class table).
TONE_CLASSES = ("violin", "clarinet", "flute", "trumpet", "tuba")
TONE_BASE_HZ = (247.0, 554.0, 1175.0, 2637.0, 5274.0)


def wav_bytes(frames: np.ndarray, sample_rate: int, fmt: str) -> bytes:
    """Encode raw frames ([n] or [n, channels]) as RIFF/WAVE bytes.

    ``frames`` must already be in the target range: integer arrays for the
    pcm formats (pcm24 takes int32 values within 24-bit range), float for
    float32.
    """
    x = np.asarray(frames)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if fmt == "pcm8":
        payload = x.astype(np.uint8).tobytes()
        tag, bits = 1, 8
    elif fmt == "pcm16":
        payload = x.astype("<i2").tobytes()
        tag, bits = 1, 16
    elif fmt == "pcm24":
        as32 = x.astype("<i4")
        b = as32.view(np.uint8).reshape(-1, 4)[:, :3]  # little-endian low 3 bytes
        payload = b.tobytes()
        tag, bits = 1, 24
    elif fmt == "pcm32":
        payload = x.astype("<i4").tobytes()
        tag, bits = 1, 32
    elif fmt == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = 3, 32
    else:
        raise ValueError(fmt)
    block = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, channels, sample_rate,
                                    sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def write_wav_raw(path, frames, sample_rate, fmt):
    Path(path).write_bytes(wav_bytes(frames, sample_rate, fmt))


def write_wav(path, samples, sample_rate):
    """Float samples in [-1, 1] -> 16-bit PCM file."""
    pcm = np.round(np.clip(np.asarray(samples), -1.0, 1.0) * 32767.0).astype(np.int64)
    write_wav_raw(path, pcm, sample_rate, "pcm16")


def tone_signal(rng: Rng, class_id: int, sample_rate: int = SR,
                duration: float = 0.95) -> np.ndarray:
    """Band-limited harmonic tone with noise and a short silent lead-in."""
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = TONE_BASE_HZ[class_id] * (1.0 + 0.1 * rng.uniform(-1, 1, None))
    x = np.zeros(n)
    for harmonic, amp in ((1, 0.6), (2, 0.25), (3, 0.12)):
        freq = harmonic * f0
        if freq < 9000:
            x += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi, None))
    lead = int(rng.uniform(0.02, 0.12, None) * sample_rate)
    x[:lead] = 0.0
    attack = np.clip((np.arange(n) - lead) / (0.01 * sample_rate), 0.0, 1.0)
    x = x * attack + 0.003 * rng.normal(n)
    return 0.8 * x / max(1e-9, np.abs(x).max())


def make_tone_corpus(root: Path, per_class: int, seed: int = 123,
                     sample_rate: int = SR, duration: float = 0.95) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    for class_id, name in enumerate(TONE_CLASSES):
        for i in range(per_class):
            clip = tone_signal(rng, class_id, sample_rate, duration)
            write_wav(root / f"{name}_A{class_id}_{i}_forte_normal.wav", clip, sample_rate)
    return root


@pytest.fixture(scope="session")
def tone_corpus_root(tmp_path_factory):
    """500 WAVs: 100 per class, five separable classes."""
    return make_tone_corpus(tmp_path_factory.mktemp("tone_corpus"), per_class=100)


@pytest.fixture(scope="session")
def tone_caches(tone_corpus_root, tmp_path_factory):
    """Feature caches for the tone corpus (350/50/100 split at seed 42)."""
    work = tmp_path_factory.mktemp("tone_work")
    records = dataset.scan(tone_corpus_root, extensions=(".wav",))
    plan = dataset.make_split(records, seed=42)
    summary = dataset.build_cache(plan, tone_corpus_root, work)
    splits = {}
    for split in dataset.SPLITS:
        labels, paths, values = dataset.read_feature_cache(work / f"{split}.tmbf")
        splits[split] = SimpleNamespace(labels=labels, paths=paths, values=values)
    return SimpleNamespace(root=Path(tone_corpus_root), work=work, plan=plan,
                           summary=summary, **splits)


@pytest.fixture(scope="session")
def tiny_corpus_root(tmp_path_factory):
    """Small corpus (6 files per class) for CLI and dataset plumbing tests."""
    return make_tone_corpus(tmp_path_factory.mktemp("tiny_corpus"),
                            per_class=6, seed=321, duration=0.8)
