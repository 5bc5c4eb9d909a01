"""Audio front-end: WAV decode, resampling, STFT, log-mel patches.

The whole file->patch pipeline is a pure function of the file bytes and the
parameters, so repeated runs produce bit-identical features. Defaults: 22050
Hz, 1024-sample Hann window with hop 512 (50% overlap), 128 mel bands over
32.7-8000 Hz, per-clip [0,1] scaling of the log-mel values, onset threshold
0.1, and a 22-frame crop (~511 ms) starting at the onset frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

from timbrecls.tensor import ShapeMismatch

SAMPLE_RATE = 22050
N_FFT = 1024
HOP_LENGTH = 512
N_MELS = 128
FMIN_HZ = 32.7
FMAX_HZ = 8000.0
ONSET_THRESHOLD = 0.1
N_FRAMES = 22
LOG_EPS = 1e-10
STD_FLOOR = 1e-8


class UnsupportedEncoding(ValueError):
    """WAV encoding this reader does not handle (non-PCM or odd bit depth)."""


class CorruptHeader(ValueError):
    """File is not a structurally valid RIFF/WAVE stream."""


class EmptyClip(ValueError):
    """Audio payload contains no samples."""


class InvalidRange(ValueError):
    """Filterbank frequency range is out of order or beyond Nyquist."""


class NoOnset(ValueError):
    """No spectrogram column exceeds the onset threshold; skip the sample."""


class EmptyCollection(ValueError):
    """Statistics requested over zero patches."""


class AlreadyNormalized(ValueError):
    """Patch has been normalized once already."""


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFilterbank:
    """Triangular mel filters evaluated at the FFT bin frequencies.

    ``weights`` is [n_mels, n_fft//2 + 1]; each row is one unit-peak
    triangle. No area normalization is applied.
    """

    weights: np.ndarray
    fmin: float
    fmax: float
    sample_rate: int
    center_freqs_hz: np.ndarray


@dataclass
class LogMelSpectrogram:
    """Per-clip [0,1]-scaled log-mel magnitudes, one column per frame."""

    values: np.ndarray
    frame_hop_s: float


@dataclass
class LogMelPatch:
    """Fixed 128x22 feature patch cropped at the detected onset."""

    values: np.ndarray
    onset_frame: int
    normalized: bool = False


@dataclass
class NormStats:
    """Per-mel-bin mean/std fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray


# ---------------------------------------------------------------------------
# WAV decoding

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def load_wav(path) -> AudioClip:
    """Decode a PCM WAV file to a mono clip scaled to [-1, 1].

    Handles 8/16/24/32-bit integer and 32-bit float PCM; multi-channel
    input is averaged down to one channel. The original sample rate is kept.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        pos += 8
        body = raw[pos:pos + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise CorruptHeader(f"{path}: fmt chunk too short")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise CorruptHeader(f"{path}: extensible fmt chunk too short")
                (tag,) = struct.unpack_from("<H", body, 24)  # subformat GUID prefix
            fmt = (tag, channels, rate, bits)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise CorruptHeader(f"{path}: data chunk truncated")
            payload = body
        pos += chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise CorruptHeader(f"{path}: missing fmt chunk")
    if payload is None:
        raise CorruptHeader(f"{path}: missing data chunk")
    tag, channels, rate, bits = fmt
    if channels < 1 or rate < 1:
        raise CorruptHeader(f"{path}: invalid fmt fields (channels={channels}, rate={rate})")

    if tag == _WAVE_FORMAT_PCM and bits == 8:
        x = (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_PCM and bits == 24:
        trimmed = payload[:len(payload) // 3 * 3]
        b = np.frombuffer(trimmed, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        val = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        val = np.where(val & 0x800000, val - (1 << 24), val)
        x = val.astype(np.float64) / float(1 << 23)
    elif tag == _WAVE_FORMAT_PCM and bits == 32:
        x = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<i4").astype(np.float64) / float(1 << 31)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    elif tag in (_WAVE_FORMAT_PCM, _WAVE_FORMAT_IEEE_FLOAT):
        raise UnsupportedEncoding(f"{path}: {bits}-bit depth for format tag {tag:#x}")
    else:
        raise UnsupportedEncoding(f"{path}: non-PCM format tag {tag:#x}")

    frames = len(x) // channels
    if frames == 0:
        raise EmptyClip(f"{path}: no audio frames")
    x = x[:frames * channels]
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples=np.ascontiguousarray(x), sample_rate=int(rate))


# ---------------------------------------------------------------------------
# Resampling

def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Rational-ratio polyphase resampler (Hann-windowed sinc, 64 taps/phase).

    Identity when the rates already match; output length is
    round(n * target / source) and the dominant spectral peak is preserved.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src_rate = clip.sample_rate
    if target_rate == src_rate:
        return AudioClip(clip.samples.copy(), src_rate)

    g = math.gcd(src_rate, target_rate)
    up, down = target_rate // g, src_rate // g
    half = 32 * up  # 64 taps per output phase
    j = np.arange(-half, half + 1, dtype=np.float64)
    cutoff = min(1.0 / up, 1.0 / down)  # fraction of the upsampled Nyquist
    kernel = up * cutoff * np.sinc(cutoff * j)
    kernel *= np.hanning(len(j))

    full = upfirdn(kernel, clip.samples, up=up, down=down)
    offset = int(round(half / down))  # group delay in output samples
    n_out = int(round(len(clip.samples) * target_rate / src_rate))
    out = full[offset:offset + n_out]
    if len(out) < n_out:
        out = np.pad(out, (0, n_out - len(out)))
    return AudioClip(np.ascontiguousarray(out), int(target_rate))


# ---------------------------------------------------------------------------
# Spectrogram and mel filterbank

def stft_magnitude(clip: AudioClip, window_len: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    """Hann-windowed STFT magnitudes, shape [window_len//2 + 1, n_frames].

    Frames start at multiples of ``hop`` with no centering; clips shorter
    than one window are zero-padded up to it, so n_frames >= 1.
    """
    if window_len < hop:
        raise ValueError("window_len must be >= hop")
    x = clip.samples
    if len(x) == 0:
        raise EmptyClip("cannot compute STFT of an empty clip")
    if len(x) < window_len:
        x = np.pad(x, (0, window_len - len(x)))
    n_frames = (len(x) - window_len) // hop + 1
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window_len) / window_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * window, axis=1)
    return np.ascontiguousarray(np.abs(spectrum).T)


def hz_to_mel(freq_hz):
    """Mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(freq_hz, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f < min_log_hz, f / f_sp,
                    min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep)


def mel_to_hz(mel):
    m = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m < min_log_mel, m * f_sp,
                    1000.0 * np.exp(logstep * (m - min_log_mel)))


def mel_filterbank(n_mels: int = N_MELS, fmin: float = FMIN_HZ, fmax: float = FMAX_HZ,
                   sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT) -> MelFilterbank:
    """128 unit-peak triangular filters with mel-spaced centers on [fmin, fmax]."""
    if not (0.0 <= fmin < fmax <= sample_rate / 2.0):
        raise InvalidRange(f"need 0 <= fmin < fmax <= Nyquist, got [{fmin}, {fmax}] at {sample_rate} Hz")
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    grid_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    weights = np.zeros((n_mels, len(fft_freqs)))
    for m in range(n_mels):
        lo, center, hi = grid_hz[m], grid_hz[m + 1], grid_hz[m + 2]
        rising = (fft_freqs - lo) / (center - lo)
        falling = (hi - fft_freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights=weights, fmin=float(fmin), fmax=float(fmax),
                         sample_rate=int(sample_rate),
                         center_freqs_hz=np.ascontiguousarray(grid_hz[1:-1]))


def log_mel(stft_mag: np.ndarray, fb: MelFilterbank,
            frame_hop_s: float = HOP_LENGTH / SAMPLE_RATE) -> LogMelSpectrogram:
    """log(mel energies + 1e-10), then min-max scaled to [0,1] per clip.

    The per-clip scaling makes the 0.1 onset threshold a fixed fraction of
    the clip's dynamic range. A constant spectrogram (max == min) scales to
    all zeros and will later fail onset detection.
    """
    if stft_mag.ndim != 2 or stft_mag.shape[0] != fb.weights.shape[1]:
        raise ShapeMismatch(
            f"stft has {stft_mag.shape} rows, filterbank expects {fb.weights.shape[1]}")
    log_values = np.log(fb.weights @ stft_mag + LOG_EPS)
    lo, hi = log_values.min(), log_values.max()
    if hi == lo:
        scaled = np.zeros_like(log_values)
    else:
        scaled = (log_values - lo) / (hi - lo)
    return LogMelSpectrogram(values=scaled, frame_hop_s=float(frame_hop_s))


def trim_and_crop(spec: LogMelSpectrogram, threshold: float = ONSET_THRESHOLD,
                  frames: int = N_FRAMES) -> LogMelPatch:
    """Crop ``frames`` columns starting at the first column whose max exceeds
    ``threshold``; zero-pad on the right when the clip ends early."""
    col_max = spec.values.max(axis=0)
    above = np.nonzero(col_max > threshold)[0]
    if len(above) == 0:
        raise NoOnset(f"no frame exceeds threshold {threshold}")
    onset = int(above[0])
    patch = np.zeros((spec.values.shape[0], frames))
    available = spec.values[:, onset:onset + frames]
    patch[:, :available.shape[1]] = available
    return LogMelPatch(values=patch, onset_frame=onset, normalized=False)


def fit_norm_stats(patches) -> NormStats:
    """Per-bin mean/std over all frames of all patches (population std,
    floored at 1e-8). Fit on the training split only."""
    patches = list(patches)
    if not patches:
        raise EmptyCollection("no patches to fit statistics on")
    if any(p.normalized for p in patches):
        raise AlreadyNormalized("statistics must be fitted on unnormalized patches")
    stacked = np.concatenate([p.values for p in patches], axis=1)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize_patch(patch: LogMelPatch, stats: NormStats) -> LogMelPatch:
    """(value - mean) / std per mel bin."""
    if patch.normalized:
        raise AlreadyNormalized("patch is already normalized")
    values = (patch.values - stats.mean[:, None]) / stats.std[:, None]
    return LogMelPatch(values=values, onset_frame=patch.onset_frame, normalized=True)


def patch_from_clip(clip: AudioClip, fb: MelFilterbank, *, sample_rate: int = SAMPLE_RATE,
                    window_len: int = N_FFT, hop: int = HOP_LENGTH,
                    threshold: float = ONSET_THRESHOLD, frames: int = N_FRAMES) -> LogMelPatch:
    """Full clip -> unnormalized patch pipeline (resample, STFT, log-mel, crop)."""
    clip = resample(clip, sample_rate)
    mag = stft_magnitude(clip, window_len, hop)
    spec = log_mel(mag, fb, frame_hop_s=hop / sample_rate)
    return trim_and_crop(spec, threshold, frames)


def patch_from_file(path, fb: MelFilterbank, **kwargs) -> LogMelPatch:
    return patch_from_clip(load_wav(path), fb, **kwargs)
