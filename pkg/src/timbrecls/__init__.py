"""Timbre classification of orchestral instrument samples.

Pipeline: WAV -> resample -> STFT -> 128-band log-mel patch (22 frames from
onset) -> frequency-attention or fully-connected classifier over 20
instrument classes, trained with Adam and evaluated with support-weighted
precision/recall/F1.
"""

__version__ = "0.1.0"

from timbrecls.tensor import Tensor, Rng  # noqa: F401
