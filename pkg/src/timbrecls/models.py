"""The two classifier architectures and their checkpoint format.

FreqAttention: one multi-head attention block over the 22 time frames
(frequency bins are the 128-wide embedding), flattened and fed to a single
fully connected layer with 20 outputs. FreqFC: a 128->128 fully connected
layer applied per time frame, ReLU, flatten, then the same 20-way layer.

Flattening is frequency-major (row-major on the [128, 22] orientation) for
both models so checkpoints are portable across them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from timbrecls import tensor as tt
from timbrecls.layers import (
    AttentionParams,
    AttentionTrace,
    InvalidHeadCount,
    LinearParams,
    build_trace,
    linear,
    multi_head_attention,
)
from timbrecls.tensor import Rng, ShapeMismatch, Tensor

KIND_ATTENTION = "attention"
KIND_FC = "fc"

CHECKPOINT_MAGIC = b"TMBC"
CHECKPOINT_VERSION = 1


class WrongModelKind(ValueError):
    """Operation requires the other architecture."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or disagree with the model spec."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; defaults match the trained configuration."""

    kind: str = KIND_ATTENTION
    heads: int = 8
    n_classes: int = 20
    n_mels: int = 128
    n_frames: int = 22

    def __post_init__(self):
        if self.kind not in (KIND_ATTENTION, KIND_FC):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == KIND_ATTENTION and (self.heads < 1 or self.n_mels % self.heads != 0):
            raise InvalidHeadCount(f"{self.heads} heads do not divide {self.n_mels}")

    @property
    def flat_dim(self) -> int:
        return self.n_mels * self.n_frames

    def tag(self, seed: int) -> str:
        if self.kind == KIND_ATTENTION:
            return f"attention_h{self.heads}_seed{seed}"
        return f"fc_seed{seed}"


class ParamSet:
    """Named parameter tensors plus the spec they were built for."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, Tensor]):
        self.spec = spec
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def param_count(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self.tensors.items() if name.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def linear(self, prefix: str) -> LinearParams:
        return LinearParams(weight=self.tensors[f"{prefix}.weight"],
                            bias=self.tensors[f"{prefix}.bias"])

    def attention(self, prefix: str = "att1") -> AttentionParams:
        return AttentionParams(w_q=self.linear(f"{prefix}.w_q"),
                               w_k=self.linear(f"{prefix}.w_k"),
                               w_v=self.linear(f"{prefix}.w_v"),
                               w_o=self.linear(f"{prefix}.w_o"),
                               heads=self.spec.heads)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_snapshot(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            t.data[...] = values[name]


def _glorot(rng: Rng, out_dim: int, in_dim: int) -> Tensor:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return Tensor(rng.uniform(-limit, limit, (out_dim, in_dim)), requires_grad=True)


def _linear_tensors(rng: Rng, prefix: str, out_dim: int, in_dim: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.weight": _glorot(rng, out_dim, in_dim),
        f"{prefix}.bias": Tensor(np.zeros(out_dim), requires_grad=True),
    }


def build(spec: ModelSpec, rng: Rng) -> ParamSet:
    """Allocate Glorot-uniform weights and zero biases, deterministic per seed."""
    d = spec.n_mels
    tensors: dict[str, Tensor] = {}
    if spec.kind == KIND_ATTENTION:
        for proj in ("w_q", "w_k", "w_v", "w_o"):
            tensors.update(_linear_tensors(rng, f"att1.{proj}", d, d))
        tensors.update(_linear_tensors(rng, "fc", spec.n_classes, spec.flat_dim))
    else:
        tensors.update(_linear_tensors(rng, "fc1", d, d))
        tensors.update(_linear_tensors(rng, "fc2", spec.n_classes, spec.flat_dim))
    return ParamSet(spec, tensors)


def _as_batch(spec: ModelSpec, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (1, spec.n_mels, spec.n_frames)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"batch must be [b, 1, {spec.n_mels}, {spec.n_frames}], got {x.shape}")
    return x


def _to_sequence(x: Tensor, spec: ModelSpec) -> Tensor:
    """[b, 1, 128, 22] -> [b, 22, 128]: time is the sequence, frequency the embedding."""
    b = x.shape[0]
    return tt.transpose(tt.reshape(x, (b, spec.n_mels, spec.n_frames)), (0, 2, 1))


def _flatten_freq_major(x: Tensor, spec: ModelSpec) -> Tensor:
    """[b, 22, 128] -> [b, 2816] flattened row-major in the [128, 22] orientation."""
    b = x.shape[0]
    return tt.reshape(tt.transpose(x, (0, 2, 1)), (b, spec.flat_dim))


def forward_freq_attention(params: ParamSet, batch, collect_traces: bool = False):
    """Logits [b, 20] plus per-sample attention traces when requested."""
    if params.spec.kind != KIND_ATTENTION:
        raise WrongModelKind("forward_freq_attention needs attention parameters")
    spec = params.spec
    x = _as_batch(spec, batch)
    seq = _to_sequence(x, spec)
    out, internals = multi_head_attention(params.attention(), seq)
    logits = linear(params.linear("fc"), _flatten_freq_major(out, spec))
    traces = None
    if collect_traces:
        traces = [build_trace(internals, sample=i) for i in range(x.shape[0])]
    return logits, traces


def forward_freq_fc(params: ParamSet, batch) -> Tensor:
    """fc1 applied to each frame's 128 bins, ReLU, flatten, fc2 -> logits [b, 20]."""
    if params.spec.kind != KIND_FC:
        raise WrongModelKind("forward_freq_fc needs fc parameters")
    spec = params.spec
    x = _as_batch(spec, batch)
    seq = _to_sequence(x, spec)
    hidden = tt.relu(linear(params.linear("fc1"), seq))
    return linear(params.linear("fc2"), _flatten_freq_major(hidden, spec))


def forward(params: ParamSet, batch) -> Tensor:
    """Kind-dispatching forward pass returning logits only."""
    if params.spec.kind == KIND_ATTENTION:
        logits, _ = forward_freq_attention(params, batch)
        return logits
    return forward_freq_fc(params, batch)


def attention_trace(params: ParamSet, patch) -> AttentionTrace:
    """Trace of the attention block for a single [128, 22] patch."""
    if params.spec.kind != KIND_ATTENTION:
        raise WrongModelKind("attention traces require the attention model")
    values = getattr(patch, "values", patch)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (params.spec.n_mels, params.spec.n_frames):
        raise ShapeMismatch(f"patch must be [{params.spec.n_mels}, {params.spec.n_frames}]")
    seq = Tensor(values.T)
    _, internals = multi_head_attention(params.attention(), seq, want_scores=True)
    return build_trace(internals)


# ---------------------------------------------------------------------------
# Checkpoints: magic "TMBC", u32 version, u32 header length, JSON header
# (spec fields + tensor manifest with shapes/offsets), then the raw
# little-endian float32 blobs in manifest order.

def save_checkpoint(path, params: ParamSet, seed: int = 0, epoch: int = 0) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, t in params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape),
                         "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": params.spec.kind,
        "heads": params.spec.heads,
        "n_classes": params.spec.n_classes,
        "n_mels": params.spec.n_mels,
        "n_frames": params.spec.n_frames,
        "seed": int(seed),
        "epoch": int(epoch),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    """Rebuild a ParamSet from a checkpoint, verifying counts against its spec."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a TMBC checkpoint")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})")

    spec = ModelSpec(kind=header["kind"], heads=header["heads"],
                     n_classes=header["n_classes"], n_mels=header["n_mels"],
                     n_frames=header["n_frames"])
    blob_base = 12 + header_len
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        start = blob_base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} extends past EOF")
        values = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {entry['name']} size mismatch")
        tensors[entry["name"]] = Tensor(values.reshape(shape), requires_grad=True)

    params = ParamSet(spec, tensors)
    expected = expected_param_count(spec)
    if params.param_count() != expected:
        raise CheckpointError(
            f"{path}: {params.param_count()} parameters, spec requires {expected}")
    return params, header


def expected_param_count(spec: ModelSpec) -> int:
    d, flat, k = spec.n_mels, spec.flat_dim, spec.n_classes
    head = flat * k + k
    if spec.kind == KIND_ATTENTION:
        return 4 * (d * d + d) + head
    return (d * d + d) + head
