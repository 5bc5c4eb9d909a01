"""Corpus scanning, label parsing, stratified splits, and feature caches.

Labels come from the leading underscore-separated token of each filename.
The 19 named instruments map to fixed class indices; everything else (the
dozens of percussion instruments) lands in chromatic-percussion. Splits are
stratified per class with a seeded shuffle, so the same seed always yields
the same manifest regardless of scan order.

Cache bytes ("TMBF"): u32 version=1, u32 n_samples, u32 n_mels, u32
n_frames, then per sample u32 class index, u16 path length, UTF-8 path, and
n_mels*n_frames little-endian float32 values (frequency-major row-major).
Stats sidecar ("TMBS"): n_mels float32 means then n_mels float32 stds.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from timbrecls import dsp

log = logging.getLogger(__name__)

CLASS_NAMES = (
    "violin", "viola", "cello", "double-bass", "guitar", "banjo", "mandolin",
    "clarinet", "bass-clarinet", "saxophone", "flute", "oboe", "bassoon",
    "contrabassoon", "english-horn", "french-horn", "trombone", "trumpet",
    "tuba", "chromatic-percussion",
)
N_CLASSES = len(CLASS_NAMES)
PERCUSSION_INDEX = CLASS_NAMES.index("chromatic-percussion")

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.10, 0.20)
AUDIO_EXTENSIONS = (".wav", ".mp3")

CACHE_MAGIC = b"TMBF"
CACHE_VERSION = 1
STATS_MAGIC = b"TMBS"


class MalformedName(ValueError):
    """Filename carries no underscore-separated label token."""


class EmptyDataset(ValueError):
    """No usable audio files found."""


class CacheError(ValueError):
    """Feature cache bytes are malformed."""


@dataclass
class SampleRecord:
    path: str                 # relative to the dataset root, posix separators
    instrument: str           # raw leading token, lowercased
    class_index: int
    split: str | None = None


@dataclass
class SplitPlan:
    ratios: tuple[float, float, float]
    seed: int
    records: list[SampleRecord] = field(default_factory=list)

    def by_split(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]


def load_aliases(path=None) -> dict[str, str]:
    """Alias -> canonical map; the packaged table unless a file is given."""
    if path is None:
        text = resources.files("timbrecls").joinpath("aliases.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    aliases: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        alias, _, canonical = line.partition("\t")
        if canonical:
            aliases[alias.strip().lower()] = canonical.strip().lower()
    return aliases


def parse_label(filename: str) -> str:
    """Leading token before the first underscore, lowercased, extension stripped."""
    stem = Path(filename).name
    for ext in AUDIO_EXTENSIONS:
        if stem.lower().endswith(ext):
            stem = stem[:-len(ext)]
            break
    else:
        stem = Path(stem).stem or stem
    if "_" not in stem:
        raise MalformedName(f"no underscore-separated label in {filename!r}")
    return stem.split("_", 1)[0].lower()


def map_class(instrument: str, aliases: dict[str, str] | None = None) -> int:
    """Class index for an instrument token; unknown tokens are percussion."""
    token = instrument.strip().lower()
    if aliases is None:
        aliases = load_aliases()
    token = aliases.get(token, token)
    try:
        return CLASS_NAMES.index(token)
    except ValueError:
        return PERCUSSION_INDEX


def scan(root, extensions=AUDIO_EXTENSIONS, aliases=None) -> list[SampleRecord]:
    """Recursively collect labeled records, sorted by relative path."""
    root = Path(root)
    if aliases is None:
        aliases = load_aliases()
    records = []
    if root.is_dir():
        for path in sorted(root.rglob("*")):
            if not path.is_file() or path.suffix.lower() not in extensions:
                continue
            try:
                token = parse_label(path.name)
            except MalformedName:
                log.warning("skipping unlabelable file %s", path)
                continue
            records.append(SampleRecord(path=path.relative_to(root).as_posix(),
                                        instrument=token,
                                        class_index=map_class(token, aliases)))
    if not records:
        raise EmptyDataset(f"no audio files under {root}")
    return records


def class_histogram(records) -> np.ndarray:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for r in records:
        counts[r.class_index] += 1
    return counts


def make_split(records, ratios=DEFAULT_RATIOS, seed: int = 42) -> SplitPlan:
    """Stratified per-class split: seeded shuffle then a proportional cut.

    Per-class sizes are round(n * ratio) for train and val with the
    remainder going to test, keeping every class within one sample of the
    target proportions.
    """
    if not records:
        raise EmptyDataset("cannot split an empty record list")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")

    by_class: dict[int, list[SampleRecord]] = {}
    for r in sorted(records, key=lambda r: r.path):
        by_class.setdefault(r.class_index, []).append(r)

    out: list[SampleRecord] = []
    from timbrecls.tensor import Rng
    for class_index, group in sorted(by_class.items()):
        order = Rng.derive(seed, class_index).permutation(len(group))
        shuffled = [group[i] for i in order]
        n = len(shuffled)
        n_train = int(n * ratios[0] + 0.5)
        n_val = int(n * ratios[1] + 0.5)
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        for i, rec in enumerate(shuffled):
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            out.append(SampleRecord(rec.path, rec.instrument, rec.class_index, split))
    out.sort(key=lambda r: r.path)
    return SplitPlan(ratios=tuple(ratios), seed=seed, records=out)


def write_manifest(path, plan: SplitPlan) -> None:
    """One line per record: <split>\\t<class_index>\\t<relative_path>, path-sorted."""
    lines = [f"{r.split}\t{r.class_index}\t{r.path}"
             for r in sorted(plan.records, key=lambda r: r.path)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, ratios=DEFAULT_RATIOS, seed: int = 42) -> SplitPlan:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            split, class_index, rel = line.split("\t", 2)
        except ValueError:
            raise CacheError(f"{path}:{lineno}: expected 3 tab-separated fields")
        if split not in SPLITS:
            raise CacheError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(SampleRecord(path=rel, instrument=parse_label(rel),
                                    class_index=int(class_index), split=split))
    if not records:
        raise EmptyDataset(f"manifest {path} is empty")
    return SplitPlan(ratios=tuple(ratios), seed=seed, records=records)


# ---------------------------------------------------------------------------
# Feature caches

def write_feature_cache(path, entries, n_mels: int = dsp.N_MELS,
                        n_frames: int = dsp.N_FRAMES) -> None:
    """entries: iterable of (class_index, relative_path, float32 [n_mels, n_frames])."""
    entries = list(entries)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIII", CACHE_VERSION, len(entries), n_mels, n_frames))
        for class_index, rel, values in entries:
            values = np.ascontiguousarray(values, dtype="<f4")
            if values.shape != (n_mels, n_frames):
                raise CacheError(f"feature for {rel} has shape {values.shape}")
            encoded = rel.encode("utf-8")
            f.write(struct.pack("<IH", int(class_index), len(encoded)))
            f.write(encoded)
            f.write(values.tobytes())


def read_feature_cache(path):
    """Returns (labels int64 [n], paths list[str], values float32 [n, n_mels, n_frames])."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CACHE_MAGIC:
        raise CacheError(f"{path}: not a TMBF cache")
    version, n_samples, n_mels, n_frames = struct.unpack_from("<IIII", raw, 4)
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported version {version}")
    labels = np.zeros(n_samples, dtype=np.int64)
    paths = []
    values = np.zeros((n_samples, n_mels, n_frames), dtype=np.float32)
    pos = 20
    block = n_mels * n_frames * 4
    for i in range(n_samples):
        if pos + 6 > len(raw):
            raise CacheError(f"{path}: truncated at sample {i}")
        class_index, path_len = struct.unpack_from("<IH", raw, pos)
        pos += 6
        paths.append(raw[pos:pos + path_len].decode("utf-8"))
        pos += path_len
        if pos + block > len(raw):
            raise CacheError(f"{path}: truncated at sample {i}")
        values[i] = np.frombuffer(raw[pos:pos + block], dtype="<f4").reshape(n_mels, n_frames)
        pos += block
        labels[i] = class_index
    return labels, paths, values


def write_norm_stats(path, stats: dsp.NormStats) -> None:
    with open(path, "wb") as f:
        f.write(STATS_MAGIC)
        f.write(np.ascontiguousarray(stats.mean, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(stats.std, dtype="<f4").tobytes())


def read_norm_stats(path, n_mels: int = dsp.N_MELS) -> dsp.NormStats:
    raw = Path(path).read_bytes()
    if len(raw) != 4 + 8 * n_mels or raw[:4] != STATS_MAGIC:
        raise CacheError(f"{path}: not a TMBS stats file for {n_mels} mel bins")
    mean = np.frombuffer(raw, dtype="<f4", count=n_mels, offset=4).astype(np.float64)
    std = np.frombuffer(raw, dtype="<f4", count=n_mels, offset=4 + 4 * n_mels).astype(np.float64)
    return dsp.NormStats(mean=mean, std=std)


@dataclass
class CacheSummary:
    written: dict[str, int]
    skipped: list[tuple[str, str]]  # (relative path, reason)

    @property
    def total_written(self) -> int:
        return sum(self.written.values())


def _extract_one(args):
    """Worker: one file -> (relpath, patch values) or (relpath, error string)."""
    root, rel, params = args
    fb = _worker_filterbank(params)
    try:
        patch = dsp.patch_from_file(Path(root) / rel, fb,
                                    sample_rate=params["sample_rate"],
                                    window_len=params["n_fft"], hop=params["hop"],
                                    threshold=params["threshold"], frames=params["n_frames"])
        return rel, patch.values, None
    except (dsp.NoOnset, dsp.UnsupportedEncoding, dsp.CorruptHeader, dsp.EmptyClip,
            FileNotFoundError, OSError) as exc:
        return rel, None, f"{type(exc).__name__}: {exc}"


_FB_CACHE: dict[tuple, dsp.MelFilterbank] = {}


def _worker_filterbank(params) -> dsp.MelFilterbank:
    key = (params["n_mels"], params["fmin"], params["fmax"],
           params["sample_rate"], params["n_fft"])
    if key not in _FB_CACHE:
        _FB_CACHE[key] = dsp.mel_filterbank(*key)
    return _FB_CACHE[key]


def default_dsp_params() -> dict:
    return {"sample_rate": dsp.SAMPLE_RATE, "n_fft": dsp.N_FFT, "hop": dsp.HOP_LENGTH,
            "n_mels": dsp.N_MELS, "fmin": dsp.FMIN_HZ, "fmax": dsp.FMAX_HZ,
            "threshold": dsp.ONSET_THRESHOLD, "n_frames": dsp.N_FRAMES}


def build_cache(plan: SplitPlan, root, work_dir, dsp_params: dict | None = None,
                jobs: int = 1) -> CacheSummary:
    """Extract patches for every record, fit stats on train, write all caches.

    Files that fail to decode or have no onset are logged and excluded.
    Output is deterministic regardless of ``jobs``.
    """
    params = default_dsp_params()
    if dsp_params:
        params.update(dsp_params)
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    ordered = sorted(plan.records, key=lambda r: r.path)
    tasks = [(str(root), r.path, params) for r in ordered]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, tasks, chunksize=16))
    else:
        results = [_extract_one(t) for t in tasks]

    patches: dict[str, np.ndarray] = {}
    skipped: list[tuple[str, str]] = []
    for rel, values, error in results:
        if error is not None:
            log.warning("skipping %s (%s)", rel, error)
            skipped.append((rel, error))
        else:
            patches[rel] = values

    by_split = {s: [r for r in ordered if r.split == s and r.path in patches]
                for s in SPLITS}
    train_patches = [dsp.LogMelPatch(patches[r.path], 0) for r in by_split["train"]]
    if train_patches:
        stats = dsp.fit_norm_stats(train_patches)
    else:
        stats = dsp.NormStats(mean=np.zeros(params["n_mels"]),
                              std=np.ones(params["n_mels"]))
    # Round-trip the stats through their float32 disk form before applying
    # them, so features recomputed later from the sidecar match the cache.
    write_norm_stats(work_dir / "norm.tmbs", stats)
    stats = read_norm_stats(work_dir / "norm.tmbs", params["n_mels"])

    written = {}
    for split in SPLITS:
        entries = []
        for r in by_split[split]:
            patch = dsp.LogMelPatch(patches[r.path], onset_frame=0)
            normalized = dsp.normalize_patch(patch, stats).values
            entries.append((r.class_index, r.path, normalized.astype(np.float32)))
        write_feature_cache(work_dir / f"{split}.tmbf", entries,
                            params["n_mels"], params["n_frames"])
        written[split] = len(entries)
    return CacheSummary(written=written, skipped=skipped)
