"""Command-line surface: scan, preprocess, train, eval, ablate, attend.

Configuration precedence is flags > JSON config file > defaults, where the
defaults reproduce the reference training setup (22050 Hz / 128 mels /
h=8 attention / Adam at 1e-5). The work directory holds every artifact:
manifest, feature caches, checkpoints, logs, reports, attention CSVs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from timbrecls import dataset, dsp, evaluation, models, trainer

log = logging.getLogger("timbrecls")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (
    FileNotFoundError,
    dataset.EmptyDataset,
    dataset.MalformedName,
    dataset.CacheError,
    dsp.CorruptHeader,
    dsp.UnsupportedEncoding,
    dsp.EmptyClip,
    dsp.NoOnset,
    models.CheckpointError,
    models.WrongModelKind,
    trainer.EmptyCache,
    evaluation.ZeroTotalSupport,
)


class UnknownSample(ValueError):
    """Requested sample stem is not present in any feature cache."""


@dataclass
class RunConfig:
    dataset_root: str = "."
    work_dir: str = ""
    sample_rate: int = dsp.SAMPLE_RATE
    n_fft: int = dsp.N_FFT
    hop: int = dsp.HOP_LENGTH
    n_mels: int = dsp.N_MELS
    fmin: float = dsp.FMIN_HZ
    fmax: float = dsp.FMAX_HZ
    onset_threshold: float = dsp.ONSET_THRESHOLD
    n_frames: int = dsp.N_FRAMES
    ratios: tuple[float, float, float] = dataset.DEFAULT_RATIOS
    model: str = models.KIND_ATTENTION
    heads: int = 8
    jobs: int = 1
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)

    def resolved_work_dir(self) -> Path:
        work = self.work_dir or os.environ.get("TIMBRE_WORK_DIR", "work")
        return Path(work)

    def dsp_params(self) -> dict:
        return {"sample_rate": self.sample_rate, "n_fft": self.n_fft,
                "hop": self.hop, "n_mels": self.n_mels, "fmin": self.fmin,
                "fmax": self.fmax, "threshold": self.onset_threshold,
                "n_frames": self.n_frames}

    def model_spec(self) -> models.ModelSpec:
        return models.ModelSpec(kind=self.model, heads=self.heads,
                                n_mels=self.n_mels, n_frames=self.n_frames)


def load_config(path) -> RunConfig:
    """JSON config file; the optional "train" object maps onto TrainConfig."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    train_part = data.pop("train", {})
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"train"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: v for k, v in data.items()})
    if "ratios" in data:
        cfg.ratios = tuple(data["ratios"])
    cfg.train = trainer.TrainConfig(**train_part)
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "root", None):
        cfg.dataset_root = args.root
    if getattr(args, "work_dir", None):
        cfg.work_dir = args.work_dir
    if getattr(args, "model", None):
        cfg.model = args.model
    heads = getattr(args, "heads", None)
    if isinstance(heads, int):  # ablate passes a list, handled separately
        cfg.heads = heads
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.max_epochs = args.epochs
    if getattr(args, "patience", None) is not None:
        cfg.train.patience = args.patience
    if getattr(args, "lr", None) is not None:
        cfg.train.learning_rate = args.lr
    return cfg


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return _apply_overrides(cfg, args)


def _load_split(work_dir: Path, split: str):
    path = work_dir / f"{split}.tmbf"
    if not path.exists():
        raise dataset.CacheError(f"missing feature cache {path}; run preprocess first")
    labels, paths, values = dataset.read_feature_cache(path)
    return values, labels, paths


# ---------------------------------------------------------------------------
# Commands

def cmd_scan(cfg: RunConfig) -> int:
    records = dataset.scan(cfg.dataset_root)
    plan = dataset.make_split(records, ratios=cfg.ratios, seed=cfg.train.seed)
    work_dir = cfg.resolved_work_dir()
    work_dir.mkdir(parents=True, exist_ok=True)
    manifest = work_dir / "manifest.tsv"
    dataset.write_manifest(manifest, plan)

    counts = {s: dataset.class_histogram(plan.by_split(s)) for s in dataset.SPLITS}
    print(f"{'class':<22}{'train':>7}{'val':>6}{'test':>6}{'total':>7}")
    for i, name in enumerate(dataset.CLASS_NAMES):
        row = [counts[s][i] for s in dataset.SPLITS]
        print(f"{name:<22}{row[0]:>7}{row[1]:>6}{row[2]:>6}{sum(row):>7}")
    totals = [int(counts[s].sum()) for s in dataset.SPLITS]
    print(f"{'total':<22}{totals[0]:>7}{totals[1]:>6}{totals[2]:>6}{sum(totals):>7}")
    print(f"manifest written to {manifest}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig) -> int:
    work_dir = cfg.resolved_work_dir()
    manifest = work_dir / "manifest.tsv"
    if not manifest.exists():
        raise dataset.CacheError(f"missing manifest {manifest}; run scan first")
    plan = dataset.load_manifest(manifest, ratios=cfg.ratios, seed=cfg.train.seed)
    summary = dataset.build_cache(plan, cfg.dataset_root, work_dir,
                                  dsp_params=cfg.dsp_params(), jobs=cfg.jobs)
    written = ", ".join(f"{summary.written[s]} {s}" for s in dataset.SPLITS)
    print(f"cached {written}; skipped {len(summary.skipped)} file(s)")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    work_dir = cfg.resolved_work_dir()
    train_values, train_labels, _ = _load_split(work_dir, "train")
    val_values, val_labels, _ = _load_split(work_dir, "val")
    spec = cfg.model_spec()
    result = trainer.train(spec, (train_values, train_labels),
                           (val_values, val_labels), cfg.train, work_dir=work_dir)
    if result.log.rows:
        last = result.log.rows[-1]
        print(f"trained {spec.tag(cfg.train.seed)}: best val loss "
              f"{result.best_val_loss:.4f} at epoch {result.best_epoch} "
              f"({len(result.log.rows)} epochs run, last val f1 {last.val_f1:.3f})")
    else:
        print(f"saved untrained (freshly initialized) {spec.tag(cfg.train.seed)}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str) -> int:
    work_dir = cfg.resolved_work_dir()
    params, header = models.load_checkpoint(checkpoint)
    values, labels, _ = _load_split(work_dir, split)
    report = evaluation.evaluate_model(params, values, labels)
    stem = Path(checkpoint).stem
    report_path = work_dir / f"{stem}.{split}.eval.json"
    confusion_path = work_dir / f"{stem}.{split}.confusion.csv"
    evaluation.write_report_json(report_path, report)
    evaluation.write_confusion_csv(confusion_path, report.confusion)
    print(f"{split}: loss {report.loss:.4f} P {report.weighted_precision:.3f} "
          f"R {report.weighted_recall:.3f} F1 {report.weighted_f1:.3f}")
    print(f"report: {report_path}")
    print(f"confusion: {confusion_path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, heads) -> int:
    work_dir = cfg.resolved_work_dir()
    train_values, train_labels, _ = _load_split(work_dir, "train")
    val_values, val_labels, _ = _load_split(work_dir, "val")
    test_values, test_labels, _ = _load_split(work_dir, "test")
    rows = trainer.run_ablation((train_values, train_labels),
                                (val_values, val_labels),
                                (test_values, test_labels),
                                cfg.train, heads=heads, work_dir=work_dir)
    print(trainer.format_ablation_table(rows))
    out = work_dir / "ablation.csv"
    trainer.write_ablation_csv(out, rows)
    print(f"table: {out}")
    return EXIT_OK


def _find_sample(work_dir: Path, stem: str):
    """Locate a cached sample by its filename stem across all splits."""
    found_any_cache = False
    for split in dataset.SPLITS:
        path = work_dir / f"{split}.tmbf"
        if not path.exists():
            continue
        found_any_cache = True
        labels, paths, values = dataset.read_feature_cache(path)
        for i, rel in enumerate(paths):
            if Path(rel).stem == stem or rel == stem:
                return values[i], int(labels[i]), split, rel
    if not found_any_cache:
        raise dataset.CacheError(f"no feature caches under {work_dir}; run preprocess first")
    raise UnknownSample(f"sample {stem!r} not found in any split cache")


def cmd_attend(cfg: RunConfig, checkpoint: str, sample: str) -> int:
    work_dir = cfg.resolved_work_dir()
    params, _ = models.load_checkpoint(checkpoint)
    values, _, split, rel = _find_sample(work_dir, sample)
    trace = models.attention_trace(params, values.astype(np.float64))
    out_dir = work_dir / "attend"
    stem = Path(rel).stem
    written = evaluation.export_attention(trace, values.astype(np.float64), out_dir, stem)
    print(f"sample {rel} ({split} split): wrote {len(written)} CSVs to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--work-dir", help="artifact directory (default $TIMBRE_WORK_DIR or ./work)")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="timbrecls",
                     description="Instrument timbre classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="scan the corpus, write the split manifest")
    _add_common(p)

    p = sub.add_parser("preprocess", help="extract log-mel feature caches")
    _add_common(p)
    p.add_argument("--jobs", type=int, help="parallel extraction workers")

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.add_argument("--model", choices=[models.KIND_ATTENTION, models.KIND_FC])
    p.add_argument("--heads", type=int, help="attention heads (must divide 128)")
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--patience", type=int, help="early-stopping patience")
    p.add_argument("--lr", type=float, help="learning rate")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=list(dataset.SPLITS), default="test")

    p = sub.add_parser("ablate", help="train h in {1,8,16} plus the FC baseline")
    _add_common(p)
    p.add_argument("--heads", type=int, nargs="+", default=[1, 8, 16])
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("attend", help="export attention CSVs for one cached sample")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="filename stem of a cached sample")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        cfg = _config_from_args(args)
        if args.command == "scan":
            return cmd_scan(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "ablate":
            heads = args.heads if isinstance(args.heads, list) else [args.heads]
            return cmd_ablate(cfg, heads)
        if args.command == "attend":
            return cmd_attend(cfg, args.checkpoint, args.sample)
        parser.error(f"unknown command {args.command}")
    except trainer.NonFiniteLoss as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except UnknownSample as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except _DATA_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
